import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparseview.image import (
    ImageShapeError,
    PPMError,
    decode_ppm,
    encode_ppm,
    load_image,
    mse,
    psnr,
    quantize,
    save_image,
    ssim,
    ssim_grad,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def image_pairs(min_side=1, max_side=6):
    shape = st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side), st.sampled_from([1, 3]))
    return shape.flatmap(lambda s: st.tuples(arrays(np.float64, s, elements=unit),
                                             arrays(np.float64, s, elements=unit)))


def _mse_loop(a, b):
    total, n = 0.0, 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (x - y) ** 2
        n += 1
    return total / n


def _ssim_oracle(a, b, window=8, peak=1.0):
    """Direct per-window, per-channel loop."""
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w, c = a.shape
    vals = []
    for ch in range(c):
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                x = a[i:i + window, j:j + window, ch].ravel()
                y = b[i:i + window, j:j + window, ch].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def checkerboard(n=16):
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy + xx) % 2).astype(float)[..., None]


# ---- mse / psnr -----------------------------------------------------------

def test_mse_examples():
    a = np.random.default_rng(0).uniform(size=(4, 5, 3))
    assert mse(a, a) == 0.0
    assert mse(np.zeros((2, 2, 1)), np.ones((2, 2, 1))) == 1.0
    x = np.array([0, 0.5, 1, 0.5]).reshape(2, 2, 1)
    y = np.array([0.1, 0.5, 0.8, 0.5]).reshape(2, 2, 1)
    assert mse(x, y) == pytest.approx(_mse_loop(x, y), abs=1e-15)
    assert mse(x, y) == pytest.approx(0.0125, abs=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ImageShapeError):
        mse(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ImageShapeError):
        mse(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_psnr_examples():
    a = np.full((3, 3, 3), 0.3)
    assert psnr(a, a) == math.inf
    b = a + 0.1  # mse = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    x = np.array([0, 0.5, 1, 0.5]).reshape(2, 2, 1)
    y = np.array([0.1, 0.5, 0.8, 0.5]).reshape(2, 2, 1)
    assert psnr(x, y) == pytest.approx(10 * math.log10(1 / 0.0125), abs=1e-9)
    assert psnr(x, y) == pytest.approx(19.0309, abs=1e-4)


@given(image_pairs())
def test_mse_symmetric_and_zero_on_diagonal(pair):
    a, b = pair
    assert mse(a, b) == mse(b, a)
    assert mse(a, a) == 0.0
    assert mse(a, b) == pytest.approx(_mse_loop(a, b), rel=1e-12, abs=1e-15)


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_psnr_decreasing_in_mse(e1, e2):
    a = np.zeros((1, 1, 1))
    p1 = psnr(a, np.full((1, 1, 1), math.sqrt(e1)))
    p2 = psnr(a, np.full((1, 1, 1), math.sqrt(e2)))
    if e1 < e2:
        assert p1 >= p2
    elif e1 > e2:
        assert p1 <= p2


# ---- ssim -----------------------------------------------------------------

def test_ssim_identity():
    a = np.random.default_rng(1).uniform(size=(12, 10, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_near_constant_limit():
    a = np.full((8, 8, 1), 0.5)
    b = a + 1e-6 * np.random.default_rng(2).standard_normal(a.shape)
    assert ssim(a, b) == pytest.approx(1.0, abs=1e-6)


def test_ssim_inverted_checkerboard_negative():
    a = checkerboard()
    b = 1.0 - a
    s = ssim(a, b)
    assert s == pytest.approx(_ssim_oracle(a, b), abs=1e-12)
    assert s < 0
    # golden value from the windowed oracle
    assert s == pytest.approx(-0.99640646836, abs=1e-9)


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(11, 13, 3))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ImageShapeError):
        ssim(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)))


def test_ssim_grad_finite_differences():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(10, 9, 3))
    b = rng.uniform(size=(10, 9, 3))
    _, g = ssim_grad(a, b)
    h = 1e-6
    for idx in [(0, 0, 0), (4, 5, 1), (9, 8, 2), (3, 2, 0), (7, 7, 1)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


@settings(max_examples=30)
@given(image_pairs(min_side=8, max_side=10))
def test_ssim_identity_property(pair):
    a, _ = pair
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


# ---- PPM ------------------------------------------------------------------

def test_white_pixel_bytes():
    assert encode_ppm(np.ones((1, 1, 3))) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_quantize_round_half_up_and_clamp():
    q = quantize(np.array([[[0.5 / 255, 1.5 / 255, -0.2]], [[1.3, 254.5 / 255, 0.0]]]))
    assert q.ravel().tolist() == [1, 2, 0, 255, 255, 0]


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(7, 5, 3))
    path = tmp_path / "a.ppm"
    save_image(img, path)
    back = load_image(path)
    assert np.array_equal(back, quantize(img) / 255.0)
    gray = rng.uniform(size=(4, 6, 1))
    save_image(gray, tmp_path / "g.pgm")
    assert np.array_equal(load_image(tmp_path / "g.pgm"), quantize(gray) / 255.0)


@given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3])).flatmap(
    lambda s: arrays(np.uint8, s)))
def test_ppm_lossless_on_quantized(q):
    img = q / 255.0
    buf = encode_ppm(img)
    assert encode_ppm(decode_ppm(buf)) == buf
    assert np.array_equal(quantize(decode_ppm(buf)), q)


def test_truncated_header_reports_offset():
    with pytest.raises(PPMError) as info:
        decode_ppm(b"P6\n4 ")
    assert "at byte" in str(info.value)
    assert info.value.offset >= 0


def test_truncated_pixels_and_bad_magic():
    with pytest.raises(PPMError):
        decode_ppm(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(PPMError) as info:
        decode_ppm(b"P3\n1 1\n255\n0 0 0")
    assert info.value.offset == 0
