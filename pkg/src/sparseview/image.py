"""Image buffers, quality metrics and PPM/PGM raster I/O.

Images are plain ``float64`` numpy arrays of shape ``(H, W, C)`` with
``C`` in {1, 3}. Values are nominally in [0, 1]; out-of-range values are
allowed until the image is quantized for writing.
"""

from __future__ import annotations

import math
import os

import numpy as np

SSIM_WINDOW = 8


class ImageShapeError(ValueError):
    pass


class PPMError(ValueError):
    """Malformed or unsupported raster file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def as_image(data) -> np.ndarray:
    """Validate and convert to an ``(H, W, C)`` float64 array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageShapeError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageShapeError(f"empty image of shape {img.shape}")
    return img


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ImageShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _box_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over every k x k window (valid positions only), per channel."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return s / (k * k)


def _box_mean_adjoint(g: np.ndarray, k: int) -> np.ndarray:
    # adjoint of _box_mean: each window value spread back over its k*k pixels
    padded = np.pad(g, ((k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    return _box_mean(padded, k)


def _ssim_terms(a, b, peak, window):
    a, b = _pair(a, b)
    if min(a.shape[0], a.shape[1]) < window:
        raise ImageShapeError(
            f"image {a.shape[1]}x{a.shape[0]} smaller than SSIM window {window}"
        )
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    e_aa = _box_mean(a * a, window)
    e_bb = _box_mean(b * b, window)
    e_ab = _box_mean(a * b, window)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + c1
    n2 = 2 * cov + c2
    d1 = mu_a**2 + mu_b**2 + c1
    d2 = var_a + var_b + c2
    smap = (n1 * n2) / (d1 * d2)
    return a, b, smap, (mu_a, mu_b, n1, n2, d1, d2)


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window`` x ``window`` uniform windows, stride 1.

    Statistics are population moments per channel; the per-channel means
    are averaged. Uses C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
    """
    _, _, smap, _ = _ssim_terms(a, b, peak, window)
    return float(smap.mean())


def ssim_grad(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``a`` (``b`` held fixed)."""
    a, b, smap, (mu_a, mu_b, n1, n2, d1, d2) = _ssim_terms(a, b, peak, window)
    # derivatives w.r.t. the window statistics mu_a, E[a^2], E[ab]
    d_mu = smap * (2 * mu_b / n1 - 2 * mu_a / d1 - 2 * mu_b / n2 + 2 * mu_a / d2)
    d_eaa = -smap / d2
    d_eab = 2 * smap / n2
    scale = 1.0 / smap.size
    g_mu = _box_mean_adjoint(d_mu * scale, window)
    g_eaa = _box_mean_adjoint(d_eaa * scale, window)
    g_eab = _box_mean_adjoint(d_eab * scale, window)
    grad = g_mu + 2 * a * g_eaa + b * g_eab
    return float(smap.mean()), grad


def quantize(img) -> np.ndarray:
    """Round-half-up to 8 bits, clamped to [0, 255]."""
    img = as_image(img)
    q = np.floor(img * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def encode_ppm(img) -> bytes:
    q = quantize(img)
    h, w, c = q.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def save_image(img, path) -> None:
    """Write ``img`` as binary PPM (3 channels) or PGM (1 channel)."""
    data = encode_ppm(img)
    with open(path, "wb") as f:
        f.write(data)


def _header_tokens(buf: bytes, count: int):
    tokens = []
    pos = 2
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise PPMError("truncated header", pos)
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise PPMError(f"expected integer, found {tok!r}", start)
        tokens.append((int(tok), start))
    if pos >= n:
        raise PPMError("truncated header", pos)
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    if len(buf) < 2:
        raise PPMError("truncated header", len(buf))
    magic = buf[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise PPMError(f"unsupported format magic {magic!r}", 0)
    tokens, start = _header_tokens(buf, 3)
    (w, w_at), (h, h_at), (maxval, m_at) = tokens
    if w < 1:
        raise PPMError("width must be >= 1", w_at)
    if h < 1:
        raise PPMError("height must be >= 1", h_at)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", m_at)
    need = w * h * channels
    raster = buf[start : start + need]
    if len(raster) < need:
        raise PPMError(f"truncated raster: expected {need} bytes, got {len(raster)}", len(buf))
    q = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return q.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as f:
        buf = f.read()
    return decode_ppm(buf)
