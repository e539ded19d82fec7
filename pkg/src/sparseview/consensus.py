"""Consensus fusion of stochastic enhancer samples.

Samples are scored against the render, outliers are dropped with an IQR
fence, and the survivors are averaged and blended with the render using a
confidence map derived from their per-pixel variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .image import ImageShapeError, as_image, encode_ppm, mse, ssim, ssim_grad

STRATEGIES = ("ours", "no-iqr", "max-pixel", "min-pixel", "max-image", "min-image", "single")


class FusionError(ValueError):
    pass


# (rendered, candidate) -> distance in [0, 1]
PerceptualDistance = Callable[[np.ndarray, np.ndarray], float]


def ssim_distance(a, b) -> float:
    """(1 - SSIM) / 2 clamped to [0, 1]; stands in for a learned perceptual metric."""
    return float(np.clip((1.0 - ssim(a, b)) / 2.0, 0.0, 1.0))


@dataclass(frozen=True)
class FusionConfig:
    n_samples: int = 8
    alpha: float = 50.0
    beta: float | None = None  # None: median of the variance map
    lambda_mse: float = 1.0
    lambda_perc: float = 0.1
    iqr_multiplier: float = 1.5
    invert_confidence: bool = False
    strategy: str = "ours"

    def __post_init__(self):
        if self.n_samples < 2:
            raise FusionError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.alpha <= 0:
            raise FusionError("alpha must be > 0")
        if self.beta is not None and self.beta < 0:
            raise FusionError("beta must be >= 0")
        if self.lambda_mse < 0 or self.lambda_perc < 0 or self.lambda_mse + self.lambda_perc <= 0:
            raise FusionError("loss weights must be >= 0 with a positive sum")
        if self.strategy not in STRATEGIES:
            raise FusionError(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")


def diffusion_loss(rendered, candidate, cfg: FusionConfig, perceptual: PerceptualDistance = ssim_distance) -> float:
    """lambda_mse * MSE + lambda_perc * perceptual distance."""
    loss = cfg.lambda_mse * mse(rendered, candidate)
    if cfg.lambda_perc:
        loss += cfg.lambda_perc * perceptual(rendered, candidate)
    return float(loss)


def diffusion_loss_grad(rendered, target, cfg: FusionConfig) -> tuple[float, np.ndarray]:
    """Default-metric diffusion loss and its gradient w.r.t. ``rendered``."""
    x, y = as_image(rendered), as_image(target)
    if x.shape != y.shape:
        raise ImageShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    loss = cfg.lambda_mse * float(np.mean(diff**2))
    grad = cfg.lambda_mse * 2.0 * diff / diff.size
    if cfg.lambda_perc:
        s, g = ssim_grad(x, y)
        d = (1.0 - s) / 2.0
        loss += cfg.lambda_perc * min(max(d, 0.0), 1.0)
        if 0.0 < d < 1.0:
            grad = grad - cfg.lambda_perc * 0.5 * g
    return loss, grad


def quantile(values, q: float) -> float:
    """Linear interpolation between order statistics at position (n - 1) q."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = (v.size - 1) * q
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def iqr_filter(losses: Sequence[float], multiplier: float = 1.5) -> list[int]:
    """Indices whose loss lies in [0, Q3 + multiplier * IQR], in input order."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise FusionError("iqr_filter needs at least one loss")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise FusionError("losses must be finite and >= 0")
    q1 = quantile(losses, 0.25)
    q3 = quantile(losses, 0.75)
    bound = q3 + multiplier * (q3 - q1)
    return [i for i, x in enumerate(losses) if x <= bound]


def _stack(images):
    if len(images) == 0:
        raise FusionError("need at least one image")
    arr = [as_image(im) for im in images]
    if any(a.shape != arr[0].shape for a in arr):
        raise ImageShapeError("images differ in shape")
    return np.stack(arr)


def pixel_mean(images) -> np.ndarray:
    """Per-pixel mean, taken about the first image so identical copies reduce exactly."""
    stack = _stack(images)
    return stack[0] + (stack - stack[0]).mean(axis=0)


def pixel_variance(images, mean) -> np.ndarray:
    """Population variance across images, averaged over channels -> (H, W)."""
    stack = _stack(images)
    if len(stack) < 2:
        raise FusionError("variance needs at least two images")
    mean = as_image(mean)
    if mean.shape != stack.shape[1:]:
        raise ImageShapeError(f"mean shape {mean.shape} != image shape {stack.shape[1:]}")
    var = np.mean((stack - mean) ** 2, axis=0)
    return var.mean(axis=2)


_V_LO = np.finfo(np.float64).tiny
_V_HI = np.nextafter(1.0, 0.0)


def confidence_map(var, alpha: float, beta: float) -> np.ndarray:
    """V = 1 - 1 / (1 + exp(-alpha (var - beta))), kept strictly inside (0, 1)."""
    if alpha <= 0:
        raise FusionError("alpha must be > 0")
    z = alpha * (np.asarray(var, dtype=np.float64) - beta)
    # V == 1 / (1 + exp(z)); split by sign so exp never overflows into the result
    with np.errstate(over="ignore", invalid="ignore"):
        v = np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-z)), 1.0 / (1.0 + np.exp(z)))
    return np.clip(v, _V_LO, _V_HI)


def fuse(rendered, diff_mean, conf, invert: bool = False) -> np.ndarray:
    """V * rendered + (1 - V) * diffusion mean; ``invert`` puts V on the mean."""
    r, m = as_image(rendered), as_image(diff_mean)
    if r.shape != m.shape:
        raise ImageShapeError(f"shape mismatch: {r.shape} vs {m.shape}")
    v = np.asarray(conf, dtype=np.float64)
    if v.shape != r.shape[:2]:
        raise ImageShapeError(f"confidence shape {v.shape} != image {r.shape[:2]}")
    v = v[..., None]
    if invert:
        return v * m + (1.0 - v) * r
    return v * r + (1.0 - v) * m


@dataclass
class FusionReport:
    fused: np.ndarray
    loss: float
    kept: list
    losses: np.ndarray
    variance: np.ndarray | None = None
    confidence: np.ndarray | None = None
    beta: float | None = None


def consensus_fuse(rendered, samples, cfg: FusionConfig,
                   perceptual: PerceptualDistance = ssim_distance) -> FusionReport:
    """Fuse already-drawn samples with the render according to ``cfg.strategy``."""
    rendered = as_image(rendered)
    stack = _stack(samples)
    if stack.shape[1:] != rendered.shape:
        raise ImageShapeError(f"samples {stack.shape[1:]} do not match render {rendered.shape}")
    losses = np.array([diffusion_loss(rendered, s, cfg, perceptual) for s in stack])
    report = FusionReport(None, 0.0, [], losses)
    if cfg.strategy == "single":
        kept = [0]
        fused = stack[0]
    else:
        kept = list(range(len(stack))) if cfg.strategy == "no-iqr" else iqr_filter(losses, cfg.iqr_multiplier)
        survivors = stack[kept]
        if cfg.strategy in ("ours", "no-iqr"):
            mean = pixel_mean(survivors)
            if len(survivors) >= 2:
                var = pixel_variance(survivors, mean)
            else:
                var = np.zeros(rendered.shape[:2])
            beta = float(np.median(var)) if cfg.beta is None else cfg.beta
            conf = confidence_map(var, cfg.alpha, beta)
            fused = fuse(rendered, mean, conf, cfg.invert_confidence)
            report.variance, report.confidence, report.beta = var, conf, beta
        elif cfg.strategy in ("max-pixel", "min-pixel"):
            err = np.abs(survivors - rendered[None]).sum(axis=3)
            pick = err.argmax(axis=0) if cfg.strategy == "max-pixel" else err.argmin(axis=0)
            fused = np.take_along_axis(survivors, pick[None, ..., None], axis=0)[0]
        else:
            sub = losses[kept]
            j = int(sub.argmax() if cfg.strategy == "max-image" else sub.argmin())
            fused = survivors[j]
    report.fused = fused
    report.kept = kept
    report.loss = diffusion_loss(rendered, fused, cfg, perceptual)
    return report


def draw_samples(rendered, enhancer, n: int, rng, viewpoint=None) -> list:
    """``n`` enhancer samples, each from a sub-generator seeded by (base, index)."""
    base = int(rng.integers(0, 2**63 - 1))
    out = []
    for i in range(n):
        sample = as_image(enhancer.sample(viewpoint, rendered, np.random.default_rng([base, i])))
        if sample.shape != as_image(rendered).shape:
            raise ImageShapeError(f"enhancer returned {sample.shape}, expected {rendered.shape}")
        out.append(sample)
    return out


class ConsensusResult(NamedTuple):
    fused: np.ndarray
    loss: float
    kept_count: int


def consensus_enhance(rendered, enhancer, cfg: FusionConfig, rng, viewpoint=None,
                      perceptual: PerceptualDistance = ssim_distance, report: bool = False):
    """Draw ``cfg.n_samples`` samples and fuse them.

    Returns ``(fused, loss, kept_count)``, where ``loss`` is the diffusion
    loss between the render and the fused image. With ``report=True`` the
    full :class:`FusionReport` is returned instead.
    """
    samples = draw_samples(rendered, enhancer, cfg.n_samples, rng, viewpoint)
    rep = consensus_fuse(rendered, samples, cfg, perceptual)
    if report:
        return rep
    return ConsensusResult(rep.fused, rep.loss, len(rep.kept))


def save_map(values, path) -> tuple[float, float]:
    """Write a scalar map as an 8-bit PGM scaled to its own range.

    The range goes to ``<path>.txt`` as ``min`` / ``max`` lines.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    with open(path, "wb") as f:
        f.write(encode_ppm(scaled[..., None]))
    with open(f"{path}.txt", "w") as f:
        f.write(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi
