"""Stochastic view enhancers.

:class:`ToyEnhancer` is a pixel-space DDPM sampler whose denoiser is
analytic: it is the exact posterior-mean denoiser for a Gaussian data
prior centred on a target image, so reverse sampling produces genuine
stochastic samples around that target. The target blends an oracle image
(available only inside the synthetic harness) with the conditioning render.
An optional blob artifact mimics occasional hallucinated content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .camera import Camera
from .image import as_image


class EnhancerError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with 1-based step arrays.

    Index 0 of ``betas``/``alphas`` is padding (beta_0 = 0) so that
    ``alpha_bars[0] == 1`` and ``alpha_bars[t] = prod_{s<=t} alphas[s]``.
    """

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2 or b[0] != 0.0:
            raise EnhancerError("betas must be 1-D with betas[0] == 0 padding and T >= 1")
        if np.any(b[1:] <= 0) or np.any(b[1:] >= 1):
            raise EnhancerError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
        if T < 1:
            raise EnhancerError("T must be >= 1")
        ramp = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
        return cls(np.concatenate([[0.0], ramp]))

    @property
    def T(self) -> int:
        return self.betas.size - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise EnhancerError(f"step {t} outside [1, {self.T}]")


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise EnhancerError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(xt, t: int, eps_hat, sched: NoiseSchedule, rng=None, noise=None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} from an epsilon prediction.

    mean = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t), and
    sigma_t = sqrt(beta_t). The final step (t = 1) adds no noise. ``noise``
    overrides the draw from ``rng``.
    """
    sched.check_step(t)
    beta = sched.betas[t]
    ab = sched.alpha_bars[t]
    mean = (xt - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            raise EnhancerError("reverse_step needs rng or explicit noise for t > 1")
        noise = rng.standard_normal(np.shape(xt))
    return mean + math.sqrt(beta) * noise


def implied_noise(xt, t: int, x0, sched: NoiseSchedule) -> np.ndarray:
    """The eps that maps x0 to xt at step t."""
    ab = sched.alpha_bars[t]
    return (xt - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


@dataclass(frozen=True)
class EnhancerConfig:
    t_start_fraction: float = 0.5
    artifact_probability: float = 0.15
    artifact_magnitude: float = 0.6
    oracle_pull: float = 0.8
    # prior std around the target, per unit of target intensity
    sample_std: float = 0.05
    artifact_radius: float = 0.1  # fraction of image width

    def __post_init__(self):
        if not 0.0 < self.t_start_fraction <= 1.0:
            raise EnhancerError("t_start_fraction must be in (0, 1]")
        if not 0.0 <= self.artifact_probability <= 1.0:
            raise EnhancerError("artifact_probability must be in [0, 1]")
        if not 0.0 <= self.oracle_pull <= 1.0:
            raise EnhancerError("oracle_pull must be in [0, 1]")
        if self.sample_std < 0 or self.artifact_magnitude < 0 or self.artifact_radius <= 0:
            raise EnhancerError("sample_std, artifact_magnitude must be >= 0, artifact_radius > 0")


def gaussian_blob(shape, center, radius) -> np.ndarray:
    h, w = shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    return np.exp(-d2 / (2.0 * radius * radius))


def add_blob(img, center, radius, magnitude) -> np.ndarray:
    """Composite a Gaussian splat that pushes away from the local intensity."""
    blob = gaussian_blob(img.shape, center, radius)[..., None]
    cy, cx = int(round(center[0])), int(round(center[1]))
    cy = min(max(cy, 0), img.shape[0] - 1)
    cx = min(max(cx, 0), img.shape[1] - 1)
    sign = 1.0 if img[cy, cx].mean() < 0.5 else -1.0
    return img + sign * magnitude * blob


def toy_sample(condition, oracle, cfg: EnhancerConfig, sched: NoiseSchedule, rng) -> np.ndarray:
    """Refine ``condition`` by partial noising and analytic reverse sampling.

    The denoiser is the posterior mean under the diagonal prior
    x_0 ~ N(target, diag(s_i^2)) with target = pull * oracle + (1 - pull) *
    condition and s_i = sample_std * (channel-mean target intensity at i),
    turned into an epsilon prediction. Samples therefore vary on content
    and stay clean on an empty (black) background. With s = 0 this is
    exactly the noise implied by the target.
    """
    condition = as_image(condition)
    oracle = condition if oracle is None else as_image(oracle)
    if oracle.shape != condition.shape:
        raise EnhancerError(f"oracle shape {oracle.shape} != condition shape {condition.shape}")
    target = cfg.oracle_pull * oracle + (1.0 - cfg.oracle_pull) * condition
    t0 = max(1, math.ceil(cfg.t_start_fraction * sched.T))
    s2 = (cfg.sample_std * np.clip(target, 0.0, 1.0).mean(axis=2, keepdims=True)) ** 2
    x = forward_noise(condition, t0, rng.standard_normal(condition.shape), sched)
    for t in range(t0, 0, -1):
        ab = sched.alpha_bars[t]
        gain = s2 * math.sqrt(ab) / (ab * s2 + 1.0 - ab)  # per pixel
        x0_hat = target + gain * (x - math.sqrt(ab) * target)
        eps_hat = implied_noise(x, t, x0_hat, sched)
        x = reverse_step(x, t, eps_hat, sched, rng)
    # draws are always consumed so the artifact decision never shifts the stream
    u = rng.uniform()
    h, w = condition.shape[:2]
    center = (rng.uniform(0, h), rng.uniform(0, w))
    if u < cfg.artifact_probability:
        x = add_blob(x, center, cfg.artifact_radius * w, cfg.artifact_magnitude)
    return np.clip(x, 0.0, 1.0)


class Enhancer(Protocol):
    def sample(self, viewpoint: Camera | None, rendered: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...


@dataclass
class ToyEnhancer:
    cfg: EnhancerConfig = EnhancerConfig()
    schedule: NoiseSchedule = None
    oracle: Callable[[Camera], np.ndarray] | None = None

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = NoiseSchedule.linear()

    def sample(self, viewpoint, rendered, rng):
        ref = self.oracle(viewpoint) if self.oracle is not None else None
        return toy_sample(rendered, ref, self.cfg, self.schedule, rng)


class EchoEnhancer:
    """Returns the render unchanged."""

    def sample(self, viewpoint, rendered, rng):
        return as_image(rendered).copy()


@dataclass
class OracleEnhancer:
    """Returns the oracle image for the viewpoint."""

    oracle: Callable[[Camera], np.ndarray]

    def sample(self, viewpoint, rendered, rng):
        return as_image(self.oracle(viewpoint)).copy()


@dataclass
class CorruptedEnhancer:
    """Truth plus i.i.d. Gaussian noise; one call in every ``period`` gets a blob.

    The artifact lands on call index ``artifact_index`` modulo ``period``.
    """

    truth: np.ndarray
    noise_std: float
    magnitude: float
    period: int = 8
    artifact_index: int = 0
    radius: float = 0.1
    calls: int = 0

    def sample(self, viewpoint, rendered, rng):
        truth = as_image(self.truth)
        out = truth + self.noise_std * rng.standard_normal(truth.shape)
        if self.calls % self.period == self.artifact_index:
            h, w = truth.shape[:2]
            center = (rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w))
            blob = gaussian_blob(truth.shape, center, self.radius * w)[..., None]
            out = out + self.magnitude * blob
        self.calls += 1
        return out
