"""Two-stage grid reconstruction.

Stage 1 fits a density + color lattice to the sparse ground-truth views
by volume rendering. The density is then mapped to a normalized signed
field (positive inside) and refined in stage 2, where each iteration picks
a viewpoint, builds a fused pseudo ground truth for it from enhancer
samples, and descends a Charbonnier + TV + diffusion objective. In stage 2
the signed field is rendered through ``density = k * sigmoid(s * sdf)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import bandit as bd
from .consensus import FusionConfig, consensus_enhance, diffusion_loss_grad
from .image import as_image, psnr
from .volume import (
    LOSS_CHARBONNIER,
    LOSS_SQUARED,
    DensityGrid,
    SdfGrid,
    backward_packed,
    loss_and_backward,
    make_plan,
    render_packed,
    resample,
)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


def _check_pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def nerf_loss(rendered, gt) -> float:
    """Sum (not mean) of squared per-element errors."""
    a, b = _check_pair(rendered, gt)
    return float(np.sum((a - b) ** 2))


def charbonnier(pred, target, eps: float) -> float:
    """sum sqrt((x - x*)^2 + eps^2)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    a, b = _check_pair(pred, target)
    return float(np.sum(np.sqrt((a - b) ** 2 + eps * eps)))


def charbonnier_grad(pred, target, eps: float):
    a, b = _check_pair(pred, target)
    d = a - b
    root = np.sqrt(d * d + eps * eps)
    return float(root.sum()), d / root


def tv_reg(values) -> float:
    """Sum of squared differences over axis-aligned neighbour pairs."""
    v = values.values if isinstance(values, SdfGrid) else np.asarray(values)
    if min(v.shape[:3]) < 2:
        raise ValueError("TV needs resolution >= 2")
    return float(sum(np.sum(np.diff(v, axis=a) ** 2) for a in range(3)))


def tv_grad(v) -> np.ndarray:
    g = np.zeros_like(v)
    for a in range(3):
        d = np.diff(v, axis=a)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g[tuple(lo)] -= 2 * d
        g[tuple(hi)] += 2 * d
    return g


@njit(cache=True)
def _tv_accumulate(v, scale, grad):
    """TV of a cubic lattice; adds ``scale`` times its gradient into flat ``grad``."""
    r = v.shape[0]
    total = 0.0
    for i in range(r):
        for j in range(r):
            for k in range(r):
                x = v[i, j, k]
                f = (i * r + j) * r + k
                if i + 1 < r:
                    d = v[i + 1, j, k] - x
                    total += d * d
                    grad[f] -= 2.0 * scale * d
                    grad[f + r * r] += 2.0 * scale * d
                if j + 1 < r:
                    d = v[i, j + 1, k] - x
                    total += d * d
                    grad[f] -= 2.0 * scale * d
                    grad[f + r] += 2.0 * scale * d
                if k + 1 < r:
                    d = v[i, j, k + 1] - x
                    total += d * d
                    grad[f] -= 2.0 * scale * d
                    grad[f + 1] += 2.0 * scale * d
    return total


def tv_pair_count(r: int) -> int:
    return 3 * (r - 1) * r * r


def density_to_sdf(grid: DensityGrid, theta: float) -> SdfGrid:
    """(s - theta) / (max - theta) above theta, (s - theta) / theta below."""
    sigma = grid.densities
    smax = float(sigma.max())
    if theta <= 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    if theta >= smax:
        raise ValueError(f"theta {theta} must be below max density {smax}")
    vals = np.where(sigma > theta, (sigma - theta) / (smax - theta), (sigma - theta) / theta)
    return SdfGrid(vals, grid.colors.copy(), grid.bounds)


def default_theta(densities, fraction: float = 0.6) -> float:
    """``fraction`` times the mean of the top decile of densities."""
    flat = np.sort(np.asarray(densities).reshape(-1))
    top = flat[int(0.9 * flat.size):]
    return float(fraction * top.mean())


def sdf_to_density(values, scale: float, sharpness: float):
    """k * sigmoid(s * sdf) and its derivative w.r.t. sdf."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * sharpness * values))
    return scale * sig, scale * sharpness * sig * (1.0 - sig)


@njit(cache=True)
def _sdf_fields(params, scale, sharpness, fields, ddens):
    """Fill packed render fields from packed ``[sdf, rgb]`` parameters."""
    for p in range(params.shape[0]):
        sig = 0.5 * (1.0 + np.tanh(0.5 * sharpness * params[p, 0]))
        fields[p, 0] = scale * sig
        ddens[p] = scale * sharpness * sig * (1.0 - sig)
        fields[p, 1] = params[p, 1]
        fields[p, 2] = params[p, 2]
        fields[p, 3] = params[p, 3]


@njit(cache=True)
def _adam_step(params, grad, m, v, lr, b1, b2, eps, c1, c2):
    for p in range(params.shape[0]):
        for c in range(params.shape[1]):
            g = grad[p, c]
            m[p, c] = b1 * m[p, c] + (1.0 - b1) * g
            v[p, c] = b2 * v[p, c] + (1.0 - b2) * g * g
            params[p, c] -= lr[c] * (m[p, c] / c1) / (np.sqrt(v[p, c] / c2) + eps)


class Adam:
    def __init__(self, shape, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), shape[1:]).copy()
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        _adam_step(params, grad, self.m, self.v, self.lr, self.b1, self.b2, self.eps,
                   1.0 - self.b1**self.k, 1.0 - self.b2**self.k)


class SGD:
    def __init__(self, shape, lr):
        self.lr = np.asarray(lr, dtype=np.float64)

    def step(self, params, grad):
        params -= self.lr * grad


def make_optimizer(kind, shape, lr):
    if kind == "adam":
        return Adam(shape, lr)
    if kind == "sgd":
        return SGD(shape, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class Stage1Config:
    resolution: int = 32
    steps: int = 2000
    lr_density: float = 10.0
    lr_color: float = 0.02
    samples_per_ray: int = 64
    optimizer: str = "sgd"
    init_density: float = 0.1
    init_color: float = 0.5

    def __post_init__(self):
        _check_common(self, self.lr_density, self.lr_color)
        if self.init_density < 0 or not 0 <= self.init_color <= 1:
            raise ValueError("init_density must be >= 0 and init_color in [0, 1]")


@dataclass(frozen=True)
class Stage2Config:
    resolution: int = 64
    steps: int = 500
    lr_sdf: float = 0.02
    lr_color: float = 0.02
    samples_per_ray: int = 64
    density_scale: float = 50.0
    sharpness: float = 8.0
    theta_fraction: float = 0.6
    selection: str = "ucb"  # ucb | random | sequential | off
    c: float = 1.0
    n_interp: int | None = None  # None: as many as sparse views
    optimizer: str = "adam"
    heldout_every: int = 50

    def __post_init__(self):
        _check_common(self, self.lr_sdf, self.lr_color)
        if self.density_scale <= 0 or self.sharpness <= 0:
            raise ValueError("density_scale and sharpness must be > 0")
        if not 0 < self.theta_fraction < 1:
            raise ValueError("theta_fraction must be in (0, 1)")
        if self.selection not in ("off",) + tuple(bd.SELECTORS):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.c < 0:
            raise ValueError("c must be >= 0")
        if self.n_interp is not None and self.n_interp < 0:
            raise ValueError("n_interp must be >= 0")
        if self.heldout_every < 1:
            raise ValueError("heldout_every must be >= 1")


def _check_common(cfg, *lrs):
    if cfg.resolution < 2:
        raise ValueError("resolution must be >= 2")
    if cfg.steps < 0:
        raise ValueError("steps must be >= 0")
    if cfg.samples_per_ray < 1:
        raise ValueError("samples_per_ray must be >= 1")
    if min(lrs) < 0:
        raise ValueError("learning rates must be >= 0")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 1.0
    lambda_tv: float = 0.01
    lambda_diff: float = 0.5
    charbonnier_epsilon: float = 1e-3

    def __post_init__(self):
        ws = (self.lambda_color, self.lambda_tv, self.lambda_diff)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")
        if self.charbonnier_epsilon <= 0:
            raise ValueError("charbonnier_epsilon must be > 0")


def _plans(views, bounds, n_samples):
    return [make_plan(cam, bounds, n_samples) for cam, _ in views]


def stage1_loss_and_grad(fields, resolution, plans, targets, bounds):
    """Summed squared error over all views and its gradient w.r.t. packed fields."""
    grad = np.zeros_like(fields)
    total = 0.0
    for plan, gt in zip(plans, targets):
        total += loss_and_backward(plan, fields, resolution, gt, LOSS_SQUARED, out=grad, bounds=bounds)[0]
    return total, grad


def train_stage1(grid: DensityGrid, views, cfg: Stage1Config = Stage1Config(), history=None) -> DensityGrid:
    """Fit densities and colors to ``views`` = [(camera, image), ...].

    Appends ``(step, loss)`` rows to ``history`` when given.
    """
    if not views:
        raise ValueError("stage 1 needs at least one view")
    r = grid.resolution
    plans = _plans(views, grid.bounds, cfg.samples_per_ray)
    targets = [as_image(img) for _, img in views]
    for plan, gt in zip(plans, targets):
        if gt.shape != plan.shape:
            raise ValueError(f"view image {gt.shape} does not match camera {plan.shape}")
    fields = np.empty((r**3, 4))
    fields[:, 0] = grid.densities.reshape(-1)
    fields[:, 1:] = grid.colors.reshape(-1, 3)
    opt = make_optimizer(cfg.optimizer, fields.shape,
                         np.array([cfg.lr_density, cfg.lr_color, cfg.lr_color, cfg.lr_color]))
    for step in range(cfg.steps):
        loss, grad = stage1_loss_and_grad(fields, r, plans, targets, grid.bounds)
        if not math.isfinite(loss):
            raise NumericalError(f"stage 1: non-finite loss at step {step}")
        if history is not None:
            history.append((step, loss))
        opt.step(fields, grad)
        np.maximum(fields[:, 0], 0.0, out=fields[:, 0])
        np.clip(fields[:, 1:], 0.0, 1.0, out=fields[:, 1:])
    return DensityGrid(fields[:, 0].reshape(r, r, r).copy(),
                       fields[:, 1:].reshape(r, r, r, 3).copy(), grid.bounds)


def stage1_to_sdf(grid: DensityGrid, resolution: int, theta_fraction: float = 0.6) -> SdfGrid:
    """Upsample stage-1 fields to ``resolution`` and convert density to SDF."""
    theta = default_theta(grid.densities, theta_fraction)
    if resolution != grid.resolution:
        dens = resample(grid.densities, resolution, grid.bounds)
        cols = resample(grid.colors, resolution, grid.bounds)
        grid = DensityGrid(dens, cols, grid.bounds)
    return density_to_sdf(grid, theta)


@dataclass
class Stage2Objective:
    """Eq.-style stage-2 objective over packed ``[sdf, r, g, b]`` parameters.

    Charbonnier and TV terms are averaged over their element counts so that
    the weights are commensurate with the per-pixel diffusion loss.
    """

    resolution: int
    bounds: tuple
    plans: list
    targets: list
    weights: LossWeights
    fusion: FusionConfig
    density_scale: float
    sharpness: float

    def fields(self, params):
        f = np.empty_like(params)
        ddens = np.empty(len(params))
        _sdf_fields(params, float(self.density_scale), float(self.sharpness), f, ddens)
        return f, ddens

    def render(self, params, plan):
        f, _ = self.fields(params)
        return render_packed(plan, f, self.resolution, self.bounds)

    def __call__(self, params, extra=None):
        """Total loss, gradient and per-term breakdown.

        ``extra`` is an optional ``(plan, pseudo_gt)`` pair for the
        diffusion term.
        """
        w = self.weights
        r = self.resolution
        f, ddens = self.fields(params)
        gf = np.zeros_like(params)
        terms = {"color": 0.0, "tv": 0.0, "diff": 0.0}
        if w.lambda_color:
            n_elem = sum(t.size for t in self.targets)
            for plan, gt in zip(self.plans, self.targets):
                val, _ = loss_and_backward(plan, f, r, gt, LOSS_CHARBONNIER, w.charbonnier_epsilon,
                                           w.lambda_color / n_elem, gf, self.bounds)
                terms["color"] += val / n_elem
        if extra is not None and w.lambda_diff:
            plan, pseudo = extra
            img = render_packed(plan, f, r, self.bounds)
            val, g = diffusion_loss_grad(img, pseudo, self.fusion)
            terms["diff"] = val
            backward_packed(plan, f, r, img, g * w.lambda_diff, self.bounds, out=gf)
        grad = gf
        grad[:, 0] *= ddens
        if w.lambda_tv:
            pairs = tv_pair_count(r)
            gs = np.zeros(len(params))
            terms["tv"] = _tv_accumulate(params[:, 0].reshape(r, r, r), w.lambda_tv / pairs, gs) / pairs
            grad[:, 0] += gs
        total = w.lambda_color * terms["color"] + w.lambda_tv * terms["tv"] + w.lambda_diff * terms["diff"]
        return total, grad, terms


@dataclass
class Stage2Result:
    sdf: SdfGrid
    history: list = field(default_factory=list)
    bandit_log: bd.BanditLog = field(default_factory=bd.BanditLog)
    selector: object = None


def pack_sdf(sdf: SdfGrid) -> np.ndarray:
    r = sdf.resolution
    p = np.empty((r**3, 4))
    p[:, 0] = sdf.values.reshape(-1)
    p[:, 1:] = sdf.colors.reshape(-1, 3)
    return p


def train_stage2(sdf: SdfGrid, gt_views, action_space: bd.ActionSpace, enhancer, rng,
                 cfg: Stage2Config = Stage2Config(), weights: LossWeights = LossWeights(),
                 fusion: FusionConfig = FusionConfig(), heldout=None) -> Stage2Result:
    """Refine the signed field with GT views plus fused pseudo ground truth.

    Per iteration: pick an action, render it, fuse enhancer samples into a
    pseudo ground truth, take one optimizer step on the combined objective,
    then feed the normalized pre-step diffusion loss back as the reward.
    With ``selection == "off"`` or ``lambda_diff == 0`` the selector and
    enhancer are skipped entirely.
    """
    r = sdf.resolution
    plans = _plans(gt_views, sdf.bounds, cfg.samples_per_ray)
    targets = [as_image(img) for _, img in gt_views]
    obj = Stage2Objective(r, sdf.bounds, plans, targets, weights, fusion, cfg.density_scale, cfg.sharpness)
    params = pack_sdf(sdf)
    opt = make_optimizer(cfg.optimizer, params.shape,
                         np.array([cfg.lr_sdf, cfg.lr_color, cfg.lr_color, cfg.lr_color]))
    use_diff = cfg.selection != "off" and weights.lambda_diff > 0
    selector = None
    action_plans = {}
    if use_diff:
        selector = bd.make_selector(cfg.selection, len(action_space), cfg.c,
                                    np.random.default_rng(rng.integers(0, 2**63 - 1)))
    tracker = bd.RewardNormalizer()
    result = Stage2Result(sdf)
    result.selector = selector
    held_plans = [make_plan(cam, sdf.bounds, cfg.samples_per_ray) for cam, _ in heldout or []]
    for step in range(cfg.steps):
        extra = None
        row = {"step": step, "action": -1, "raw_loss": math.nan, "reward": math.nan}
        if use_diff:
            a = selector.select()
            cam = action_space.viewpoints[a]
            if a not in action_plans:
                action_plans[a] = make_plan(cam, sdf.bounds, cfg.samples_per_ray)
            plan = action_plans[a]
            rendered = obj.render(params, plan)
            fused, raw, kept = consensus_enhance(rendered, enhancer, fusion, rng, viewpoint=cam)
            reward = bd.reward_from_loss(raw, tracker)
            extra = (plan, fused)
            row.update(action=a, raw_loss=raw, reward=reward, kept=kept)
        total, grad, terms = obj(params, extra)
        if not math.isfinite(total):
            raise NumericalError(f"stage 2: non-finite loss at step {step}")
        opt.step(params, grad)
        np.clip(params[:, 1:], 0.0, 1.0, out=params[:, 1:])
        if use_diff:
            selector.update(row["action"], row["reward"])
            result.bandit_log.record(step, row["action"], row["raw_loss"], row["reward"], selector)
        row.update(total=total, **terms)
        if held_plans and (step % cfg.heldout_every == 0 or step == cfg.steps - 1):
            row["heldout_psnr"] = float(np.mean(
                [psnr(obj.render(params, p), img) for p, (_, img) in zip(held_plans, heldout)]))
        result.history.append(row)
    result.sdf = SdfGrid(params[:, 0].reshape(r, r, r).copy(),
                         params[:, 1:].reshape(r, r, r, 3).copy(), sdf.bounds)
    return result


def sdf_render(sdf: SdfGrid, cam, cfg: Stage2Config = Stage2Config()) -> np.ndarray:
    """Render a signed field the way stage 2 sees it."""
    params = pack_sdf(sdf)
    dens, _ = sdf_to_density(params[:, 0], cfg.density_scale, cfg.sharpness)
    params[:, 0] = dens
    plan = make_plan(cam, sdf.bounds, cfg.samples_per_ray)
    return render_packed(plan, params, sdf.resolution, sdf.bounds)
