"""Dense voxel grids and differentiable emission-absorption volume rendering.

Grid values live on the vertices of a regular lattice spanning ``bounds``:
voxel ``[i, j, k]`` sits at ``lo + (i, j, k) * (hi - lo) / (R - 1)``.
Ray geometry depends only on the camera and the grid bounds, so each
camera gets a :class:`RenderPlan` reused across optimizer steps. The
marching kernels are compiled with numba and run rays in a fixed serial
order, so results do not depend on thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import Camera

DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass
class DensityGrid:
    densities: np.ndarray  # (R, R, R), >= 0
    colors: np.ndarray  # (R, R, R, 3), in [0, 1]
    bounds: tuple = DEFAULT_BOUNDS

    @property
    def resolution(self) -> int:
        return self.densities.shape[0]

    @classmethod
    def constant(cls, resolution, density=0.0, color=0.5, bounds=DEFAULT_BOUNDS):
        r = resolution
        return cls(np.full((r, r, r), float(density)), np.full((r, r, r, 3), float(color)), bounds)

    def copy(self) -> DensityGrid:
        return DensityGrid(self.densities.copy(), self.colors.copy(), self.bounds)


@dataclass
class SdfGrid:
    """Signed values with positive inside the surface."""

    values: np.ndarray  # (R, R, R)
    colors: np.ndarray  # (R, R, R, 3)
    bounds: tuple = DEFAULT_BOUNDS

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> float:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return float(np.max((hi - lo) / (self.resolution - 1)))

    def copy(self) -> SdfGrid:
        return SdfGrid(self.values.copy(), self.colors.copy(), self.bounds)


def grid_points(resolution, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def trilinear_weights(points, resolution, bounds=DEFAULT_BOUNDS):
    """Corner flat indices and weights, each ``(..., 8)``, for points in bounds."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    r = resolution
    u = (np.asarray(points, float) - lo) / (hi - lo) * (r - 1)
    u = np.clip(u, 0.0, r - 1)
    base = np.minimum(np.floor(u).astype(np.int64), r - 2)
    f = u - base
    idx = []
    wts = []
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1 - f[..., 2]
                i = base[..., 0] + dx
                j = base[..., 1] + dy
                k = base[..., 2] + dz
                idx.append((i * r + j) * r + k)
                wts.append(wx * wy * wz)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def trilinear(values, points, bounds=DEFAULT_BOUNDS):
    """Interpolate a ``(R, R, R[, C])`` lattice at ``points`` ``(..., 3)``."""
    r = values.shape[0]
    idx, w = trilinear_weights(points, r, bounds)
    flat = values.reshape(r**3, -1)
    out = np.einsum("...k,...kc->...c", w, flat[idx])
    return out[..., 0] if values.ndim == 3 else out


def resample(values, resolution, bounds=DEFAULT_BOUNDS):
    return trilinear(values, grid_points(resolution, bounds), bounds)


def ray_box(origins, dirs, bounds):
    """Slab test. Returns (t_near, t_far, hit); t_near clamped at 0."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = far > near
    return near, far, hit


@dataclass
class RenderPlan:
    """Fixed ray geometry of one camera against the grid bounds."""

    camera: Camera
    n_samples: int
    origins: np.ndarray  # (P, 3)
    dirs: np.ndarray  # (P, 3)
    near: np.ndarray  # (P,)
    step: np.ndarray  # (P,), 0 for rays missing the box

    @property
    def shape(self):
        return (self.camera.height, self.camera.width, 3)


def make_plan(cam: Camera, bounds=DEFAULT_BOUNDS, n_samples: int = 64) -> RenderPlan:
    """Uniform samples on [t_near, t_far); the last segment ends at box exit."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    o, d = cam.rays()
    near, far, hit = ray_box(o, d, bounds)
    step = np.where(hit, far - near, 0.0) / n_samples
    return RenderPlan(cam, n_samples, o, d, np.where(hit, near, 0.0), step)


@njit(cache=True, fastmath=True)
def _march_forward(fields, r, lo, scale, origins, dirs, near, step, n_samples, out, wsum):
    for p in range(origins.shape[0]):
        o0 = 0.0
        o1 = 0.0
        o2 = 0.0
        acc = 0.0
        dt = step[p]
        if dt > 0.0:
            trans = 1.0
            for i in range(n_samples):
                t = near[p] + i * dt
                ux = min(max((origins[p, 0] + t * dirs[p, 0] - lo[0]) * scale[0], 0.0), r - 1.0)
                uy = min(max((origins[p, 1] + t * dirs[p, 1] - lo[1]) * scale[1], 0.0), r - 1.0)
                uz = min(max((origins[p, 2] + t * dirs[p, 2] - lo[2]) * scale[2], 0.0), r - 1.0)
                bx = min(int(ux), r - 2)
                by = min(int(uy), r - 2)
                bz = min(int(uz), r - 2)
                fx = ux - bx
                fy = uy - by
                fz = uz - bz
                s = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for dx in range(2):
                    wx = fx if dx else 1.0 - fx
                    for dy in range(2):
                        wxy = wx * (fy if dy else 1.0 - fy)
                        base = ((bx + dx) * r + (by + dy)) * r + bz
                        for dz in range(2):
                            w = wxy * (fz if dz else 1.0 - fz)
                            j = base + dz
                            s += w * fields[j, 0]
                            c0 += w * fields[j, 1]
                            c1 += w * fields[j, 2]
                            c2 += w * fields[j, 3]
                att = np.exp(-s * dt)
                weight = trans * (1.0 - att)
                o0 += weight * c0
                o1 += weight * c1
                o2 += weight * c2
                acc += weight
                trans *= att
        out[p, 0] = o0
        out[p, 1] = o1
        out[p, 2] = o2
        wsum[p] = acc


@njit(cache=True, fastmath=True)
def _march_backward(fields, r, lo, scale, origins, dirs, near, step, n_samples, color, grad, gfields):
    for p in range(origins.shape[0]):
        dt = step[p]
        if dt <= 0.0:
            continue
        g0 = grad[p, 0]
        g1 = grad[p, 1]
        g2 = grad[p, 2]
        total = color[p, 0] * g0 + color[p, 1] * g1 + color[p, 2] * g2
        trans = 1.0
        prefix = 0.0
        for i in range(n_samples):
            t = near[p] + i * dt
            ux = min(max((origins[p, 0] + t * dirs[p, 0] - lo[0]) * scale[0], 0.0), r - 1.0)
            uy = min(max((origins[p, 1] + t * dirs[p, 1] - lo[1]) * scale[1], 0.0), r - 1.0)
            uz = min(max((origins[p, 2] + t * dirs[p, 2] - lo[2]) * scale[2], 0.0), r - 1.0)
            bx = min(int(ux), r - 2)
            by = min(int(uy), r - 2)
            bz = min(int(uz), r - 2)
            fx = ux - bx
            fy = uy - by
            fz = uz - bz
            s = 0.0
            cg = 0.0
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy else 1.0 - fy)
                    base = ((bx + dx) * r + (by + dy)) * r + bz
                    for dz in range(2):
                        w = wxy * (fz if dz else 1.0 - fz)
                        j = base + dz
                        s += w * fields[j, 0]
                        cg += w * (fields[j, 1] * g0 + fields[j, 2] * g1 + fields[j, 3] * g2)
            att = np.exp(-s * dt)
            weight = trans * (1.0 - att)
            trans_next = trans * att
            prefix += weight * cg
            # dC/dsigma_i = delta_i * (T_{i+1} c_i - sum_{k>i} w_k c_k)
            g_sigma = dt * (trans_next * cg - (total - prefix))
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy else 1.0 - fy)
                    base = ((bx + dx) * r + (by + dy)) * r + bz
                    for dz in range(2):
                        w = wxy * (fz if dz else 1.0 - fz)
                        j = base + dz
                        ww = w * weight
                        gfields[j, 0] += w * g_sigma
                        gfields[j, 1] += ww * g0
                        gfields[j, 2] += ww * g1
                        gfields[j, 3] += ww * g2
            trans = trans_next


LOSS_SQUARED = 0
LOSS_CHARBONNIER = 1


@njit(cache=True, fastmath=True)
def _march_loss(fields, r, lo, scale, origins, dirs, near, step, n_samples, target, mode, eps,
                gscale, gfields, out):
    """Forward render, per-pixel loss and backward pass in one sweep per ray.

    mode 0: sum (x - y)^2; mode 1: sum sqrt((x - y)^2 + eps^2). Returns the
    unscaled loss; gradients are multiplied by ``gscale`` and added to
    ``gfields``. Rays missing the box still contribute their residual.
    """
    n = n_samples
    base_c = np.empty(n, dtype=np.int64)
    fxs = np.empty(n)
    fys = np.empty(n)
    fzs = np.empty(n)
    atts = np.empty(n)
    loss = 0.0
    for p in range(origins.shape[0]):
        dt = step[p]
        o0 = 0.0
        o1 = 0.0
        o2 = 0.0
        if dt > 0.0:
            trans = 1.0
            for i in range(n):
                t = near[p] + i * dt
                ux = min(max((origins[p, 0] + t * dirs[p, 0] - lo[0]) * scale[0], 0.0), r - 1.0)
                uy = min(max((origins[p, 1] + t * dirs[p, 1] - lo[1]) * scale[1], 0.0), r - 1.0)
                uz = min(max((origins[p, 2] + t * dirs[p, 2] - lo[2]) * scale[2], 0.0), r - 1.0)
                bx = min(int(ux), r - 2)
                by = min(int(uy), r - 2)
                bz = min(int(uz), r - 2)
                fx = ux - bx
                fy = uy - by
                fz = uz - bz
                base_c[i] = (bx * r + by) * r + bz
                fxs[i] = fx
                fys[i] = fy
                fzs[i] = fz
                s = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for dx in range(2):
                    wx = fx if dx else 1.0 - fx
                    for dy in range(2):
                        wxy = wx * (fy if dy else 1.0 - fy)
                        b = base_c[i] + (dx * r + dy) * r
                        for dz in range(2):
                            w = wxy * (fz if dz else 1.0 - fz)
                            j = b + dz
                            s += w * fields[j, 0]
                            c0 += w * fields[j, 1]
                            c1 += w * fields[j, 2]
                            c2 += w * fields[j, 3]
                att = np.exp(-s * dt)
                atts[i] = att
                weight = trans * (1.0 - att)
                o0 += weight * c0
                o1 += weight * c1
                o2 += weight * c2
                trans *= att
        out[p, 0] = o0
        out[p, 1] = o1
        out[p, 2] = o2
        d0 = o0 - target[p, 0]
        d1 = o1 - target[p, 1]
        d2 = o2 - target[p, 2]
        if mode == 0:
            loss += d0 * d0 + d1 * d1 + d2 * d2
            g0 = 2.0 * d0
            g1 = 2.0 * d1
            g2 = 2.0 * d2
        else:
            e2 = eps * eps
            r0 = np.sqrt(d0 * d0 + e2)
            r1 = np.sqrt(d1 * d1 + e2)
            r2 = np.sqrt(d2 * d2 + e2)
            loss += r0 + r1 + r2
            g0 = d0 / r0
            g1 = d1 / r1
            g2 = d2 / r2
        if dt <= 0.0:
            continue
        g0 *= gscale
        g1 *= gscale
        g2 *= gscale
        total = o0 * g0 + o1 * g1 + o2 * g2
        trans = 1.0
        prefix = 0.0
        for i in range(n):
            fx = fxs[i]
            fy = fys[i]
            fz = fzs[i]
            cg = 0.0
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy else 1.0 - fy)
                    b = base_c[i] + (dx * r + dy) * r
                    for dz in range(2):
                        w = wxy * (fz if dz else 1.0 - fz)
                        j = b + dz
                        cg += w * (fields[j, 1] * g0 + fields[j, 2] * g1 + fields[j, 3] * g2)
            att = atts[i]
            weight = trans * (1.0 - att)
            trans_next = trans * att
            prefix += weight * cg
            g_sigma = dt * (trans_next * cg - (total - prefix))
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy else 1.0 - fy)
                    b = base_c[i] + (dx * r + dy) * r
                    for dz in range(2):
                        w = wxy * (fz if dz else 1.0 - fz)
                        j = b + dz
                        ww = w * weight
                        gfields[j, 0] += w * g_sigma
                        gfields[j, 1] += ww * g0
                        gfields[j, 2] += ww * g1
                        gfields[j, 3] += ww * g2
            trans = trans_next
    return loss


def _lattice(resolution, bounds):
    lo = np.asarray(bounds[0], float)
    hi = np.asarray(bounds[1], float)
    return lo, (resolution - 1) / (hi - lo)


def pack_fields(densities, colors) -> np.ndarray:
    """Interleave density and RGB into one ``(R^3, 4)`` array."""
    n = densities.size
    out = np.empty((n, 4))
    out[:, 0] = densities.reshape(-1)
    out[:, 1:] = colors.reshape(n, 3)
    return out


def render_packed(plan: RenderPlan, fields, resolution, bounds=DEFAULT_BOUNDS, return_weights=False):
    """Volume-render packed lattice fields through ``plan``."""
    lo, scale = _lattice(resolution, bounds)
    p = len(plan.near)
    out = np.empty((p, 3))
    wsum = np.empty(p)
    _march_forward(fields, resolution, lo, scale, plan.origins, plan.dirs, plan.near, plan.step,
                   plan.n_samples, out, wsum)
    img = out.reshape(plan.shape)
    if return_weights:
        return img, wsum.reshape(plan.shape[:2])
    return img


def backward_packed(plan: RenderPlan, fields, resolution, image, grad_image, bounds=DEFAULT_BOUNDS,
                    out=None):
    """Accumulate d(loss)/d(fields) given d(loss)/d(image).

    ``image`` must be the forward render of the same fields. Gradients are
    added into ``out`` (shape ``(R^3, 4)``) when given.
    """
    lo, scale = _lattice(resolution, bounds)
    if out is None:
        out = np.zeros_like(fields)
    _march_backward(fields, resolution, lo, scale, plan.origins, plan.dirs, plan.near, plan.step,
                    plan.n_samples, np.ascontiguousarray(image.reshape(-1, 3), dtype=np.float64),
                    np.ascontiguousarray(grad_image.reshape(-1, 3), dtype=np.float64), out)
    return out


def loss_and_backward(plan: RenderPlan, fields, resolution, target, mode=LOSS_SQUARED, eps=1e-3,
                      scale=1.0, out=None, bounds=DEFAULT_BOUNDS):
    """Per-pixel loss of the render against ``target`` plus its field gradient.

    Equivalent to :func:`render_packed` followed by :func:`backward_packed`
    with the loss's pixel gradient, in a single pass. Returns
    ``(loss, image)``; ``scale`` multiplies the gradient added into ``out``.
    """
    lo, sc = _lattice(resolution, bounds)
    tgt = np.ascontiguousarray(np.asarray(target, dtype=np.float64).reshape(-1, 3))
    if tgt.shape[0] != len(plan.near):
        raise ValueError(f"target has {tgt.shape[0]} pixels, plan has {len(plan.near)}")
    if out is None:
        out = np.zeros_like(fields)
    img = np.empty((len(plan.near), 3))
    loss = _march_loss(fields, resolution, lo, sc, plan.origins, plan.dirs, plan.near, plan.step,
                       plan.n_samples, tgt, mode, float(eps), float(scale), out, img)
    return float(loss), img.reshape(plan.shape)


def render_fields(plan: RenderPlan, densities, colors, bounds=DEFAULT_BOUNDS, return_weights=False):
    return render_packed(plan, pack_fields(densities, colors), densities.shape[0], bounds,
                         return_weights)


def render(grid: DensityGrid, cam: Camera, samples_per_ray: int = 64) -> np.ndarray:
    plan = make_plan(cam, grid.bounds, samples_per_ray)
    return render_fields(plan, grid.densities, grid.colors, grid.bounds)


def render_weight_sums(grid: DensityGrid, cam: Camera, samples_per_ray: int = 64) -> np.ndarray:
    """Per-pixel sum of compositing weights, i.e. opacity."""
    plan = make_plan(cam, grid.bounds, samples_per_ray)
    return render_fields(plan, grid.densities, grid.colors, grid.bounds, return_weights=True)[1]


# Grid checkpoint layout (little-endian):
#   0   4s   magic b"SVGR"
#   4   u32  format version (1)
#   8   u32  kind: 0 = density, 1 = sdf
#   12  u32  resolution R
#   16  6f8  bounds lo.xyz, hi.xyz
#   64  R^3 f8 scalar field (C order, x slowest)
#   ..  R^3*3 f8 colors
CHECKPOINT_MAGIC = b"SVGR"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIII6d")


class CheckpointError(ValueError):
    pass


def save_checkpoint(grid, path) -> None:
    kind = 1 if isinstance(grid, SdfGrid) else 0
    scalar = grid.values if kind else grid.densities
    r = scalar.shape[0]
    lo, hi = grid.bounds
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind, r, *lo, *hi))
        f.write(np.ascontiguousarray(scalar, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(grid.colors, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, kind, r, *b = _HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n = r**3
    expected = _HEADER.size + 8 * n * 4
    if len(buf) != expected:
        raise CheckpointError(f"checkpoint size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    scalar = data[:n].reshape(r, r, r).copy()
    colors = data[n:].reshape(r, r, r, 3).copy()
    bounds = (tuple(b[:3]), tuple(b[3:]))
    if kind == 1:
        return SdfGrid(scalar, colors, bounds)
    return DensityGrid(scalar, colors, bounds)
