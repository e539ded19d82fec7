"""Analytic SDF scenes, a sphere-traced reference renderer and sparse camera rigs.

SDFs here use the conventional sign: negative inside, positive outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera

MAX_TRACE_STEPS = 128
TRACE_TOLERANCE = 1e-4


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    albedo: tuple = (1.0, 1.0, 1.0)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bounding_radius(self):
        return float(np.linalg.norm(self.center)) + self.radius


@dataclass(frozen=True)
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.4, 0.4, 0.4)
    albedo: tuple = (1.0, 1.0, 1.0)

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def bounding_radius(self):
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))


@dataclass(frozen=True)
class Torus:
    """Torus in the xz-plane; ``radii`` = (major, minor)."""

    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (0.4, 0.15)
    albedo: tuple = (1.0, 1.0, 1.0)

    def sdf(self, p):
        q = p - np.asarray(self.center)
        ring = np.hypot(q[..., 0], q[..., 2]) - self.radii[0]
        return np.hypot(ring, q[..., 1]) - self.radii[1]

    def bounding_radius(self):
        return float(np.linalg.norm(self.center)) + self.radii[0] + self.radii[1]


PRIMITIVES = {"sphere": Sphere, "box": Box, "torus": Torus}


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = field(default_factory=lambda: (Sphere(),))
    light_dir: tuple = (0.3, 0.8, 0.5)
    # constant term of the Lambertian model so unlit sides stay visible on black
    ambient: float = 0.3

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not 1 <= len(prims) <= 4:
            raise SceneError(f"scene needs 1..4 primitives, got {len(prims)}")
        for p in prims:
            _validate_primitive(p)
        object.__setattr__(self, "primitives", prims)
        light = np.asarray(self.light_dir, dtype=float)
        n = np.linalg.norm(light)
        if light.shape != (3,) or n == 0:
            raise SceneError(f"invalid light direction {self.light_dir!r}")
        object.__setattr__(self, "light_dir", tuple(light / n))
        if not 0.0 <= self.ambient <= 1.0:
            raise SceneError(f"ambient must be in [0, 1], got {self.ambient}")

    def bounding_radius(self) -> float:
        return max(p.bounding_radius() for p in self.primitives)


def _validate_primitive(p):
    if isinstance(p, Sphere):
        if p.radius <= 0:
            raise SceneError("sphere radius must be > 0")
    elif isinstance(p, Box):
        if min(p.half_extents) <= 0:
            raise SceneError("box half_extents must be > 0")
    elif isinstance(p, Torus):
        if min(p.radii) <= 0:
            raise SceneError("torus radii must be > 0")
    else:
        raise SceneError(f"unknown primitive {p!r}")
    alb = np.asarray(p.albedo, dtype=float)
    if alb.shape != (3,) or alb.min() < 0 or alb.max() > 1:
        raise SceneError(f"albedo must be in [0,1]^3, got {p.albedo!r}")


def analytic_sdf(scene: SceneSpec, p) -> np.ndarray:
    """Signed distance (negative inside). Unions take the min, which is a bound."""
    p = np.asarray(p, dtype=float)
    return np.min([prim.sdf(p) for prim in scene.primitives], axis=0)


def _closest_primitive(scene, p):
    return np.argmin([prim.sdf(p) for prim in scene.primitives], axis=0)


def sdf_normal(scene, p, h=1e-5):
    offsets = np.eye(3) * h
    g = np.stack(
        [analytic_sdf(scene, p + offsets[i]) - analytic_sdf(scene, p - offsets[i]) for i in range(3)],
        axis=-1,
    )
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def shade(scene: SceneSpec, points, normals) -> np.ndarray:
    """Lambertian color at surface points with the given normals."""
    albedo = np.asarray([prim.albedo for prim in scene.primitives])[_closest_primitive(scene, points)]
    lam = np.clip(normals @ np.asarray(scene.light_dir), 0.0, None)
    return albedo * (scene.ambient + (1 - scene.ambient) * lam)[..., None]


def sphere_trace(scene: SceneSpec, origins, dirs, max_steps=MAX_TRACE_STEPS, tol=TRACE_TOLERANCE):
    """March rays to the zero level set. Returns (t, hit_mask)."""
    t_max = np.linalg.norm(origins, axis=1) + scene.bounding_radius() + 1.0
    t = np.zeros(len(origins))
    hit = np.zeros(len(origins), dtype=bool)
    active = np.ones(len(origins), dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        d = analytic_sdf(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d < tol
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > t_max[idx]
        active[idx[done | escaped]] = False
    return t, hit


def ground_truth_render(scene: SceneSpec, cam: Camera) -> np.ndarray:
    o, d = cam.rays()
    t, hit = sphere_trace(scene, o, d)
    img = np.zeros((len(o), 3))
    if hit.any():
        pts = o[hit] + t[hit, None] * d[hit]
        img[hit] = shade(scene, pts, sdf_normal(scene, pts))
    return np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)


def sample_sparse_cameras(m: int, radius: float, elevation: float, seed, scene: SceneSpec | None = None,
                          **cam_kw) -> list[Camera]:
    """``m`` orbit cameras; one azimuth jittered inside each of m equal sectors."""
    if m < 1:
        raise SceneError(f"need m >= 1 cameras, got {m}")
    bound = scene.bounding_radius() if scene is not None else 0.0
    if radius <= bound:
        raise SceneError(f"orbit radius {radius} must exceed scene bounding radius {bound}")
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0, 2 * math.pi)
    jitter = rng.uniform(0.1, 0.9, size=m)
    az = (offset + 2 * math.pi * (np.arange(m) + jitter) / m) % (2 * math.pi)
    return [Camera.from_orbit(a, elevation, radius, **cam_kw) for a in np.sort(az)]
