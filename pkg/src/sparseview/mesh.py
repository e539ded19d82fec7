"""Triangle meshes: iso-surface extraction, OBJ I/O, Chamfer distance, ray casting."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .volume import SdfGrid


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def remove_degenerate(mesh: Mesh, tol: float = 1e-12) -> Mesh:
    keep = mesh.areas() > tol
    tris = mesh.triangles[keep]
    used, inverse = np.unique(tris.reshape(-1), return_inverse=True)
    return Mesh(mesh.vertices[used], inverse.reshape(-1, 3))


def extract_mesh(sdf: SdfGrid, iso: float = 0.0) -> Mesh:
    """Marching cubes with linear edge interpolation.

    Values above ``iso`` count as inside; triangles wind so face normals
    point toward decreasing values, i.e. outward.
    """
    vals = sdf.values
    if not (vals.min() < iso < vals.max()):
        raise MeshError(f"no sign change around iso={iso}: empty mesh")
    lo, hi = np.asarray(sdf.bounds[0], float), np.asarray(sdf.bounds[1], float)
    spacing = tuple((hi - lo) / (sdf.resolution - 1))
    verts, faces, _, _ = marching_cubes(vals, level=iso, spacing=spacing,
                                        gradient_direction="ascent", allow_degenerate=False)
    mesh = remove_degenerate(Mesh(verts + lo, faces))
    if len(mesh.triangles) == 0:
        raise MeshError("iso-surface produced no triangles")
    return mesh


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(os.fspath(path)) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs 3 vertices")
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from None
    if not verts or not faces:
        raise MeshError(f"{path}: mesh has no vertices or faces")
    return Mesh(np.array(verts), np.array(faces))


def sample_surface(mesh: Mesh, n: int, rng) -> np.ndarray:
    """Area-weighted uniform points on the mesh surface."""
    areas = mesh.areas()
    if len(areas) == 0 or areas.sum() <= 0:
        raise MeshError("cannot sample an empty mesh")
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    v = mesh.vertices[mesh.triangles[face]]
    return v[:, 0] + u[:, :1] * (v[:, 1] - v[:, 0]) + u[:, 1:] * (v[:, 2] - v[:, 0])


def sphere_sampler(center=(0.0, 0.0, 0.0), radius=0.5):
    def sample(n, rng):
        d = rng.standard_normal((n, 3))
        return np.asarray(center) + radius * d / np.linalg.norm(d, axis=1, keepdims=True)

    return sample


def chamfer_points(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MeshError("chamfer distance needs non-empty point sets")
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def chamfer_distance(mesh: Mesh, reference, n: int = 20000, seed: int = 0) -> float:
    """Chamfer distance between surface samples of ``mesh`` and ``reference(n, rng)``."""
    rng = np.random.default_rng(seed)
    pts = sample_surface(mesh, n, rng)
    ref = np.asarray(reference(n, rng))
    return chamfer_points(pts, ref)


def raycast(mesh: Mesh, origins, dirs, chunk: int = 2048):
    """Nearest hit per ray (Moller-Trumbore). Returns (t, face) with inf / -1 on miss."""
    v = mesh.vertices[mesh.triangles]
    v0 = v[:, 0]
    e1 = v[:, 1] - v0
    e2 = v[:, 2] - v0
    best_t = np.full(len(origins), np.inf)
    best_f = np.full(len(origins), -1, dtype=np.int64)
    for s in range(0, len(v0), chunk):
        a0, b1, b2 = v0[s:s + chunk], e1[s:s + chunk], e2[s:s + chunk]
        p = np.cross(dirs[:, None, :], b2[None])
        det = np.einsum("fk,rfk->rf", b1, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = origins[:, None, :] - a0[None]
            u = np.einsum("rfk,rfk->rf", tv, p) * inv
            q = np.cross(tv, b1[None])
            w = np.einsum("rk,rfk->rf", dirs, q) * inv
            t = np.einsum("fk,rfk->rf", b2, q) * inv
            ok = (np.abs(det) > 1e-14) & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        j = t.argmin(axis=1)
        tj = t[np.arange(len(t)), j]
        better = tj < best_t
        best_t[better] = tj[better]
        best_f[better] = j[better] + s
    return best_t, best_f


def render_mesh(mesh: Mesh, cam, shade_fn, ray_chunk: int = 256) -> np.ndarray:
    """Ray-cast ``mesh``; ``shade_fn(points, normals)`` colors the hits."""
    o, d = cam.rays()
    img = np.zeros((len(o), 3))
    normals = mesh.face_normals()
    for s in range(0, len(o), ray_chunk):
        t, f = raycast(mesh, o[s:s + ray_chunk], d[s:s + ray_chunk])
        hit = f >= 0
        if hit.any():
            pts = o[s:s + ray_chunk][hit] + t[hit, None] * d[s:s + ray_chunk][hit]
            img[s:s + ray_chunk][hit] = shade_fn(pts, normals[f[hit]])
    return np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)
