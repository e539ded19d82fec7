"""Pinhole look-at camera with orbit parameterization (y is up)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


def _vec(v) -> tuple[float, float, float]:
    a = tuple(float(x) for x in v)
    if len(a) != 3:
        raise CameraError(f"expected a 3-vector, got {v!r}")
    return a


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_y: float = math.radians(40.0)
    width: int = 32
    height: int = 32

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position))
        object.__setattr__(self, "target", _vec(self.target))
        object.__setattr__(self, "up", _vec(self.up))
        fwd = np.subtract(self.target, self.position)
        dist = np.linalg.norm(fwd)
        if dist < 1e-12:
            raise CameraError("camera position coincides with target")
        if not 0.0 < self.fov_y < math.pi:
            raise CameraError(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"bad resolution {self.width}x{self.height}")
        up = np.asarray(self.up)
        if np.linalg.norm(np.cross(fwd / dist, up)) < 1e-9 * max(np.linalg.norm(up), 1e-300):
            raise CameraError("up vector is parallel to the view direction")

    @classmethod
    def from_orbit(cls, azimuth, elevation, radius, target=(0.0, 0.0, 0.0), **kw) -> Camera:
        t = np.asarray(target, dtype=float)
        offset = radius * np.array(
            [
                math.cos(elevation) * math.cos(azimuth),
                math.sin(elevation),
                math.cos(elevation) * math.sin(azimuth),
            ]
        )
        return cls(position=tuple(t + offset), target=tuple(t), **kw)

    def orbit(self) -> tuple[float, float, float]:
        """(azimuth, elevation, radius) of the position about the target."""
        d = np.subtract(self.position, self.target)
        r = float(np.linalg.norm(d))
        el = math.asin(max(-1.0, min(1.0, d[1] / r)))
        az = math.atan2(d[2], d[0]) % (2 * math.pi)
        return az, el, r

    def basis(self):
        fwd = np.subtract(self.target, self.position)
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return fwd, right, true_up

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions through pixel centers, row-major.

        Returns ``(origins, dirs)`` each of shape ``(H*W, 3)``.
        """
        fwd, right, up = self.basis()
        tan_half = math.tan(self.fov_y / 2)
        aspect = self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2 - 1) * tan_half * aspect
        ys = (1 - (np.arange(self.height) + 0.5) / self.height * 2) * tan_half
        gx, gy = np.meshgrid(xs, ys)
        d = fwd[None, :] + gx.reshape(-1, 1) * right[None, :] + gy.reshape(-1, 1) * up[None, :]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position), d.shape).copy()
        return o, d

    def with_resolution(self, width: int, height: int) -> Camera:
        return Camera(self.position, self.target, self.up, self.fov_y, width, height)
