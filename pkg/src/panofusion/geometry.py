"""Equirectangular coordinate mapping.

Convention: right-handed frame, +z up. Row 0 of a panorama is the zenith
(theta = 0) and column 0 is azimuth phi = 0, which points along +x.
Rotation is always identity; cameras differ only by translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Offset applied to integer pixel indices when building ray grids.
PIXEL_CENTER_OFFSET = 0.5


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(np.isfinite(pos)):
            raise DomainError(f"camera position must be 3 finite values, got {self.position!r}")
        object.__setattr__(self, "position", pos)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class Angles:
    theta: float
    phi: float


def pixel_to_angles(x, y, width: int, height: int):
    """Map continuous pixel coordinates to (theta, phi).

    ``theta = pi * y / H`` and ``phi = 2 * pi * x / W``. Accepts scalars or
    arrays; scalars give an :class:`Angles`, arrays a ``(theta, phi)`` tuple.
    """
    if width < 1 or height < 1:
        raise DomainError("panorama dimensions must be >= 1")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if np.any(xa < 0) or np.any(xa >= width) or np.any(ya < 0) or np.any(ya >= height):
        raise DomainError(f"pixel coordinate outside [0,{width})x[0,{height})")
    theta = np.pi * ya / height
    phi = 2.0 * np.pi * xa / width
    if theta.ndim == 0 and phi.ndim == 0:
        return Angles(float(theta), float(phi))
    return theta, phi


def angles_to_dir(theta, phi=None) -> np.ndarray:
    """Unit direction ``(sin t cos p, sin t sin p, cos t)``; trailing axis of size 3."""
    if isinstance(theta, Angles):
        theta, phi = theta.theta, theta.phi
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def dir_to_pixel(d, width: int, height: int):
    """Inverse mapping from unit direction(s) to continuous pixel coordinates.

    At the poles phi is undefined; those directions return ``x = 0`` and
    ``y = 0`` or ``y = H``. Pole rows should be treated as low confidence.
    """
    d = np.asarray(d, dtype=np.float64)
    dz = np.clip(d[..., 2], -1.0, 1.0)
    theta = np.arccos(dz)
    rho = np.hypot(d[..., 0], d[..., 1])
    phi = np.where(rho > 0, np.arctan2(d[..., 1], d[..., 0]), 0.0)
    phi = np.mod(phi, 2.0 * np.pi)
    # mod can return exactly 2*pi for tiny negative inputs
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    x = phi * width / (2.0 * np.pi)
    y = theta * height / np.pi
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def pixel_center_dirs(width: int, height: int) -> np.ndarray:
    """``(H, W, 3)`` unit directions through every pixel center."""
    xs = np.arange(width, dtype=np.float64) + PIXEL_CENTER_OFFSET
    ys = np.arange(height, dtype=np.float64) + PIXEL_CENTER_OFFSET
    theta, phi = pixel_to_angles(xs[None, :], ys[:, None], width, height)
    return angles_to_dir(*np.broadcast_arrays(theta, phi))


@dataclass
class RayGrid:
    """Rays of a panorama: shared origin plus ``(H, W, 3)`` directions."""

    origins: np.ndarray
    dirs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.dirs.shape[:2]

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origins.reshape(-1, 3), self.dirs.reshape(-1, 3)


def panorama_ray_grid(pose: CameraPose, width: int, height: int) -> RayGrid:
    if width < 1 or height < 1:
        raise DomainError("panorama dimensions must be >= 1")
    dirs = pixel_center_dirs(width, height)
    origins = np.broadcast_to(pose.array, dirs.shape).copy()
    return RayGrid(origins=origins, dirs=dirs)
