"""Analytic axis-aligned box room, used as a ground-truth scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, DomainError, pixel_center_dirs
from .reprojection import Panorama

# Face order: -x, +x, -y, +y, -z (floor), +z (ceiling). Multiples of 1/255
# so that 8-bit PNG storage is lossless.
DEFAULT_FACE_COLORS = (
    (204, 51, 51),
    (51, 153, 204),
    (102, 187, 85),
    (238, 204, 68),
    (136, 102, 68),
    (238, 238, 238),
)


@dataclass
class BoxScene:
    half_extents: tuple[float, float, float] = (2.0, 1.5, 1.2)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    camera: tuple[float, float, float] = (0.3, -0.2, 0.1)
    face_colors: tuple = DEFAULT_FACE_COLORS

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64)
        if he.shape != (3,) or np.any(he <= 0):
            raise DomainError("half extents must be three positive values")
        if len(self.face_colors) != 6:
            raise DomainError("a box needs six face colors")
        rel = np.abs(np.asarray(self.camera) - np.asarray(self.center))
        if np.any(rel >= he):
            raise DomainError("camera must be strictly inside the box")

    @property
    def pose(self) -> CameraPose:
        return CameraPose(tuple(self.camera))

    def colors(self) -> np.ndarray:
        c = np.asarray(self.face_colors, dtype=np.float64)
        return c / 255.0 if c.max() > 1.0 else c

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exit distance and face index for rays starting inside the box."""
        o = np.asarray(origins, dtype=np.float64) - np.asarray(self.center)
        d = np.asarray(dirs, dtype=np.float64)
        he = np.asarray(self.half_extents, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(d >= 0, he, -he)
            t_axis = np.where(d != 0, (bound - o) / d, np.inf)
        axis = np.argmin(t_axis, axis=-1)
        t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
        sign = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] >= 0
        return t, 2 * axis + sign.astype(np.int64)

    def depth_from(self, position, dirs: np.ndarray) -> np.ndarray:
        t, _ = self.intersect(np.broadcast_to(position, dirs.shape), dirs)
        return t


def synth_box_scene(scene: BoxScene, width: int, height: int) -> Panorama:
    """Render the exact radial depth and face colors seen from ``scene.camera``."""
    dirs = pixel_center_dirs(width, height)
    origins = np.broadcast_to(np.asarray(scene.camera, dtype=np.float64), dirs.shape)
    depth, face = scene.intersect(origins, dirs)
    rgb = scene.colors()[face]
    return Panorama(rgb, depth, np.ones((height, width), dtype=bool))
