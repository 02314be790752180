"""Synthesize partial RGB-D panoramas at virtual camera positions.

The input panorama is lifted to a point cloud, then splatted one pixel per
point into each target panorama with a z-buffer. Holes and cracks are left
invalid on purpose; the radiance field is expected to fill them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, DomainError, dir_to_pixel, pixel_center_dirs

# Points closer than this to the target camera are dropped.
MIN_POINT_DISTANCE = 1e-9
# Depths within this distance count as a z-buffer tie.
ZBUFFER_TIE = 1e-9


class EmptyInputError(ValueError):
    pass


@dataclass
class Panorama:
    """Equirectangular RGB-D image.

    ``rgb`` is ``(H, W, 3)`` in [0, 1], ``depth`` is ``(H, W)`` radial distance
    in meters, ``valid`` is a boolean mask. Invalid pixels carry depth 0.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.valid is None:
            self.valid = self.depth > 0
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DomainError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2] or self.valid.shape != self.depth.shape:
            raise DomainError("rgb, depth and valid shapes disagree")
        self.depth = np.where(self.valid, self.depth, 0.0)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def check(self) -> None:
        v = self.valid
        if not np.all(np.isfinite(self.rgb[v])) or np.any(self.rgb[v] < 0) or np.any(self.rgb[v] > 1):
            raise DomainError("rgb must be finite and in [0,1] on valid pixels")
        if not np.all(np.isfinite(self.depth[v])) or np.any(self.depth[v] <= 0):
            raise DomainError("depth must be finite and positive on valid pixels")


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    source_pixel: np.ndarray  # (N, 2) as (row, col)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depth: np.ndarray | None = None  # radial distance from origin, kept exact

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TrainingFrame:
    pose: CameraPose
    pano: Panorama


@dataclass
class ProjectionStats:
    skipped_coincident: int = 0
    written: int = 0


def backproject(pano: Panorama, pose: CameraPose) -> PointCloud:
    pano.check()
    rows, cols = np.nonzero(pano.valid)
    if rows.size == 0:
        raise EmptyInputError("panorama has no valid pixels")
    dirs = pixel_center_dirs(pano.width, pano.height)[rows, cols]
    depth = pano.depth[rows, cols]
    points = pose.array + depth[:, None] * dirs
    return PointCloud(
        points=points,
        colors=pano.rgb[rows, cols].copy(),
        source_pixel=np.stack([rows, cols], axis=1),
        origin=pose.array,
        depth=depth.copy(),
    )


def project_to_pose(cloud: PointCloud, target: CameraPose, width: int, height: int,
                    stats: ProjectionStats | None = None) -> Panorama:
    """Z-buffered one-pixel splat of ``cloud`` into a panorama at ``target``.

    Each point lands in the pixel whose cell contains its direction. Per
    pixel the nearest point wins; ties (within ``ZBUFFER_TIE``) keep the
    point that comes first in the cloud.
    """
    if len(cloud) == 0:
        raise EmptyInputError("cannot project an empty point cloud")
    stats = stats if stats is not None else ProjectionStats()
    v = cloud.points - target.array
    r = np.linalg.norm(v, axis=1)
    if cloud.depth is not None and np.array_equal(target.array, cloud.origin):
        # same camera: reuse the stored radial depth so identity reprojection is exact
        r = cloud.depth.astype(np.float64, copy=True)
    keep = r >= MIN_POINT_DISTANCE
    stats.skipped_coincident += int(np.count_nonzero(~keep))
    idx = np.nonzero(keep)[0]
    rgb = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    valid = np.zeros((height, width), dtype=bool)
    if idx.size == 0:
        return Panorama(rgb, depth, valid)

    x, y = dir_to_pixel(v[idx] / r[idx, None], width, height)
    col = np.floor(x).astype(np.int64) % width
    row = np.clip(np.floor(y).astype(np.int64), 0, height - 1)
    pix = row * width + col
    rk = r[idx]

    zmin = np.full(height * width, np.inf)
    np.minimum.at(zmin, pix, rk)
    contender = rk <= zmin[pix] + ZBUFFER_TIE
    first = np.full(height * width, np.iinfo(np.int64).max)
    np.minimum.at(first, pix[contender], idx[contender])
    winners = first[first != np.iinfo(np.int64).max]
    wpix = pix[np.searchsorted(idx, winners)]

    wr, wc = np.divmod(wpix, width)
    rgb[wr, wc] = cloud.colors[winners]
    depth[wr, wc] = r[winners]
    valid[wr, wc] = True
    stats.written += int(winners.size)
    return Panorama(rgb, depth, valid)


def sample_virtual_poses(n: int, radius: float, seed: int,
                         center: CameraPose | None = None) -> list[CameraPose]:
    """``n`` poses uniform in a ball around ``center``; the first is ``center`` itself."""
    if n < 1:
        raise DomainError("need at least one pose")
    if radius <= 0:
        raise DomainError("radius must be positive")
    center = center or CameraPose()
    rng = np.random.default_rng(seed)
    poses = [center]
    if n > 1:
        g = rng.standard_normal((n - 1, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = radius * rng.random(n - 1) ** (1.0 / 3.0)
        for p in center.array + g * rad[:, None]:
            poses.append(CameraPose(tuple(p)))
    return poses


def generate_training_set(pano: Panorama, poses: list[CameraPose],
                          source: CameraPose | None = None) -> list[TrainingFrame]:
    if not poses:
        raise DomainError("poses must be non-empty")
    source = source or poses[0]
    cloud = backproject(pano, source)
    return [TrainingFrame(p, project_to_pose(cloud, p, pano.width, pano.height)) for p in poses]
