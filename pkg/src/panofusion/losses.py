"""Training objectives and image-embedding providers.

The semantic term is the negated cosine similarity of unit embeddings, so
lowering the total loss raises similarity between the two views.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import DomainError

VAR_FLOOR = 1e-6
EMBED_DIM = 64
UNIT_TOL = 1e-6


class LossError(ArithmeticError):
    pass


def _holds(cond) -> bool:
    try:
        return bool(cond)
    except RuntimeError:  # undecidable inside torch.func transforms
        return False


@dataclass
class LossWeights:
    lambda_geo: float = 0.1
    lambda_sc: float = 0.1
    k_sc: int = 10

    def __post_init__(self):
        if self.lambda_geo < 0 or self.lambda_sc < 0:
            raise DomainError("loss weights must be non-negative")
        if self.k_sc < 1:
            raise DomainError("k_sc must be >= 1")

    def semantic_due(self, it: int) -> bool:
        return self.lambda_sc > 0 and it % self.k_sc == 0


def _valid_count(valid: torch.Tensor) -> torch.Tensor:
    n = valid.sum()
    if _holds(n == 0):
        raise LossError("no valid rays in batch")
    return n


def color_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid rays of the squared color error summed over channels."""
    if pred.shape != gt.shape or valid.shape != pred.shape[:-1]:
        raise DomainError("prediction, target and mask shapes disagree")
    n = _valid_count(valid)
    err = ((pred - gt) ** 2).sum(-1)
    return torch.where(valid, err, torch.zeros_like(err)).sum() / n


def geo_loss(depth: torch.Tensor, depth_var: torch.Tensor, depth_gt: torch.Tensor,
             valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid rays of ``|D_hat - D| / sqrt(max(D_var, VAR_FLOOR))``."""
    if _holds(torch.any(depth_var < 0)):
        raise DomainError("depth variance must be non-negative")
    n = _valid_count(valid)
    gt = torch.where(valid, depth_gt, depth.detach())
    err = (depth - gt).abs() / torch.sqrt(depth_var.clamp_min(VAR_FLOOR))
    return torch.where(valid, err, torch.zeros_like(err)).sum() / n


def _check_unit(e, name):
    norm = e.norm() if isinstance(e, torch.Tensor) else np.linalg.norm(e)
    if _holds(abs(norm - 1.0) > UNIT_TOL):
        raise DomainError(f"{name} is not unit norm (|e| = {float(norm):.8g})")


def semantic_loss(e1, e2, lambda_sc: float):
    """``-lambda * e1 . e2`` for unit embeddings."""
    _check_unit(e1, "e1")
    _check_unit(e2, "e2")
    if isinstance(e1, torch.Tensor) or isinstance(e2, torch.Tensor):
        e1 = torch.as_tensor(e1)
        e2 = torch.as_tensor(e2, dtype=e1.dtype)
        return -lambda_sc * (e1 * e2).sum()
    return -lambda_sc * float(np.dot(e1, e2))


def total_loss(color, geo, sc, weights: LossWeights, it: int):
    """Weighted sum; ``sc`` contributes only when ``it`` is a multiple of ``k_sc``.

    ``sc`` is the already-weighted semantic term (see :func:`semantic_loss`).
    """
    for name, v in (("color", color), ("geo", geo), ("semantic", sc)):
        if v is not None and _holds(~torch.isfinite(torch.as_tensor(v)).all()):
            raise LossError(f"non-finite {name} loss")
    total = color + weights.lambda_geo * geo
    if sc is not None and it % weights.k_sc == 0:
        total = total + sc
    return total


class ToyEncoder:
    """Seeded random linear projection of pixels, L2-normalized.

    Stands in for a pretrained image encoder. The projection for a given
    ``(seed, image size)`` never changes, and because the map is linear up to
    normalization its pixel gradient is exact.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        self.seed = seed
        self.dim = dim
        self._cache: dict[int, np.ndarray] = {}

    def projection(self, n_pixels: int) -> np.ndarray:
        if n_pixels not in self._cache:
            rng = np.random.default_rng([self.seed, n_pixels])
            self._cache[n_pixels] = rng.standard_normal((self.dim, n_pixels)) / math.sqrt(n_pixels)
        return self._cache[n_pixels]

    def __call__(self, image):
        return self.embed(image)

    def embed(self, image):
        """Unit embedding; torch input keeps the autograd graph."""
        if isinstance(image, torch.Tensor):
            P = torch.as_tensor(self.projection(image.numel()), dtype=image.dtype)
            z = P @ image.reshape(-1)
            return z / z.norm()
        img = np.asarray(image, dtype=np.float64)
        if not np.all(np.isfinite(img)):
            raise DomainError("image must be finite")
        z = self.projection(img.size) @ img.reshape(-1)
        return z / np.linalg.norm(z)

    def vjp(self, image, cotangent) -> np.ndarray:
        """Pixel gradient of ``cotangent . embed(image)``."""
        img = np.asarray(image, dtype=np.float64)
        P = self.projection(img.size)
        z = P @ img.reshape(-1)
        n = np.linalg.norm(z)
        e = z / n
        c = np.asarray(cotangent, dtype=np.float64)
        gz = (c - e * np.dot(e, c)) / n
        return (P.T @ gz).reshape(img.shape)


# Anchor embedding file: magic b"PFEMB\0\0\0", u32 dim, dim little-endian float32.
EMBED_MAGIC = b"PFEMB\0\0\0"


def save_embedding(path, e) -> None:
    a = np.ascontiguousarray(np.asarray(e, dtype="<f4").reshape(-1))
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC + struct.pack("<I", a.size) + a.tobytes())


def load_embedding(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    (dim,) = struct.unpack_from("<I", buf, 8)
    e = np.frombuffer(buf, dtype="<f4", count=dim, offset=12).astype(np.float64)
    return e / np.linalg.norm(e)


class FileAnchor:
    """Anchor-side provider backed by a precomputed embedding file."""

    def __init__(self, path):
        self.embedding = load_embedding(path)

    def embed(self, image=None) -> np.ndarray:
        return self.embedding
