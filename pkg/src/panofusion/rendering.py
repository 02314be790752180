"""Ray sampling and volumetric compositing.

All functions are batched over rays: sample distances have shape ``(R, N)``.
Sample positions are never differentiated; gradients reach the field only
through densities and colors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CameraPose, DomainError, panorama_ray_grid
from .reprojection import Panorama

IMPORTANCE_FLOOR = 1e-5
DEDUP_EPS = 1e-9
# Last interval extends past ``far`` by this fraction of the ray span.
FAR_CAP_FRACTION = 0.01


def _holds(cond: torch.Tensor) -> bool:
    """``bool(cond)``, or False under torch.func transforms where it is undecidable."""
    try:
        return bool(cond)
    except RuntimeError:
        return False


@dataclass
class SampleSet:
    """Sample distances ``t`` and intervals ``delta`` along each ray.

    ``edges`` holds the stratification bin boundaries ``(R, N+1)`` for sets
    produced by :func:`stratified_samples`; merged sets have none.
    """

    t: torch.Tensor
    delta: torch.Tensor
    edges: torch.Tensor | None = None


@dataclass
class SamplingConfig:
    near: float = 0.05
    far: float = 4.0
    n_coarse: int = 64
    n_fine: int = 128
    jitter: bool = True
    chunk: int = 4096

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise DomainError("need n_coarse >= 1 and n_fine >= 0")
        if not 0 < self.near < self.far:
            raise DomainError("need 0 < near < far")


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    depth_var: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, N)
    transmittance: torch.Tensor  # (R, N)
    t: torch.Tensor  # (R, N)

    @property
    def acc(self) -> torch.Tensor:
        return self.weights.sum(-1)


def intervals(t: torch.Tensor, near: float, far: float) -> torch.Tensor:
    cap = (far - t[..., -1:]) + FAR_CAP_FRACTION * (far - near)
    return torch.cat([t[..., 1:] - t[..., :-1], cap], dim=-1)


def stratified_samples(near: float, far: float, n: int, jitter: bool = False,
                       seed=None, n_rays: int = 1, dtype=torch.float64) -> SampleSet:
    """``n`` equal bins on ``[near, far]``; midpoints, or one uniform draw per bin."""
    if not 0 < near < far:
        raise DomainError("need 0 < near < far")
    if n < 1:
        raise DomainError("need at least one sample")
    edges = torch.linspace(near, far, n + 1, dtype=torch.float64).expand(n_rays, n + 1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    if jitter:
        u = _uniform((n_rays, n), seed)
    else:
        u = torch.full((n_rays, n), 0.5, dtype=torch.float64)
    t = lo + (hi - lo) * u
    t, edges = t.to(dtype), edges.to(dtype).contiguous()
    return SampleSet(t, intervals(t, near, far), edges)


def _uniform(shape, seed) -> torch.Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return torch.from_numpy(rng.random(shape))


def sample_pdf(edges: torch.Tensor, weights: torch.Tensor, n: int, jitter: bool = False,
               seed=None) -> torch.Tensor:
    """Inverse-CDF draws from the piecewise-constant density over ``edges`` bins."""
    w = weights.detach().to(torch.float64) + IMPORTANCE_FLOOR
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], dim=-1)
    cdf[..., -1] = 1.0
    R = weights.shape[0]
    base = torch.arange(n, dtype=torch.float64).expand(R, n)
    u = (base + (_uniform((R, n), seed) if jitter else 0.5)) / n
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, pdf.shape[-1])
    c0, c1 = cdf.gather(-1, idx - 1), cdf.gather(-1, idx)
    e = edges.detach().to(torch.float64)
    e0, e1 = e.gather(-1, idx - 1), e.gather(-1, idx)
    frac = ((u - c0) / (c1 - c0).clamp_min(1e-300)).clamp(0.0, 1.0)
    return e0 + frac * (e1 - e0)


def merge_sorted(t_a: torch.Tensor, t_b: torch.Tensor) -> torch.Tensor:
    """Sorted union, nudging duplicates apart so the result is strictly increasing."""
    t, _ = torch.sort(torch.cat([t_a, t_b], dim=-1), dim=-1)
    step = DEDUP_EPS * torch.arange(t.shape[-1], dtype=t.dtype)
    return step + torch.cummax(t - step, dim=-1).values


def importance_samples(coarse: SampleSet, weights: torch.Tensor, n_fine: int, near: float,
                       far: float, jitter: bool = False, seed=None) -> SampleSet:
    """Fine samples from coarse weights, merged with the coarse samples."""
    if coarse.edges is None:
        raise DomainError("coarse sample set carries no bin edges")
    if weights.shape != coarse.t.shape:
        raise DomainError("weights must match coarse samples")
    if _holds(torch.any(weights < 0)):
        raise DomainError("weights must be non-negative")
    t_f = sample_pdf(coarse.edges, weights, n_fine, jitter, seed).to(coarse.t.dtype)
    t = merge_sorted(coarse.t.detach(), t_f)
    return SampleSet(t, intervals(t, near, far))


def composite(sigmas: torch.Tensor, colors: torch.Tensor, samples: SampleSet) -> RenderOutput:
    """Alpha-composite color, expected depth and depth variance along rays."""
    if sigmas.shape != samples.t.shape or colors.shape != (*sigmas.shape, 3):
        raise DomainError("sigma, color and sample shapes disagree")
    if _holds(torch.any(sigmas < 0)):
        raise DomainError("densities must be non-negative")
    tau = sigmas * samples.delta
    alpha = 1.0 - torch.exp(-tau)
    accum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(accum[..., :1]), accum[..., :-1]], dim=-1))
    w = trans * alpha
    t = samples.t
    color = (w[..., None] * colors).sum(-2)
    depth = (w * t).sum(-1)
    var = (w * (depth[..., None] - t) ** 2).sum(-1)
    return RenderOutput(color, depth, var, w, trans, t)


def render_rays(field, rays_o: torch.Tensor, rays_d: torch.Tensor, cfg: SamplingConfig,
                seed=None, fine_samples: SampleSet | None = None):
    """Coarse pass then (if ``n_fine > 0``) an importance-sampled fine pass.

    ``field(x, d, branch)`` returns ``(sigma, rgb)``. Returns ``(coarse, fine)``;
    ``fine`` is None when ``cfg.n_fine == 0``.
    """
    dtype = rays_o.dtype
    R = rays_o.shape[0]
    rng = np.random.default_rng(seed) if cfg.jitter else None
    coarse_s = stratified_samples(cfg.near, cfg.far, cfg.n_coarse, cfg.jitter, rng, R, dtype)
    coarse = _shade(field, rays_o, rays_d, coarse_s, "coarse")
    if cfg.n_fine == 0:
        return coarse, None
    if fine_samples is None:
        fine_samples = importance_samples(coarse_s, coarse.weights.detach(), cfg.n_fine,
                                          cfg.near, cfg.far, cfg.jitter, rng)
    fine = _shade(field, rays_o, rays_d, fine_samples, "fine")
    return coarse, fine


def _shade(field, rays_o, rays_d, samples: SampleSet, branch: str) -> RenderOutput:
    x = rays_o[:, None, :] + samples.t[..., None] * rays_d[:, None, :]
    d = rays_d[:, None, :].expand_as(x)
    sigma, rgb = field(x, d, branch)
    return composite(sigma, rgb, samples)


def render_panorama(field, pose: CameraPose, width: int, height: int, cfg: SamplingConfig,
                    chunk: int | None = None, seed: int = 0, branch: str = "fine") -> Panorama:
    """Render color and depth for every pixel; all pixels are marked valid.

    Uses the fine branch when ``cfg.n_fine > 0``. Rendering is deterministic
    when ``cfg.jitter`` is off; with jitter each chunk draws from a generator
    seeded by ``(seed, first ray index)``.
    """
    grid = panorama_ray_grid(pose, width, height)
    o, d = grid.flat()
    chunk = chunk or cfg.chunk
    dtype = next(field.parameters()).dtype if hasattr(field, "parameters") else torch.float64
    rgb = np.empty((o.shape[0], 3))
    depth = np.empty(o.shape[0])
    with torch.no_grad():
        for s in range(0, o.shape[0], chunk):
            ot = torch.as_tensor(o[s:s + chunk], dtype=dtype)
            dt = torch.as_tensor(d[s:s + chunk], dtype=dtype)
            coarse, fine = render_rays(field, ot, dt, cfg, seed=(seed, s))
            out = fine if (fine is not None and branch == "fine") else coarse
            rgb[s:s + chunk] = out.color.double().numpy()
            depth[s:s + chunk] = out.depth.double().numpy()
    rgb = np.clip(rgb, 0.0, 1.0).reshape(height, width, 3)
    return Panorama(rgb, depth.reshape(height, width), np.ones((height, width), dtype=bool))
