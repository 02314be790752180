"""Optimization loop over reprojected training frames.

Randomness is keyed by ``(seed, iteration)`` rather than carried in a
generator, so a run resumed from a checkpoint replays exactly the same
batches as an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn.functional as F

from .field import FieldConfig, RadianceField, EncodingConfig, NumericError, loss_backward, \
    load_checkpoint, save_checkpoint
from .geometry import CameraPose, DomainError, pixel_center_dirs
from .losses import LossWeights, ToyEncoder, color_loss, geo_loss, semantic_loss, total_loss
from .rendering import SamplingConfig, render_rays
from .reprojection import Panorama, TrainingFrame, generate_training_set, sample_virtual_poses

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "color_loss", "geo_loss", "sc_loss", "total", "elapsed_ms")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a run. Defaults are the published full-scale settings;
    :meth:`desk` gives the CPU-scale profile used by tests and tutorials."""

    iters: int = 200_000
    batch_rays: int = 1400
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    n_coarse: int = 64
    n_fine: int = 128
    lambda_geo: float = 0.1
    lambda_sc: float = 0.1
    k_sc: int = 10
    n_poses: int = 8
    pose_radius: float = 0.3
    near: float = 0.05
    far: float = 0.0  # 0 means 1.1 x the largest valid input depth
    jitter: bool = True
    # network
    net_depth: int = 8
    net_width: int = 256
    net_skips: str = "4"
    L_pos: int = 10
    L_dir: int = 4
    include_input: bool = True
    # semantic step
    sc_height: int = 32
    sc_width: int = 64
    sc_n_coarse: int = 32
    # seeds
    seed_init: int = 0
    seed_poses: int = 1
    seed_rays: int = 2
    seed_semantic: int = 3
    seed_encoder: int = 4
    checkpoint_every: int = 500

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise DomainError("need lr_start >= lr_end > 0")
        if self.batch_rays < 1:
            raise DomainError("batch_rays must be >= 1")
        if self.iters < 0:
            raise DomainError("iters must be >= 0")
        self.loss_weights  # validates

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(iters=2000, batch_rays=1024, n_coarse=16, n_fine=16, net_depth=4,
                    net_width=64, net_skips="2", pose_radius=0.2, sc_height=16, sc_width=32,
                    sc_n_coarse=16)
        base.update(overrides)
        return cls(**base)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_geo, self.lambda_sc, self.k_sc)

    def field_config(self) -> FieldConfig:
        skips = tuple(int(s) for s in str(self.net_skips).split(",") if s.strip())
        enc = EncodingConfig(self.L_pos, self.L_dir, self.include_input)
        return FieldConfig(self.net_depth, self.net_width, skips, enc, self.seed_init)

    def sampling(self, far: float) -> SamplingConfig:
        return SamplingConfig(self.near, far, self.n_coarse, self.n_fine, self.jitter)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Exponential decay from ``lr_start`` at 0 to ``lr_end`` at ``cfg.iters``."""
    if cfg.iters == 0 or it <= 0:
        return cfg.lr_start
    if it >= cfg.iters:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (it / cfg.iters)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": t.numpy() for k, t in self.m.items()}
        out.update({f"adam.v.{k}": t.numpy() for k, t in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        st = cls()
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                st.m[k[7:]] = torch.from_numpy(a.copy())
            elif k.startswith("adam.v."):
                st.v[k[7:]] = torch.from_numpy(a.copy())
        if "adam.step" in arrays:
            st.step = int(arrays["adam.step"][0])
        return st


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DomainError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
        v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
        denom = (v / c2).sqrt_().add_(ADAM_EPS)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state


@dataclass
class RayBatch:
    origins: torch.Tensor
    dirs: torch.Tensor
    rgb: torch.Tensor
    depth: torch.Tensor
    valid: torch.Tensor
    frame: np.ndarray  # source frame index per ray

    def __len__(self) -> int:
        return self.origins.shape[0]


class RayPool:
    """Every valid pixel of every frame, flattened for fast batch draws."""

    def __init__(self, frames: list[TrainingFrame], dtype=torch.float32):
        origins, dirs, rgb, depth, frame_ix = [], [], [], [], []
        for i, fr in enumerate(frames):
            p = fr.pano
            rows, cols = np.nonzero(p.valid)
            d = pixel_center_dirs(p.width, p.height)[rows, cols]
            origins.append(np.broadcast_to(fr.pose.array, d.shape))
            dirs.append(d)
            rgb.append(p.rgb[rows, cols])
            depth.append(p.depth[rows, cols])
            frame_ix.append(np.full(rows.size, i))
        self.size = int(sum(a.shape[0] for a in dirs))
        if self.size == 0:
            raise DomainError("training frames contain no valid pixels")
        self.origins = torch.as_tensor(np.concatenate(origins), dtype=dtype)
        self.dirs = torch.as_tensor(np.concatenate(dirs), dtype=dtype)
        self.rgb = torch.as_tensor(np.concatenate(rgb), dtype=dtype)
        self.depth = torch.as_tensor(np.concatenate(depth), dtype=dtype)
        self.frame = np.concatenate(frame_ix)

    def take(self, idx: np.ndarray) -> RayBatch:
        ti = torch.as_tensor(idx)
        return RayBatch(self.origins[ti], self.dirs[ti], self.rgb[ti], self.depth[ti],
                        torch.ones(len(idx), dtype=torch.bool), self.frame[idx])


def sample_ray_batch(frames, n: int, seed, replace: bool = True) -> RayBatch:
    """``n`` rays drawn uniformly over all valid pixels of all frames."""
    pool = frames if isinstance(frames, RayPool) else RayPool(frames)
    rng = np.random.default_rng(seed)
    if replace:
        idx = rng.integers(0, pool.size, size=n)
    else:
        if n > pool.size:
            raise DomainError(f"cannot draw {n} rays without replacement from {pool.size}")
        idx = rng.permutation(pool.size)[:n]
    return pool.take(idx)


def downsample(rgb: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.as_tensor(np.asarray(rgb, dtype=np.float64)).permute(2, 0, 1)[None]
    return F.adaptive_avg_pool2d(t, (height, width))[0].permute(1, 2, 0).numpy()


@dataclass
class SemanticView:
    """Inputs for one semantic step: rays of an unseen low-res view and the anchor."""

    origins: torch.Tensor
    dirs: torch.Tensor
    height: int
    width: int
    anchor: torch.Tensor


def loss_terms(field, batch: RayBatch, sampling: SamplingConfig, weights: LossWeights, it: int,
               semantic: SemanticView | None = None, encoder: ToyEncoder | None = None,
               seed=None, fine_samples=None, sem_sampling: SamplingConfig | None = None):
    """Every loss component for one step, plus the weighted total.

    Components are float64 scalars so the logged total is exactly the
    weighted sum of the logged parts. ``sc`` holds the weighted semantic
    term and ``sc_cos`` the raw similarity when a semantic view is given.
    """
    coarse, fine = render_rays(field, batch.origins, batch.dirs, sampling, seed=seed,
                               fine_samples=fine_samples)
    outs = [coarse] + ([fine] if fine is not None else [])
    col = sum(color_loss(o.color, batch.rgb, batch.valid).double() for o in outs)
    geo = sum(geo_loss(o.depth, o.depth_var, batch.depth, batch.valid).double() for o in outs)
    terms = {"color": col, "geo": geo, "sc": None, "sc_cos": None, "coarse": coarse, "fine": fine}
    if semantic is not None:
        sem_cfg = sem_sampling or replace(sampling, n_fine=0)
        c_sem, _ = render_rays(field, semantic.origins, semantic.dirs, sem_cfg, seed=seed)
        image = c_sem.color.reshape(semantic.height, semantic.width, 3)
        e1 = encoder.embed(image.double())
        sc = semantic_loss(e1, semantic.anchor.to(e1.dtype), weights.lambda_sc)
        terms["sc"] = sc
        terms["sc_cos"] = (e1 * semantic.anchor.to(e1.dtype)).sum()
    terms["total"] = total_loss(col, geo, terms["sc"], weights, it)
    return terms


class Trainer:
    """Stateful training run; ``run()`` drives :meth:`step` to ``cfg.iters``."""

    def __init__(self, pano: Panorama, cfg: TrainConfig, run_dir=None,
                 source: CameraPose | None = None, anchor=None):
        pano.check()
        self.cfg = cfg
        self.source = source or CameraPose()
        self.pano = pano
        self.run_dir = run_dir
        self.far = cfg.far if cfg.far > 0 else 1.1 * float(pano.depth[pano.valid].max())
        self.sampling = cfg.sampling(self.far)
        self.sem_sampling = SamplingConfig(cfg.near, self.far, cfg.sc_n_coarse, 0, cfg.jitter)
        self.poses = sample_virtual_poses(cfg.n_poses, cfg.pose_radius, cfg.seed_poses, self.source)
        self.frames = generate_training_set(pano, self.poses, self.source)
        self.pool = RayPool(self.frames)
        self.field = RadianceField(cfg.field_config())
        self.field.info = {"near": cfg.near, "far": repr(self.far), "n_coarse": cfg.n_coarse,
                           "n_fine": cfg.n_fine}
        self.params = dict(self.field.named_parameters())
        self.opt = AdamState()
        self.iteration = 0
        self.encoder = ToyEncoder(cfg.seed_encoder)
        if anchor is None:
            anchor = self.encoder.embed(downsample(pano.rgb, cfg.sc_height, cfg.sc_width))
        self.anchor = torch.as_tensor(np.asarray(anchor, dtype=np.float64))
        self.sem_dirs = torch.as_tensor(
            pixel_center_dirs(cfg.sc_width, cfg.sc_height).reshape(-1, 3), dtype=torch.float32)
        self.semantic_renders = 0
        self.history: list[dict] = []
        self._t0 = time.perf_counter()
        self._elapsed_before = 0.0

    # -- state -----------------------------------------------------------
    def checkpoint(self, path) -> None:
        save_checkpoint(path, self.field, self.iteration, self.opt.to_arrays())

    def restore(self, path) -> None:
        model, it, extra = load_checkpoint(path)
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.params[name].copy_(p)
        self.opt = AdamState.from_arrays(extra)
        self.iteration = it

    # -- one iteration ---------------------------------------------------
    def semantic_view(self, it: int) -> SemanticView:
        rng = np.random.default_rng([self.cfg.seed_semantic, it])
        g = rng.standard_normal(3)
        g *= self.cfg.pose_radius * rng.random() ** (1 / 3) / np.linalg.norm(g)
        pos = torch.as_tensor(self.source.array + g, dtype=torch.float32)
        return SemanticView(pos.expand_as(self.sem_dirs), self.sem_dirs,
                            self.cfg.sc_height, self.cfg.sc_width, self.anchor)

    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration + 1
        lr = lr_at(it - 1, cfg)
        batch = sample_ray_batch(self.pool, cfg.batch_rays, [cfg.seed_rays, it])
        sem = None
        if cfg.loss_weights.semantic_due(it):
            sem = self.semantic_view(it)
            self.semantic_renders += 1
        terms = loss_terms(self.field, batch, self.sampling, cfg.loss_weights, it, sem,
                           self.encoder, seed=[cfg.seed_rays, it, 1],
                           sem_sampling=self.sem_sampling)
        total = terms["total"]
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at iteration {it}")
        grads = loss_backward(self.field, total)
        adam_step(self.params, grads, self.opt, lr)
        self.iteration = it
        rec = {
            "iter": it,
            "lr": lr,
            "color_loss": terms["color"].item(),
            "geo_loss": terms["geo"].item(),
            "sc_loss": terms["sc"].item() if terms["sc"] is not None else float("nan"),
            "total": total.item(),
            "elapsed_ms": 1000.0 * (time.perf_counter() - self._t0) + self._elapsed_before,
            "sc_cos": terms["sc_cos"].item() if terms["sc_cos"] is not None else float("nan"),
        }
        self.history.append(rec)
        return rec

    def run(self, iters: int | None = None, log_every: int = 100) -> list[dict]:
        end = self.cfg.iters if iters is None else min(self.cfg.iters, self.iteration + iters)
        writer = None
        if self.run_dir is not None:
            os.makedirs(self.run_dir, exist_ok=True)
            path = os.path.join(self.run_dir, "metrics.csv")
            fresh = not os.path.exists(path) or self.iteration == 0
            fh = open(path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(LOG_COLUMNS)
        try:
            while self.iteration < end:
                rec = self.step()
                if writer is not None:
                    writer.writerow([rec[c] for c in LOG_COLUMNS])
                if log_every and rec["iter"] % log_every == 0:
                    log.info("iter %d lr %.3g color %.5f geo %.4f total %.5f", rec["iter"],
                             rec["lr"], rec["color_loss"], rec["geo_loss"], rec["total"])
                if self.run_dir is not None and (
                        rec["iter"] % self.cfg.checkpoint_every == 0 or rec["iter"] == end):
                    self.checkpoint(os.path.join(self.run_dir, "checkpoint.bin"))
        finally:
            if writer is not None:
                fh.close()
        return self.history


def train(pano: Panorama, cfg: TrainConfig, run_dir=None, source: CameraPose | None = None):
    """Train a field on ``pano``; returns ``(field, metrics history)``."""
    trainer = Trainer(pano, cfg, run_dir=run_dir, source=source)
    trainer.run()
    return trainer.field, trainer.history
