"""Independent oracles shared by unit and acceptance tests."""

from __future__ import annotations

import contextlib
import itertools
import types
from unittest import mock

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call, vmap

import panofusion.field as field_module
from panofusion.field import FieldConfig, EncodingConfig, RadianceField
from panofusion.geometry import CameraPose, pixel_center_dirs
from panofusion.losses import LossWeights, ToyEncoder
from panofusion.rendering import (
    IMPORTANCE_FLOOR, SamplingConfig, importance_samples, render_rays, stratified_samples,
)
from panofusion.training import RayBatch, SemanticView, loss_terms

# Denominator floor for relative gradient errors. Central differences in
# double precision carry ~eps*|L|/h = 1e-12 absolute roundoff, so gradient
# entries below this floor are compared in absolute terms.
REL_ERR_FLOOR = 1e-6


def central_differences(fn, params: dict[str, torch.Tensor], h: float = 1e-4,
                        chunk: int = 256) -> dict[str, torch.Tensor]:
    """d fn / d params by central differences, one coordinate at a time.

    ``fn`` maps a parameter dict to a 1-D tensor of outputs; the result holds,
    per parameter, an array of shape ``(*param.shape, n_outputs)``.
    Perturbations are evaluated in vmapped chunks; autograd is not used.
    """
    names = list(params)
    shapes = [params[n].shape for n in names]
    sizes = [params[n].numel() for n in names]
    flat = torch.cat([params[n].detach().reshape(-1) for n in names])

    def unflat(v):
        out, off = {}, 0
        for n, shp, sz in zip(names, shapes, sizes):
            out[n] = v[off:off + sz].reshape(shp)
            off += sz
        return out

    batched = vmap(lambda v: fn(unflat(v)))
    P = flat.numel()
    cols = []
    with torch.no_grad():
        for s in range(0, P, chunk):
            idx = torch.arange(s, min(s + chunk, P))
            k = idx.numel()
            plus = flat.expand(k, P).clone()
            minus = flat.expand(k, P).clone()
            plus[torch.arange(k), idx] += h
            minus[torch.arange(k), idx] -= h
            step = (plus[torch.arange(k), idx] - minus[torch.arange(k), idx])[:, None]
            cols.append((batched(plus) - batched(minus)) / step)
    g = torch.cat(cols)
    out, off = {}, 0
    for n, shp, sz in zip(names, shapes, sizes):
        out[n] = g[off:off + sz].reshape(*shp, -1)
        off += sz
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = REL_ERR_FLOOR) -> float:
    worst = 0.0
    for n, a in analytic.items():
        f = numeric[n]
        a = a.detach().double()
        denom = torch.maximum(torch.maximum(a.abs(), f.abs()), torch.tensor(floor))
        worst = max(worst, float(((a - f).abs() / denom).max()))
    return worst


class GradientProblem:
    """A small fixed-sample training step in double precision.

    Sample positions (coarse midpoints and the importance-sampled fine set)
    are frozen up front, so the loss is a smooth function of the parameters
    that both autograd and finite differences see identically.
    """

    def __init__(self, depth=4, width=64, skips=(2,), n_rays=3, n_coarse=4, n_fine=4,
                 sem_hw=(1, 4), L_pos=4, L_dir=2, seed=0, weights=None):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        cfg = FieldConfig(depth, width, skips, EncodingConfig(L_pos, L_dir, True), seed)
        self.field = RadianceField(cfg).double()
        self.field.check_finite = False
        self.sampling = SamplingConfig(0.5, 3.0, n_coarse, n_fine, jitter=False)
        self.weights = weights or LossWeights(lambda_geo=0.1, lambda_sc=0.1, k_sc=1)
        d = rng.standard_normal((n_rays, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        self.batch = RayBatch(
            origins=torch.as_tensor(rng.uniform(-0.1, 0.1, (n_rays, 3))),
            dirs=torch.as_tensor(d),
            rgb=torch.as_tensor(rng.uniform(0.1, 0.9, (n_rays, 3))),
            depth=torch.as_tensor(rng.uniform(1.0, 2.5, n_rays)),
            valid=torch.ones(n_rays, dtype=torch.bool),
            frame=np.zeros(n_rays, int),
        )
        with torch.no_grad():
            cs = stratified_samples(0.5, 3.0, n_coarse, False, None, n_rays, torch.float64)
            coarse, _ = render_rays(self.field, self.batch.origins, self.batch.dirs,
                                    SamplingConfig(0.5, 3.0, n_coarse, 0, jitter=False))
            self.fine_samples = importance_samples(cs, coarse.weights, n_fine, 0.5, 3.0)
        h, w = sem_hw
        dirs = torch.as_tensor(pixel_center_dirs(w, h).reshape(-1, 3))
        origin = torch.as_tensor(CameraPose((0.05, -0.02, 0.03)).array)
        self.encoder = ToyEncoder(seed=3)
        anchor = self.encoder.embed(rng.uniform(0, 1, (h, w, 3)))
        self.semantic = SemanticView(origin.expand_as(dirs), dirs, h, w,
                                     torch.as_tensor(anchor))
        self.sem_sampling = SamplingConfig(0.5, 3.0, n_coarse, 0, jitter=False)

    def terms(self, field_fn):
        t = loss_terms(field_fn, self.batch, self.sampling, self.weights, it=self.weights.k_sc,
                       semantic=self.semantic, encoder=self.encoder,
                       fine_samples=self.fine_samples, sem_sampling=self.sem_sampling)
        return torch.stack([t["color"], t["geo"], t["sc"], t["total"]])

    def params(self):
        return dict(self.field.named_parameters())

    def analytic(self) -> list[dict[str, torch.Tensor]]:
        out = []
        for k in range(4):
            self.field.zero_grad(set_to_none=True)
            self.terms(self.field)[k].backward()
            out.append({n: (p.grad if p.grad is not None else torch.zeros_like(p)).clone()
                        for n, p in self.field.named_parameters()})
        return out

    def numeric(self, h=1e-4, chunk=256, freeze_kinks=True) -> list[dict[str, torch.Tensor]]:
        """Central differences of :meth:`terms`.

        With ``freeze_kinks`` the ReLU on/off pattern recorded at the current
        parameters is replayed for every perturbed evaluation. The frozen
        function equals the loss at the current point and shares its
        derivative wherever the loss is differentiable, but a +-h step can no
        longer straddle a kink and turn the difference quotient into a
        secant across two linear pieces.
        """
        def fn(params):
            return self.terms(lambda x, d, b: functional_call(self.field, params, (x, d, b)))
        base = {n: p.detach() for n, p in self.params().items()}
        if freeze_kinks:
            with torch.no_grad(), relu_masks() as masks:
                fn(base)
            ctx = relu_masks(masks)
        else:
            ctx = contextlib.nullcontext()
        with ctx:
            g = central_differences(fn, base, h, chunk)
        return [{n: v[..., k] for n, v in g.items()} for k in range(4)]


@contextlib.contextmanager
def relu_masks(replay: list[torch.Tensor] | None = None):
    """Record (``replay=None``) or replay the ReLU masks of the field module.

    Yields the list of recorded masks, in call order.
    """
    recorded: list[torch.Tensor] = []
    # every evaluation of the loss issues the same sequence of ReLU calls
    calls = itertools.cycle(replay) if replay is not None else None

    def relu(x):
        if calls is None:
            mask = (x > 0).to(x.dtype)
            recorded.append(mask)
        else:
            mask = next(calls)
        return x * mask

    proxy = types.SimpleNamespace(**{k: getattr(F, k) for k in dir(F) if not k.startswith("_")})
    proxy.relu = relu
    with mock.patch.object(field_module, "F", proxy):
        yield recorded


def box_depth_window(scene, position, w, h, rows, cols, half_width=1.0, n=17):
    """Min/max analytic depth over directions within `half_width` pixels of each center."""
    off = np.linspace(-half_width, half_width, n)
    ox, oy = np.meshgrid(off, off)
    xs = cols[:, None] + 0.5 + ox.ravel()[None]
    ys = np.clip(rows[:, None] + 0.5 + oy.ravel()[None], 0, h)
    theta, phi = np.pi * ys / h, 2 * np.pi * xs / w
    d = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
    depth = scene.depth_from(np.asarray(position), d)
    return depth.min(axis=1), depth.max(axis=1)


def inverse_cdf_oracle(edges, weights, n):
    """Plain-Python inverse CDF of the floored piecewise-constant density.

    Quantiles u_i = (i + 0.5) / n are swept in order alongside the bins.
    """
    w = [float(x) + IMPORTANCE_FLOOR for x in weights]
    total = sum(w)
    p = [x / total for x in w]
    out = []
    k, acc = 0, 0.0
    for i in range(n):
        u = (i + 0.5) / n
        while k < len(p) - 1 and u > acc + p[k]:
            acc += p[k]
            k += 1
        frac = min(max((u - acc) / p[k], 0.0), 1.0)
        out.append(edges[k] + frac * (edges[k + 1] - edges[k]))
    return out


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
