"""Radiance field: Fourier positional encoding feeding a coarse and a fine MLP.

Both branches share one architecture but hold independent parameters.
Gradients come from torch autograd; :func:`loss_backward` wraps it with the
finiteness checks the training loop relies on.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NumericError(ArithmeticError):
    pass


@dataclass
class EncodingConfig:
    L_pos: int = 10
    L_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise ValueError("frequency counts must be >= 0")


@dataclass
class FieldConfig:
    depth: int = 8
    width: int = 256
    skips: tuple[int, ...] = (4,)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = EncodingConfig(**self.encoding)
        self.skips = tuple(int(s) for s in self.skips)
        if self.depth < 1 or self.width < 2:
            raise ValueError("depth must be >= 1 and width >= 2")
        if any(s <= 0 or s >= self.depth for s in self.skips):
            raise ValueError(f"skip indices must lie in [1, {self.depth - 1}]")

    @classmethod
    def desk(cls, seed: int = 0) -> "FieldConfig":
        """Small 4 x 64 network for CPU-scale experiments."""
        return cls(depth=4, width=64, skips=(2,), seed=seed)

    @property
    def pos_features(self) -> int:
        e = self.encoding
        return 3 * (2 * e.L_pos + int(e.include_input))

    @property
    def dir_features(self) -> int:
        e = self.encoding
        return 3 * (2 * e.L_dir + int(e.include_input))


def positional_encode(v, L: int, include_input: bool = True):
    """Concatenate ``v`` (optional) with ``sin(2^l v), cos(2^l v)`` for l < L.

    Works on numpy arrays and torch tensors; features go on the last axis,
    ordered ``[v, sin(2^0 v), cos(2^0 v), sin(2^1 v), ...]``.
    """
    if isinstance(v, torch.Tensor):
        parts = [v] if include_input else []
        for l in range(L):
            s = v * float(2.0 ** l)
            parts += [torch.sin(s), torch.cos(s)]
        if not parts:
            return v[..., :0]
        return torch.cat(parts, dim=-1)
    v = np.asarray(v, dtype=np.float64)
    parts = [v] if include_input else []
    for l in range(L):
        s = v * 2.0 ** l
        parts += [np.sin(s), np.cos(s)]
    if not parts:
        return v[..., :0]
    return np.concatenate(parts, axis=-1)


class NerfMLP(nn.Module):
    """One branch: trunk with input skip, density head, view-dependent color head."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.skips = cfg.skips
        n_pos, n_dir, w = cfg.pos_features, cfg.dir_features, cfg.width
        layers = []
        for i in range(cfg.depth):
            n_in = n_pos if i == 0 else w
            if i in cfg.skips:
                n_in += n_pos
            layers.append(nn.Linear(n_in, w))
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(w, 1)
        self.feature = nn.Linear(w, w)
        self.view = nn.Linear(w + n_dir, w // 2)
        self.rgb_head = nn.Linear(w // 2, 3)

    def forward(self, pos_enc, dir_enc, check_finite: bool = False):
        sigma, rgb = self._run(pos_enc, dir_enc)
        if check_finite and not (torch.isfinite(sigma).all() and torch.isfinite(rgb).all()):
            with torch.no_grad():
                self._run(pos_enc, dir_enc, locate=True)
            raise NumericError(f"non-finite output after head layer {len(self.trunk)}")
        return sigma, rgb

    def _run(self, pos_enc, dir_enc, locate: bool = False):
        h = pos_enc
        for i, layer in enumerate(self.trunk):
            if i in self.skips:
                h = torch.cat([pos_enc, h], dim=-1)
            h = F.relu(layer(h))
            if locate and not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation after trunk layer {i}")
        sigma = F.softplus(self.sigma_head(h))[..., 0]
        h = self.view(torch.cat([self.feature(h), dir_enc], dim=-1))
        rgb = torch.sigmoid(self.rgb_head(F.relu(h)))
        return sigma, rgb


class RadianceField(nn.Module):
    """Coarse and fine branches plus the shared encoding.

    Call as ``field(x, d, branch)`` with ``x`` and ``d`` of shape ``(..., 3)``;
    returns ``(sigma, rgb)`` with shapes ``(...)`` and ``(..., 3)``.
    """

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        self.coarse = NerfMLP(self.cfg)
        self.fine = NerfMLP(self.cfg)
        self.check_finite = True
        self.info: dict = {}
        self.reset_parameters(self.cfg.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from a fixed seed."""
        gen = torch.Generator().manual_seed(int(seed))
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                for p in (mod.weight, mod.bias):
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)

    def encode(self, x, d):
        e = self.cfg.encoding
        return (positional_encode(x, e.L_pos, e.include_input),
                positional_encode(d, e.L_dir, e.include_input))

    def forward(self, x, d, branch: str = "coarse"):
        net = self.coarse if branch == "coarse" else self.fine
        if branch not in ("coarse", "fine"):
            raise ValueError(f"unknown branch {branch!r}")
        pos_enc, dir_enc = self.encode(x, d)
        return net(pos_enc, dir_enc, check_finite=self.check_finite)


def field_eval(field: RadianceField, x, d, branch: str = "coarse"):
    """Evaluate one point or a batch; numpy in, numpy out."""
    dtype = next(field.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)
    dt = torch.as_tensor(np.asarray(d, dtype=np.float64), dtype=dtype)
    with torch.no_grad():
        sigma, rgb = field(xt, dt, branch)
    return sigma.numpy(), rgb.numpy()


def loss_backward(field: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return a gradient for every parameter.

    Parameters the loss does not touch get explicit zeros.
    """
    field.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in field.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {name}")
        grads[name] = g
    return grads


# -- checkpoints --------------------------------------------------------------
#
# Layout (all little-endian):
#   magic      8 bytes  b"PFNRFCK\0"
#   version    u32      (1)
#   iteration  u32
#   meta_len   u32, then meta_len bytes of UTF-8 "key=value" lines holding the
#              architecture (depth, width, skips, L_pos, L_dir, include_input, seed)
#              followed by free-form "info.<key>=value" lines (sampling bounds etc.)
#   n_arrays   u32
#   per array: name_len u32, name bytes, ndim u32, ndim x u32 shape,
#              then prod(shape) float32 values in C order
# Arrays appear in model.named_parameters() order, followed by optimizer
# moments ("adam.m.<name>", "adam.v.<name>") and "adam.step" when present.

CHECKPOINT_MAGIC = b"PFNRFCK\0"
CHECKPOINT_VERSION = 1


def _arch_meta(cfg: FieldConfig, info: dict | None = None) -> bytes:
    e = cfg.encoding
    items = {
        "depth": cfg.depth, "width": cfg.width,
        "skips": ",".join(str(s) for s in cfg.skips),
        "L_pos": e.L_pos, "L_dir": e.L_dir, "include_input": int(e.include_input),
        "seed": cfg.seed,
    }
    items.update({f"info.{k}": v for k, v in (info or {}).items()})
    return "".join(f"{k}={v}\n" for k, v in items.items()).encode()


def _parse_meta(blob: bytes) -> tuple[FieldConfig, dict[str, str]]:
    kv = dict(line.split("=", 1) for line in blob.decode().splitlines() if line)
    info = {k[5:]: v for k, v in kv.items() if k.startswith("info.")}
    skips = tuple(int(s) for s in kv["skips"].split(",") if s)
    enc = EncodingConfig(int(kv["L_pos"]), int(kv["L_dir"]), bool(int(kv["include_input"])))
    return FieldConfig(int(kv["depth"]), int(kv["width"]), skips, enc, int(kv["seed"])), info


def save_checkpoint(path, field: RadianceField, iteration: int = 0,
                    extra: dict[str, np.ndarray] | None = None, info: dict | None = None) -> None:
    arrays = [(n, p.detach().cpu().numpy()) for n, p in field.named_parameters()]
    arrays += list((extra or {}).items())
    if info is None:
        info = getattr(field, "info", None)
    meta = _arch_meta(field.cfg, info)
    out = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, iteration, len(meta)), meta,
           struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_checkpoint(path) -> tuple[FieldConfig, int, dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, iteration, meta_len = struct.unpack_from("<III", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    cfg, info = _parse_meta(buf[off:off + meta_len])
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        off += 4 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    return cfg, iteration, arrays, info


def load_checkpoint(path) -> tuple[RadianceField, int, dict[str, np.ndarray]]:
    """Rebuild the field; returns ``(field, iteration, leftover arrays)``.

    The checkpoint's info entries end up in ``field.info``.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    cfg, iteration, arrays, info = read_checkpoint(path)
    model = RadianceField(cfg)
    model.info = info
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise ValueError(f"{path}: missing parameter {name}")
            p.copy_(torch.from_numpy(arrays.pop(name)))
    return model, iteration, arrays


def config_dict(cfg: FieldConfig) -> dict:
    return asdict(cfg)
