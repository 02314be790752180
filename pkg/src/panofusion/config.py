"""Run configuration stored as a sectioned ``key = value`` file.

Sections: ``[run]`` for paths and input handling, ``[train]`` for every
:class:`~panofusion.training.TrainConfig` field. Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .training import TrainConfig

PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    rgb: str = "scene_rgb.png"
    depth: str = "scene_depth.pfm"
    depth_scale: float = 0.001
    run_dir: str = "run"
    profile: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def resolve_paths(self, base: str) -> None:
        for key in ("rgb", "depth", "run_dir"):
            p = getattr(self, key)
            if not os.path.isabs(p):
                setattr(self, key, os.path.normpath(os.path.join(base, p)))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys are case sensitive (L_pos)
        cp["run"] = {k: str(getattr(self, k)) for k in RUN_KEYS}
        cp["train"] = {k: _fmt(v) for k, v in self.train.as_dict().items()}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_ini())


RUN_KEYS = ("rgb", "depth", "depth_scale", "run_dir", "profile")
TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str, kind: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def base_train_config(profile: str) -> TrainConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    return TrainConfig.desk() if profile == "desk" else TrainConfig()


def build(run_values: dict[str, str] | None = None,
          train_values: dict[str, str] | None = None) -> RunConfig:
    """Assemble a RunConfig from raw strings layered over the profile defaults."""
    run_values = dict(run_values or {})
    train_values = dict(train_values or {})
    for k in run_values:
        if k not in RUN_KEYS:
            raise ConfigError(f"unknown [run] key {k!r}")
    for k in train_values:
        if k not in TRAIN_TYPES:
            raise ConfigError(f"unknown [train] key {k!r}")
    profile = run_values.get("profile", "desk").strip()
    base = base_train_config(profile)
    overrides = {k: _coerce(k, v, TRAIN_TYPES[k]) for k, v in train_values.items()}
    try:
        train = base.replace(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rc = RunConfig(train=train, profile=profile)
    for k, v in run_values.items():
        if k == "depth_scale":
            rc.depth_scale = _coerce(k, v, "float")
        elif k != "profile":
            setattr(rc, k, v.strip())
    return rc


def load(path, run_overrides=None, train_overrides=None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}".replace("\n", " ")) from None
    extra = set(cp.sections()) - {"run", "train"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    run_values = dict(cp["run"]) if cp.has_section("run") else {}
    train_values = dict(cp["train"]) if cp.has_section("train") else {}
    run_values.update(run_overrides or {})
    train_values.update(train_overrides or {})
    rc = build(run_values, train_values)
    rc.resolve_paths(os.path.dirname(os.path.abspath(path)))
    return rc
