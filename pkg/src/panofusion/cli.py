"""Command-line entry point: ``panofusion {synth,reproject,train,render,eval}``.

Failures print exactly one line to stderr of the form
``error kind=<kind> message=<text>`` and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import config as cfgmod
from .evaluation import evaluate
from .field import load_checkpoint
from .geometry import CameraPose
from .io import load_panorama, save_panorama
from .reprojection import TrainingFrame, generate_training_set, sample_virtual_poses
from .rendering import SamplingConfig, render_panorama
from .scene import BoxScene, synth_box_scene
from .training import TrainConfig, Trainer

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _triple(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z but got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers in {text!r}") from None


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panofusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write an RGB-D panorama of an analytic box room")
    s.add_argument("--out", default="scene", help="output prefix")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--half-extents", type=_triple, default=BoxScene.half_extents)
    s.add_argument("--camera", type=_triple, default=BoxScene.camera)

    r = sub.add_parser("reproject", help="reproject an RGB-D panorama to virtual poses")
    r.add_argument("--rgb", required=True)
    r.add_argument("--depth", required=True)
    r.add_argument("--depth-scale", type=float, default=0.001)
    r.add_argument("--out", default="frames", help="output directory")
    r.add_argument("--offset", type=_triple, action="append",
                   help="explicit pose offset (repeatable); overrides random sampling")
    r.add_argument("--n-poses", type=int, default=8)
    r.add_argument("--radius", type=float, default=0.3)
    r.add_argument("--seed", type=int, default=1)

    t = sub.add_parser("train", help="train a field from a run configuration")
    t.add_argument("--config", help="key = value run configuration file")
    for key in cfgmod.RUN_KEYS:
        t.add_argument(_flag(key), dest=f"run__{key}")
    for f in fields(TrainConfig):
        t.add_argument(_flag(f.name), dest=f"train__{f.name}", metavar=str(f.type).upper())
    t.add_argument("--resume", action="store_true", help="continue from run_dir/checkpoint.bin")

    d = sub.add_parser("render", help="render a panorama from a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--pose", type=_triple, default=(0.0, 0.0, 0.0))
    d.add_argument("--width", type=int, default=64)
    d.add_argument("--height", type=int, default=32)
    d.add_argument("--out", default="render", help="output prefix")
    _sampling_flags(d)

    e = sub.add_parser("eval", help="score renders against reference views")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--rgb", help="reference panorama at the input pose")
    e.add_argument("--depth")
    e.add_argument("--depth-scale", type=float, default=0.001)
    e.add_argument("--frames", help="directory written by `reproject` (uses poses.csv)")
    e.add_argument("--out", default="eval", help="output directory")
    e.add_argument("--no-figures", action="store_true")
    _sampling_flags(e)
    return p


def _sampling_flags(p):
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--n-fine", type=int)
    p.add_argument("--chunk", type=int, default=4096)


def _sampling_from(args, info: dict) -> SamplingConfig:
    def pick(name, cast):
        v = getattr(args, name)
        if v is not None:
            return v
        if name not in info:
            raise CliError("config", f"checkpoint lacks {name}; pass {_flag(name)}")
        return cast(info[name])
    return SamplingConfig(pick("near", float), pick("far", float), pick("n_coarse", int),
                          pick("n_fine", int), jitter=False, chunk=args.chunk)


def cmd_synth(args) -> None:
    scene = BoxScene(half_extents=args.half_extents, camera=args.camera)
    pano = synth_box_scene(scene, args.width, args.height)
    paths = save_panorama(args.out, pano)
    print(f"wrote {paths['rgb']} {paths['depth']} {paths['mask']}")


def cmd_reproject(args) -> None:
    pano = load_panorama(args.rgb, args.depth, args.depth_scale)
    if args.offset:
        poses = [CameraPose(o) for o in args.offset]
    else:
        poses = sample_virtual_poses(args.n_poses, args.radius, args.seed)
    frames = generate_training_set(pano, poses, CameraPose())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "poses.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "x", "y", "z", "valid_fraction"])
        for i, fr in enumerate(frames):
            save_panorama(os.path.join(args.out, f"frame{i:03d}"), fr.pano)
            w.writerow([f"frame{i:03d}", *fr.pose.position, f"{fr.pano.valid.mean():.6f}"])
    print(f"wrote {len(frames)} frames to {args.out}")


def _collect(args, prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in vars(args).items()
            if k.startswith(prefix) and v is not None}


def cmd_train(args) -> None:
    run_over, train_over = _collect(args, "run__"), _collect(args, "train__")
    if args.config:
        if not os.path.isfile(args.config):
            raise CliError("config", f"config file not found: {args.config}")
        rc = cfgmod.load(args.config, run_over, train_over)
    else:
        rc = cfgmod.build(run_over, train_over)
        rc.resolve_paths(os.getcwd())
    pano = load_panorama(rc.rgb, rc.depth, rc.depth_scale)
    os.makedirs(rc.run_dir, exist_ok=True)
    rc.save(os.path.join(rc.run_dir, "config.ini"))
    trainer = Trainer(pano, rc.train, run_dir=rc.run_dir)
    ckpt = os.path.join(rc.run_dir, "checkpoint.bin")
    if args.resume:
        if not os.path.isfile(ckpt):
            raise CliError("checkpoint", f"no checkpoint to resume at {ckpt}")
        trainer.restore(ckpt)
    trainer.run()
    if trainer.iteration == 0:
        trainer.checkpoint(ckpt)
    from .plotting import loss_curves, read_metrics
    metrics = read_metrics(os.path.join(rc.run_dir, "metrics.csv"))
    if metrics:
        loss_curves(metrics, os.path.join(rc.run_dir, "loss_curves.png"))
    last = trainer.history[-1] if trainer.history else None
    summary = f"final color_loss={last['color_loss']:.6f} " if last else ""
    print(f"{summary}iterations={trainer.iteration} run_dir={rc.run_dir}")


def cmd_render(args) -> None:
    field, _, _ = _load(args.checkpoint)
    sampling = _sampling_from(args, field.info)
    pano = render_panorama(field, CameraPose(args.pose), args.width, args.height, sampling)
    paths = save_panorama(args.out, pano)
    print(f"wrote {paths['rgb']} {paths['depth']}")


def _load(path):
    if not os.path.isfile(path):
        raise CliError("checkpoint", f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError("checkpoint", f"unreadable checkpoint {path}: {exc}") from None


def _reference_frames(args) -> tuple[list[TrainingFrame], list[str]]:
    frames, names = [], []
    if args.rgb or args.depth:
        if not (args.rgb and args.depth):
            raise CliError("usage", "--rgb and --depth go together", EXIT_USAGE)
        frames.append(TrainingFrame(CameraPose(), load_panorama(args.rgb, args.depth,
                                                                 args.depth_scale)))
        names.append("input")
    if args.frames:
        index = os.path.join(args.frames, "poses.csv")
        if not os.path.isfile(index):
            raise CliError("input", f"missing {index}")
        with open(index, newline="") as f:
            for row in csv.DictReader(f):
                prefix = os.path.join(args.frames, row["frame"])
                pano = load_panorama(prefix + "_rgb.png", prefix + "_depth.pfm")
                frames.append(TrainingFrame(CameraPose((row["x"], row["y"], row["z"])), pano))
                names.append(row["frame"])
    if not frames:
        raise CliError("usage", "give --rgb/--depth and/or --frames", EXIT_USAGE)
    return frames, names


def cmd_eval(args) -> None:
    field, _, _ = _load(args.checkpoint)
    sampling = _sampling_from(args, field.info)
    frames, names = _reference_frames(args)
    report, renders = evaluate(field, frames, sampling, names)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "report.csv"))
    if not args.no_figures:
        from .plotting import metric_bars, view_comparison
        for name, fr, out in zip(names, frames, renders):
            view_comparison(out, fr.pano, os.path.join(args.out, f"{name}.png"), title=name)
        metric_bars(report, os.path.join(args.out, "metrics.png"))
    print(report.table())


COMMANDS = {
    "synth": cmd_synth,
    "reproject": cmd_reproject,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except cfgmod.ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc.filename or exc), EXIT_FAILURE)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    return 0


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error kind={kind} message={text}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
