"""Figures written next to the CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 120,
})


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def smooth(y: np.ndarray, window: int = 25) -> np.ndarray:
    if y.size < window:
        return y
    k = np.ones(window) / window
    return np.convolve(y, k, mode="valid")


def loss_curves(metrics: dict[str, np.ndarray], path) -> None:
    it = metrics["iter"]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
    for key, label in (("color_loss", "color"), ("geo_loss", "geometric")):
        y = metrics[key]
        ys = smooth(y)
        ax0.plot(it[len(it) - ys.size:], ys, label=label)
    ax0.set_yscale("log")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("loss (smoothed)")
    ax0.legend(frameon=False)
    ax1.plot(it, metrics["lr"], color="k")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("learning rate")
    ax1.set_yscale("log")
    sc = metrics.get("sc_loss")
    if sc is not None and np.isfinite(sc).any():
        ax2 = ax1.twinx()
        m = np.isfinite(sc)
        ax2.plot(it[m], sc[m], ".", ms=2, color="tab:red")
        ax2.set_ylabel("semantic term", color="tab:red")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def view_comparison(rendered, reference, path, title: str = "") -> None:
    """Reference / render / error for color and depth, one figure per view."""
    fig, axes = plt.subplots(2, 3, figsize=(10, 3.6))
    err = np.abs(rendered.rgb - reference.rgb).mean(-1)
    err[~reference.valid] = np.nan
    vmax = float(np.nanmax(reference.depth[reference.valid])) if reference.valid.any() else 1.0
    ref_depth = np.where(reference.valid, reference.depth, np.nan)
    derr = np.where(reference.valid, np.abs(rendered.depth - reference.depth), np.nan)
    panels = [
        (reference.rgb, "reference", {}),
        (np.clip(rendered.rgb, 0, 1), "rendered", {}),
        (err, "|color error|", {"cmap": "magma", "vmin": 0}),
        (ref_depth, "reference depth", {"cmap": "viridis", "vmin": 0, "vmax": vmax}),
        (rendered.depth, "rendered depth", {"cmap": "viridis", "vmin": 0, "vmax": vmax}),
        (derr, "|depth error| (m)", {"cmap": "magma", "vmin": 0}),
    ]
    for ax, (img, name, kw) in zip(axes.ravel(), panels):
        im = ax.imshow(img, interpolation="nearest", **kw)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        if img.ndim == 2:
            fig.colorbar(im, ax=ax, fraction=0.025)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def metric_bars(report, path) -> None:
    names = [v.view for v in report.views]
    psnr = [np.nan if v.psnr is None else v.psnr for v in report.views]
    ssim = [v.ssim for v in report.views]
    x = np.arange(len(names))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
    ax0.bar(x, psnr, color="tab:blue")
    ax0.set_ylabel("PSNR (dB)")
    ax1.bar(x, ssim, color="tab:green")
    ax1.set_ylabel("SSIM")
    ax1.set_ylim(0, 1)
    for ax in (ax0, ax1):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
