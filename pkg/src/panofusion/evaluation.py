"""PSNR / SSIM and the view-by-view evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .reprojection import Panorama, TrainingFrame
from .rendering import SamplingConfig, render_panorama

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_COLUMNS = ("view", "x", "y", "z", "psnr", "ssim", "depth_mae", "valid_fraction", "lpips")
SSIM_FILL_RULE = "invalid reference pixels replaced by rendered values"


def mse(a, b, mask=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, dtype=bool)]
    return float(sq.mean())


def psnr(a, b, mask=None) -> float | None:
    """PSNR in dB for images in [0, 1]; ``None`` flags identical images."""
    err = mse(a, b, mask)
    if err == 0.0:
        return None
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), data range 1, channel-averaged.

    Only windows lying fully inside the image contribute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class ViewMetrics:
    view: str
    position: tuple[float, float, float]
    psnr: float | None
    ssim: float
    depth_mae: float
    valid_fraction: float
    lpips: float | None = None

    def row(self) -> list:
        return [self.view, *(f"{v:.6f}" for v in self.position),
                "identical" if self.psnr is None else f"{self.psnr:.4f}",
                f"{self.ssim:.6f}", f"{self.depth_mae:.6f}", f"{self.valid_fraction:.4f}",
                "" if self.lpips is None else f"{self.lpips:.6f}"]


@dataclass
class MetricReport:
    views: list[ViewMetrics] = field(default_factory=list)
    ssim_fill_rule: str = SSIM_FILL_RULE

    @property
    def psnr(self) -> float | None:
        vals = [v.psnr for v in self.views if v.psnr is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.views]))

    @property
    def depth_mae(self) -> float:
        return float(np.mean([v.depth_mae for v in self.views]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for v in self.views:
                w.writerow(v.row())

    def table(self) -> str:
        head = f"{'view':<10}{'psnr':>10}{'ssim':>9}{'depth_mae':>11}{'valid':>8}"
        lines = [head, "-" * len(head)]
        for v in self.views:
            p = "identical" if v.psnr is None else f"{v.psnr:.2f}"
            lines.append(f"{v.view:<10}{p:>10}{v.ssim:>9.4f}{v.depth_mae:>11.4f}"
                         f"{v.valid_fraction:>8.2f}")
        mp = self.psnr
        lines.append("-" * len(head))
        lines.append(f"{'mean':<10}{'identical' if mp is None else f'{mp:.2f}':>10}"
                     f"{self.ssim:>9.4f}{self.depth_mae:>11.4f}")
        lines.append(f"(ssim: {self.ssim_fill_rule})")
        return "\n".join(lines)


def compare(rendered: Panorama, reference: Panorama, name: str, pose: CameraPose) -> ViewMetrics:
    """Metrics for one view. PSNR and depth error use reference-valid pixels only."""
    valid = reference.valid
    if not valid.any():
        raise ValueError(f"view {name} has no valid reference pixels")
    p = psnr(rendered.rgb, reference.rgb, valid)
    dense = np.where(valid[..., None], reference.rgb, rendered.rgb)
    s = ssim(rendered.rgb, dense)
    mae = float(np.abs(rendered.depth - reference.depth)[valid].mean())
    return ViewMetrics(name, pose.position, p, s, mae, float(valid.mean()))


def evaluate(field, references, sampling: SamplingConfig, names=None) -> tuple[MetricReport, list]:
    """Render every reference pose and score it.

    ``references`` holds :class:`TrainingFrame` items (pose + possibly partial
    panorama). Returns the report and the rendered panoramas.
    """
    if not references:
        raise ValueError("need at least one reference view")
    sampling = SamplingConfig(sampling.near, sampling.far, sampling.n_coarse, sampling.n_fine,
                              jitter=False, chunk=sampling.chunk)
    report = MetricReport()
    renders = []
    for i, ref in enumerate(references):
        frame = ref if isinstance(ref, TrainingFrame) else TrainingFrame(CameraPose(), ref)
        out = render_panorama(field, frame.pose, frame.pano.width, frame.pano.height, sampling)
        name = names[i] if names else f"view{i:03d}"
        report.views.append(compare(out, frame.pano, name, frame.pose))
        renders.append(out)
    return report, renders
