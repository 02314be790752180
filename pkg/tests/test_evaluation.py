import csv

import numpy as np
import pytest

from panofusion.evaluation import REPORT_COLUMNS, compare, evaluate, psnr, ssim
from panofusion.field import FieldConfig, RadianceField
from panofusion.geometry import CameraPose
from panofusion.reprojection import Panorama, TrainingFrame
from panofusion.rendering import SamplingConfig


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) is None
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3)))


def test_psnr_mask():
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[0, 0] = 1.0
    b[1, 1] = 0.1
    mask = np.array([[False, True], [True, True]])
    assert psnr(a, b, mask) == pytest.approx(10 * np.log10(3 / 0.01), abs=1e-9)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    img = rng.random((32, 64, 3))
    noise = rng.standard_normal(img.shape)
    vals = [psnr(img, img + s * noise) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_examples():
    rng = np.random.default_rng(1)
    a = rng.random((16, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01 ** 2
    const = ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert abs(const - c1 / (1 + c1)) < 1e-9
    assert abs(const - 9.999e-5) < 1e-9
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    a = rng.random((20, 30, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    assert 0 < ssim(a, b) <= 1


def test_ssim_windows_against_direct_loop():
    rng = np.random.default_rng(3)
    a, b = rng.random((13, 14)), rng.random((13, 14))
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 1e-4, 9e-4
    vals = []
    for i in range(3):
        for j in range(4):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) /
                        ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_compare_uses_valid_pixels_only():
    rgb = np.full((12, 24, 3), 0.5)
    depth = np.ones((12, 24))
    depth[:, :4] = 0
    ref = Panorama(rgb, depth)
    out_rgb = rgb.copy()
    out_rgb[:, :4] = 0.0
    rendered = Panorama(out_rgb, np.ones((12, 24)))
    m = compare(rendered, ref, "v", CameraPose())
    assert m.psnr is None and m.ssim == pytest.approx(1.0)
    assert m.depth_mae == 0 and m.valid_fraction == pytest.approx(20 / 24)


def test_evaluate_rows_and_determinism(tmp_path):
    f = RadianceField(FieldConfig(depth=2, width=16, skips=(1,)))
    rng = np.random.default_rng(0)
    frames = [TrainingFrame(CameraPose((0.1 * i, 0, 0)),
                            Panorama(rng.random((12, 24, 3)), rng.uniform(0.5, 2, (12, 24))))
              for i in range(3)]
    cfg = SamplingConfig(0.1, 3.0, 8, 8, jitter=True)
    r1, renders = evaluate(f, frames, cfg)
    r2, _ = evaluate(f, frames, cfg)
    assert len(r1.views) == 3 and len(renders) == 3
    assert [v.row() for v in r1.views] == [v.row() for v in r2.views]
    r1.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 4
    assert "mean" in r1.table()
    with pytest.raises(ValueError):
        evaluate(f, [], cfg)
