import csv

import numpy as np
import pytest
import torch

from panofusion.field import NumericError
from panofusion.geometry import DomainError
from panofusion.reprojection import Panorama, TrainingFrame
from panofusion.geometry import CameraPose
from panofusion.scene import BoxScene, synth_box_scene
from panofusion.training import (
    LOG_COLUMNS, AdamState, RayPool, TrainConfig, Trainer, adam_step, lr_at, sample_ray_batch,
)


def tiny_cfg(**kw):
    base = dict(iters=20, batch_rays=64, n_coarse=8, n_fine=8, net_depth=2, net_width=16,
                net_skips="1", L_pos=4, L_dir=2, n_poses=3, sc_height=4, sc_width=8,
                sc_n_coarse=8, k_sc=5, checkpoint_every=10)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="module")
def tiny_pano():
    return synth_box_scene(BoxScene(), 16, 8)


def test_lr_schedule():
    cfg = TrainConfig(iters=200_000)
    assert lr_at(0, cfg) == 5e-4
    assert lr_at(200_000, cfg) == 5e-5
    assert abs(lr_at(100_000, cfg) - 1.5811e-4) < 1e-8
    lrs = [lr_at(i, cfg) for i in range(0, 200_001, 5000)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)}
    g = {"w": torch.tensor([0.5, -7.0, 1e-3], dtype=torch.float64)}
    before = p["w"].clone()
    adam_step(p, g, AdamState(), 1e-3)
    np.testing.assert_allclose((before - p["w"]).numpy(), 1e-3 * np.sign(g["w"].numpy()),
                               rtol=1e-4)


def test_adam_zero_gradient_is_noop():
    p = {"w": torch.tensor([1.0, -2.0])}
    before = p["w"].clone()
    adam_step(p, {"w": torch.zeros(2)}, AdamState(), 1e-3)
    assert torch.equal(p["w"], before)


def test_adam_rejects_bad_input():
    p = {"w": torch.zeros(2)}
    with pytest.raises(NumericError, match="w"):
        adam_step(p, {"w": torch.tensor([1.0, float("nan")])}, AdamState(), 1e-3)
    with pytest.raises(DomainError):
        adam_step(p, {"w": torch.zeros(2)}, AdamState(), 0.0)


def make_frames(sizes):
    frames = []
    for k, (h, w) in enumerate(sizes):
        rgb = np.full((h, w, 3), 0.1 * k)
        frames.append(TrainingFrame(CameraPose((k, 0, 0)), Panorama(rgb, np.ones((h, w)))))
    return frames


def test_ray_batch_without_replacement_is_exhaustive():
    pool = RayPool(make_frames([(2, 4), (2, 4)]))
    b = sample_ray_batch(pool, 16, seed=0, replace=False)
    keys = {(tuple(o.tolist()), tuple(d.tolist())) for o, d in zip(b.origins, b.dirs)}
    assert len(keys) == 16
    with pytest.raises(DomainError):
        sample_ray_batch(pool, 17, seed=0, replace=False)


def test_ray_batch_frame_frequencies():
    # frame 0 holds 3x as many valid pixels as frame 1
    pool = RayPool(make_frames([(4, 12), (4, 4)]))
    n = 100_000
    b = sample_ray_batch(pool, n, seed=1)
    counts = np.bincount(b.frame, minlength=2)
    expected = np.array([0.75, 0.25]) * n
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 10.83  # 1 dof, p = 0.001


def test_ray_batch_skips_invalid_pixels():
    rgb = np.zeros((2, 2, 3))
    depth = np.array([[1.0, 0.0], [0.0, 0.0]])
    pool = RayPool([TrainingFrame(CameraPose(), Panorama(rgb, depth))])
    assert pool.size == 1
    b = sample_ray_batch(pool, 10, seed=0)
    assert torch.all(b.depth == 1.0)


def test_zero_iterations_leave_parameters(tiny_pano, tmp_path):
    tr = Trainer(tiny_pano, tiny_cfg(iters=0), run_dir=tmp_path)
    before = {n: p.clone() for n, p in tr.field.named_parameters()}
    tr.run()
    for n, p in tr.field.named_parameters():
        assert torch.equal(p, before[n])


def test_zero_semantic_weight_skips_renders(tiny_pano):
    tr = Trainer(tiny_pano, tiny_cfg(iters=10, lambda_sc=0.0))
    tr.run()
    assert tr.semantic_renders == 0
    tr2 = Trainer(tiny_pano, tiny_cfg(iters=10))
    tr2.run()
    assert tr2.semantic_renders == 2


def test_logged_total_matches_parts(tiny_pano, tmp_path):
    cfg = tiny_cfg()
    Trainer(tiny_pano, cfg, run_dir=tmp_path).run()
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 20
    for r in rows:
        it = int(r["iter"])
        parts = float(r["color_loss"]) + cfg.lambda_geo * float(r["geo_loss"])
        if it % cfg.k_sc == 0:
            parts += float(r["sc_loss"])
        else:
            assert r["sc_loss"] == "nan"
        assert abs(parts - float(r["total"])) < 1e-9


def test_same_seed_same_parameters(tiny_pano):
    a = Trainer(tiny_pano, tiny_cfg())
    b = Trainer(tiny_pano, tiny_cfg())
    a.run()
    b.run()
    for (n, p), (_, q) in zip(a.field.named_parameters(), b.field.named_parameters()):
        assert torch.equal(p, q), n


def test_resume_matches_uninterrupted(tiny_pano, tmp_path):
    full = Trainer(tiny_pano, tiny_cfg())
    full.run()
    first = Trainer(tiny_pano, tiny_cfg(), run_dir=tmp_path)
    first.run(iters=10)
    resumed = Trainer(tiny_pano, tiny_cfg(), run_dir=tmp_path)
    resumed.restore(tmp_path / "checkpoint.bin")
    assert resumed.iteration == 10
    resumed.run()
    for (n, p), (_, q) in zip(full.field.named_parameters(), resumed.field.named_parameters()):
        assert torch.equal(p, q), n
    with open(tmp_path / "metrics.csv") as fh:
        assert [int(r["iter"]) for r in csv.DictReader(fh)] == list(range(1, 21))
