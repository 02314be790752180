import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panofusion.geometry import (
    Angles, CameraPose, DomainError, angles_to_dir, dir_to_pixel, panorama_ray_grid,
    pixel_to_angles,
)


def test_pixel_to_angles_center():
    a = pixel_to_angles(512, 256, 1024, 512)
    assert a.theta == pytest.approx(math.pi / 2, abs=1e-15)
    assert a.phi == pytest.approx(math.pi, abs=1e-15)


def test_pixel_to_angles_origin_and_quarter():
    a = pixel_to_angles(0, 0, 1024, 512)
    assert (a.theta, a.phi) == (0.0, 0.0)
    b = pixel_to_angles(256, 128, 1024, 512)
    assert b.theta == pytest.approx(math.pi / 4, abs=1e-15)
    assert b.phi == pytest.approx(math.pi / 2, abs=1e-15)


@pytest.mark.parametrize("x,y", [(-0.1, 0), (1024, 0), (0, 512), (0, -1)])
def test_pixel_to_angles_rejects_out_of_range(x, y):
    with pytest.raises(DomainError):
        pixel_to_angles(x, y, 1024, 512)


@pytest.mark.parametrize("theta,phi,expected", [
    (0.0, 0.0, (0, 0, 1)),
    (math.pi / 2, 0.0, (1, 0, 0)),
    (math.pi / 2, math.pi / 2, (0, 1, 0)),
])
def test_angles_to_dir(theta, phi, expected):
    np.testing.assert_allclose(angles_to_dir(Angles(theta, phi)), expected, atol=1e-15)


def test_dir_to_pixel_examples():
    assert dir_to_pixel((0, 0, 1), 1024, 512) == (0.0, 0.0)
    x, y = dir_to_pixel((-1, 0, 0), 1024, 512)
    assert x == pytest.approx(512, abs=1e-9) and y == pytest.approx(256, abs=1e-9)


def test_round_trip_example():
    a = pixel_to_angles(137.5, 300.25, 1024, 512)
    x, y = dir_to_pixel(angles_to_dir(a), 1024, 512)
    assert x == pytest.approx(137.5, abs=1e-9)
    assert y == pytest.approx(300.25, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1023.999), st.floats(0.5, 511.5))
def test_round_trip_property(x, y):
    xr, yr = dir_to_pixel(angles_to_dir(pixel_to_angles(x, y, 1024, 512)), 1024, 512)
    dx = min(abs(xr - x), 1024 - abs(xr - x))  # phi wraps
    assert dx < 1e-6 and abs(yr - y) < 1e-6


def test_unit_norm_many_angles():
    rng = np.random.default_rng(0)
    theta = rng.uniform(0, np.pi, 100_000)
    phi = rng.uniform(0, 2 * np.pi, 100_000)
    n = np.linalg.norm(angles_to_dir(theta, phi), axis=-1)
    assert np.max(np.abs(n - 1)) < 1e-12


def test_pixel_to_angles_monotone():
    ys = np.linspace(0, 511.9, 200)
    xs = np.linspace(0, 1023.9, 200)
    theta, _ = pixel_to_angles(np.zeros_like(ys), ys, 1024, 512)
    _, phi = pixel_to_angles(xs, np.zeros_like(xs), 1024, 512)
    assert np.all(np.diff(theta) > 0) and np.all(np.diff(phi) > 0)


def test_ray_grid_small():
    g = panorama_ray_grid(CameraPose(), 4, 2)
    o, d = g.flat()
    assert o.shape == (8, 3) and np.all(o == 0)
    assert np.max(np.abs(np.linalg.norm(d, axis=1) - 1)) < 1e-9


def test_ray_grid_center_row_near_equator():
    g = panorama_ray_grid(CameraPose((1.0, 2.0, 3.0)), 1024, 512)
    theta = np.arccos(g.dirs[256, 512, 2])
    assert abs(theta - np.pi / 2) <= 0.5 * np.pi / 512 + 1e-12
    assert np.all(g.origins == (1.0, 2.0, 3.0))


def test_pose_rejects_non_finite():
    with pytest.raises(DomainError):
        CameraPose((0.0, float("nan"), 0.0))
