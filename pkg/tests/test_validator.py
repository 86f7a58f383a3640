"""Second-order approximation checks on analytic height fields."""

import math

import numpy as np
import pytest

from pueva.engine import ContractError
from pueva.validator import (
    SURFACES,
    attention_weights,
    combination_error,
    paraboloid,
    plane,
    point_to_surface_error,
    sample_neighborhood,
    sinusoid,
    sphere_cap,
    taylor_sweep,
)


class TestSampling:
    def test_on_paraboloid(self):
        pts = sample_neighborhood(paraboloid(), (0, 0), 0.3, 50, 0).points
        np.testing.assert_array_equal(pts[:, 2], pts[:, 0] ** 2 + pts[:, 1] ** 2)

    def test_within_radius(self):
        pts = sample_neighborhood(sinusoid(), (0.2, -0.1), 1e-4, 50, 1).points
        assert np.hypot(pts[:, 0] - 0.2, pts[:, 1] + 0.1).max() <= 1e-4

    def test_sphere_cap_radius(self):
        pts = sample_neighborhood(sphere_cap(), (0.3, 0.2), 0.2, 50, 2).points
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("h, K", [(0.0, 5), (0.1, 2)])
    def test_bad_arguments(self, h, K):
        with pytest.raises(ValueError):
            sample_neighborhood(plane(), (0, 0), h, K)


class TestCombinationError:
    def test_plane_is_exact(self, rng):
        nb = sample_neighborhood(plane(), (0.1, 0.2), 0.5, 12, 3)
        for _ in range(20):
            assert combination_error(plane(), nb, rng.dirichlet(np.ones(12))) < 1e-12

    def test_paraboloid_cross(self):
        h = 0.1
        nb = np.array([[h, 0, h * h], [-h, 0, h * h], [0, h, h * h], [0, -h, h * h]])
        assert combination_error(paraboloid(), nb, np.full(4, 0.25)) == pytest.approx(h * h, rel=1e-14)

    def test_one_hot(self):
        nb = sample_neighborhood(sinusoid(), (0.4, 0.1), 0.3, 6, 4)
        w = np.zeros(6)
        w[2] = 1
        assert combination_error(sinusoid(), nb, w) == 0.0

    def test_off_simplex(self):
        nb = sample_neighborhood(plane(), (0, 0), 0.1, 3, 0)
        with pytest.raises(ContractError):
            combination_error(plane(), nb, [0.5, 0.5, 0.1])
        with pytest.raises(ContractError):
            combination_error(plane(), nb, [1.2, -0.1, -0.1])

    def test_distance_variant_bounded_by_height_gap(self, rng):
        nb = sample_neighborhood(sphere_cap(), (0.2, 0.1), 0.2, 8, 5)
        w = rng.dirichlet(np.ones(8))
        height, dist = combination_error(sphere_cap(), nb, w), point_to_surface_error(sphere_cap(), nb, w)
        # the vertical gap is one path to the surface, so the shortest one is no longer
        assert 0 < dist <= height + 1e-15
        # for a sphere the exact distance is | |q| - 1 |
        q = w @ nb.points
        assert dist == pytest.approx(abs(np.linalg.norm(q) - 1), rel=1e-6)


class TestSweep:
    @pytest.mark.parametrize("name", ["paraboloid", "sphere_cap", "sinusoid"])
    def test_order_two(self, name):
        r = taylor_sweep(SURFACES[name](), trials=300, rng_seed=1)
        assert 1.7 <= r.loglog_slope <= 2.3
        assert np.all(np.diff(r.mean_abs_error) < 0)
        assert not r.zero_error

    def test_paraboloid_ratios(self):
        r = taylor_sweep(paraboloid(), trials=300, rng_seed=2)
        assert 1.8 <= r.loglog_slope <= 2.2
        assert np.all((3.4 <= r.halving_ratios()) & (r.halving_ratios() <= 4.6))

    def test_plane_flags_zero(self):
        r = taylor_sweep(plane(), trials=100)
        assert r.zero_error and math.isnan(r.loglog_slope)
        assert np.all(r.max_abs_error < 1e-12)

    def test_distance_error_agrees_up_to_constant(self):
        h = taylor_sweep(sphere_cap(), trials=150, rng_seed=3)
        d = taylor_sweep(sphere_cap(), trials=150, rng_seed=3, error="distance")
        assert 1.7 <= d.loglog_slope <= 2.3
        ratio = d.mean_abs_error / h.mean_abs_error
        assert np.all((0.3 < ratio) & (ratio <= 1.0))

    def test_attention_weights_keep_order_two(self):
        r = taylor_sweep(paraboloid(), trials=150, rng_seed=4, weight_fn=attention_weights(rng_seed=0))
        assert 1.7 <= r.loglog_slope <= 2.3

    @pytest.mark.parametrize("kwargs", [dict(radii=(0.2, 0.1)), dict(radii=(0.2, 0.15, 0.1)),
                                        dict(radii=(0.025, 0.05, 0.2)), dict(trials=50), dict(error="x")])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            taylor_sweep(paraboloid(), **kwargs)
