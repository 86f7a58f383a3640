"""Training losses and evaluation metrics."""

import math

import numpy as np
import pytest

from conftest import check_grads
from pueva.engine import ContractError, DiffArray, Tape
from pueva.geometry import normalize_to_unit_sphere, sample_mesh
from pueva.losses import (
    LossConfig,
    chamfer_loss,
    effective_seed_count,
    joint_loss,
    metric_cd,
    metric_hd,
    metric_p2f,
    metric_uniformity,
    uniform_loss,
    uniform_loss_multi,
)
from pueva.network import EvaParams
from pueva.shapes import make_shape


def _sq_dists(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def balanced_groups(m=5, jitter=0.01, seed=0):
    """Four tight groups of m points at tetrahedron corners: with p = 1/4 every ball holds n_hat = m points."""
    rng = np.random.default_rng(seed)
    corners = 0.9 * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
    pts = np.concatenate([c + jitter * rng.normal(size=(m, 3)) for c in corners])
    return pts, 0.25


def hexagon(p):
    """A centre point and its six hexagonal neighbours at exactly the expected spacing for |S| = 7."""
    d_hat = math.sqrt(2 * math.pi * p / (math.sqrt(3) * 7))
    t = np.arange(6) * math.pi / 3
    ring = np.stack([d_hat * np.cos(t), d_hat * np.sin(t), np.zeros(6)], 1)
    return np.concatenate([np.zeros((1, 3)), ring]), d_hat


def two_blobs(n, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    pts = np.concatenate([rng.normal(size=(half, 3)) * 0.05 + [0.5, 0, 0],
                          rng.normal(size=(n - half, 3)) * 0.05 - [0.5, 0, 0]])
    return normalize_to_unit_sphere(pts).points


class TestLossConfig:
    def test_defaults(self):
        c = LossConfig()
        assert (c.alpha, c.beta, c.gamma, c.delta, c.M) == (150, 10, 1, 100, 1000)
        assert c.p_list == (0.004, 0.006, 0.008, 0.010, 0.012)

    @pytest.mark.parametrize("kwargs", [dict(alpha=-1), dict(delta=0), dict(p_list=(0.0,)), dict(p_list=(1.0,)),
                                        dict(uniform_reduction="max")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)

    def test_seed_count_rule(self):
        assert effective_seed_count(4096, 1000) == 1000
        assert effective_seed_count(1000, 1000) == 1000
        assert effective_seed_count(999, 1000) == 249
        assert effective_seed_count(2, 1000) == 1


class TestChamfer:
    def test_identical(self, rng):
        a = rng.normal(size=(20, 3))
        assert chamfer_loss(a, a).item() == 0.0

    def test_single_pair(self):
        assert chamfer_loss(np.zeros((1, 3)), np.array([[2.0, 0, 0]])).item() == 8.0

    def test_outlier_filtered(self):
        assert chamfer_loss(np.zeros((1, 3)), np.array([[20.0, 0, 0]])).item() == 0.0

    def test_brute_force(self, rng):
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(17, 3))
        d = _sq_dists(a, b)
        ref = d.min(1).mean() + d.min(0).mean()
        assert chamfer_loss(a, b).item() == pytest.approx(ref, rel=1e-14)

    def test_gradient(self, rng):
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
        assert check_grads(lambda x, y: chamfer_loss(x, y), [a, b]) < 1e-4

    def test_empty(self):
        with pytest.raises(ValueError):
            chamfer_loss(np.zeros((0, 3)), np.zeros((1, 3)))


class TestUniformLoss:
    def test_balanced_subsets_give_zero(self):
        pts, p = balanced_groups()
        loss, stats = uniform_loss(pts, LossConfig(M=4), p, return_stats=True)
        np.testing.assert_array_equal(stats.sizes, [5, 5, 5, 5])
        assert stats.n_hat == 5
        assert loss.item() == 0.0

    def test_expected_spacing_gives_zero_clutter(self):
        p = 0.01
        pts, d_hat = hexagon(p)
        loss, stats = uniform_loss(pts, LossConfig(M=1), p, return_stats=True)
        assert stats.sizes[0] == 7
        np.testing.assert_allclose(stats.d_hat[0], d_hat, rtol=1e-15)
        np.testing.assert_allclose(stats.nn_dists, d_hat, rtol=1e-12)
        # imbalance is far from zero (n_hat = 0.07), so only the clutter factor can zero the loss
        assert loss.item() < 1e-20

    def test_closed_form_single_subset(self):
        # three collinear points, seed at the middle: one subset, hand-computed terms
        p = 0.04
        pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [-0.05, 0, 0]])
        n_hat = p * 3
        d_hat = math.sqrt(2 * math.pi * p / (math.sqrt(3) * 3))
        nn = np.array([0.05, 0.1, 0.05])
        expected = (3 - n_hat) ** 2 / n_hat * ((nn - d_hat) ** 2).sum() / d_hat
        assert uniform_loss(pts, LossConfig(M=1), p).item() == pytest.approx(expected, rel=1e-13)

    def test_clustered_worse_than_blue_noise(self):
        blue = normalize_to_unit_sphere(sample_mesh(make_shape("sphere"), 1024, 0)).points
        blobs = two_blobs(1024)
        for p in LossConfig().p_list:
            assert uniform_loss(blobs, LossConfig(), p).item() > uniform_loss(blue, LossConfig(), p).item()

    def test_multi_is_sum_over_radii(self, rng):
        pts = normalize_to_unit_sphere(rng.normal(size=(400, 3))).points
        cfg = LossConfig()
        total = sum(uniform_loss(pts, cfg, p).item() for p in cfg.p_list)
        assert uniform_loss_multi(pts, cfg).item() == pytest.approx(total, rel=1e-12)

    def test_mean_reduction_divides_by_seed_count(self, rng):
        pts = normalize_to_unit_sphere(rng.normal(size=(400, 3))).points
        s = uniform_loss(pts, LossConfig(), 0.01).item()
        m = uniform_loss(pts, LossConfig(uniform_reduction="mean"), 0.01).item()
        assert m == pytest.approx(s / effective_seed_count(400, 1000), rel=1e-12)

    def test_gradient(self, rng):
        pts = normalize_to_unit_sphere(rng.normal(size=(60, 3))).points
        assert check_grads(lambda x: uniform_loss(x, LossConfig(), 0.05), [pts]) < 1e-4

    def test_unnormalized_rejected(self, rng):
        with pytest.raises(ContractError):
            uniform_loss(rng.normal(size=(100, 3)) * 10, LossConfig(), 0.01)


class TestJointLoss:
    def _params(self, value):
        return EvaParams({"w": DiffArray(np.array([value]), requires_grad=True)})

    def test_zero_case(self):
        pts, p = balanced_groups()
        cfg = LossConfig(M=4, p_list=(p,))
        assert joint_loss(pts, pts, self._params(0.0), cfg).item() == 0.0

    def test_weight_decay_alone(self, rng):
        a = rng.normal(size=(8, 3))
        cfg = LossConfig(alpha=0, beta=0, gamma=1)
        assert joint_loss(a, a, self._params(2.0), cfg).item() == 4.0

    def test_recomposes_from_parts(self, rng):
        pred = normalize_to_unit_sphere(rng.normal(size=(200, 3))).points
        gt = normalize_to_unit_sphere(rng.normal(size=(200, 3))).points
        params = self._params(0.7)
        cfg = LossConfig(alpha=3.0, beta=0.5, gamma=2.0)
        total, terms = joint_loss(pred, gt, params, cfg, return_terms=True)
        cd = chamfer_loss(pred, gt).item()
        uni = uniform_loss_multi(pred, cfg).item()
        assert terms == pytest.approx({"cd": cd, "uniform": uni, "sq_norm": 0.49}, rel=1e-14)
        assert total.item() == pytest.approx(3 * cd + 0.5 * uni + 2 * 0.49, rel=1e-13)

    def test_batch_is_mean_of_samples(self, rng):
        pred = np.stack([normalize_to_unit_sphere(rng.normal(size=(100, 3))).points for _ in range(3)])
        gt = rng.normal(size=(3, 100, 3)) * 0.5
        params = self._params(0.0)
        cfg = LossConfig(beta=0.1)
        each = [joint_loss(pred[b], gt[b], params, cfg).item() for b in range(3)]
        assert joint_loss(pred, gt, params, cfg).item() == pytest.approx(np.mean(each), rel=1e-13)

    def test_gradient_reaches_params_and_points(self, rng):
        pred = normalize_to_unit_sphere(rng.normal(size=(50, 3))).points
        gt = rng.normal(size=(50, 3)) * 0.5
        x = DiffArray(pred, requires_grad=True)
        params = self._params(1.5)
        with Tape() as tape:
            tape.backward(joint_loss(x, gt, params, LossConfig()))
        assert params["w"].grad[0] == pytest.approx(3.0)
        assert np.all(np.isfinite(x.grad)) and np.abs(x.grad).max() > 0


class TestMetrics:
    def test_hd_example(self):
        assert metric_hd(np.array([[0.0, 0, 0], [1, 0, 0]]), np.zeros((1, 3))) == 1.0

    def test_cd_identical(self, rng):
        a = rng.normal(size=(20, 3))
        assert metric_cd(a, a) == 0.0

    def test_brute_force_oracles(self, rng):
        a, b = rng.normal(size=(128, 3)), rng.normal(size=(128, 3))
        d = _sq_dists(a, b)
        assert metric_cd(a, b) == d.min(1).mean() + d.min(0).mean()
        assert metric_hd(a, b) == math.sqrt(max(d.min(1).max(), d.min(0).max()))

    def test_cd_ignores_filter_unless_asked(self):
        a, b = np.zeros((1, 3)), np.array([[20.0, 0, 0]])
        assert metric_cd(a, b) == 800.0
        assert metric_cd(a, b, delta=100.0) == 0.0

    def test_p2f(self, backend, rng):
        mesh = make_shape("cube")
        pts = rng.normal(size=(40, 3))
        c = mesh.corners
        ref = np.mean([math.sqrt(min(backend.point_triangle_sqdist(q, *t) for t in c)) for q in pts])
        assert metric_p2f(pts, mesh) == pytest.approx(ref, abs=1e-12)
        assert metric_p2f(sample_mesh(mesh, 200, 0).points, mesh) < 1e-12

    def test_uniformity_is_scale_free(self, rng):
        pts = rng.normal(size=(300, 3))
        assert metric_uniformity(pts * 5 + 2, 0.01) == pytest.approx(metric_uniformity(pts, 0.01), rel=1e-9)

    def test_empty(self):
        for fn in (metric_cd, metric_hd):
            with pytest.raises(ValueError):
                fn(np.zeros((0, 3)), np.zeros((1, 3)))
