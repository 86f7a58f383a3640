"""The upsampling network, stage by stage and end to end."""

import numpy as np
import pytest

from conftest import check_grads
from pueva.engine import ContractError, DiffArray, DimensionError, mul, sum_all
from pueva.geometry import NeighborGraph, knn
from pueva.network import (
    EvaConfig,
    EvaParams,
    affine_combine,
    build_edge_vectors,
    eva_attention,
    extract_dense_features,
    forward,
    local_feature_expand,
    reconstruct_coordinates,
    select_anchors,
)
from pueva.training import DESK_MODEL

TINY = EvaConfig(K=4, R_train=2, n_blocks=2, layers_per_block=2, growth=2, stem=3, C1=4, C2=5, mlp_widths=(6,))


def _randomize_head(params, rng, scale=0.1):
    """Give the zero-initialized regression layer random values so it is not trivially inert."""
    last = max(int(k[5:].split(".")[0]) for k in params.arrays if k.startswith("recon"))
    w = params[f"recon{last}.w"]
    w.data = rng.normal(size=w.shape) * scale
    params[f"recon{last}.b"].data = rng.normal(size=3) * scale
    return params


def _reference_forward(coords, params, config, R, anchor_mode, rng_seed=0):
    """The literal per-stage composition, materializing every edge tensor."""
    N = len(coords)
    feats = extract_dense_features(coords, params, config.K, config)
    graph = knn(coords, config.K)
    edges = build_edge_vectors(coords, feats, graph)
    slots = select_anchors(graph, R, anchor_mode, np.random.default_rng(rng_seed))
    anchor = DiffArray(edges.data[np.arange(N)[:, None], slots])
    w = eva_attention(anchor, edges, params, scale=config.logit_scale)
    approx = affine_combine(w, DiffArray(coords[graph.indices]))
    out = reconstruct_coordinates(approx, local_feature_expand(edges, params, R), params)
    return out.data.reshape(N * R, 3), w.data


class TestConfig:
    def test_defaults(self):
        c = EvaConfig()
        assert (c.K, c.R_train, c.C1, c.C2) == (12, 6, 240, 480)
        assert c.feature_dim == 480 and c.edge_dim == 1450
        assert c.mlp_widths == (256, 128, 64)

    @pytest.mark.parametrize("kwargs", [dict(R_train=13), dict(R_train=0), dict(C1=0), dict(anchor_mode="x")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            EvaConfig(**kwargs)

    def test_round_trip(self):
        c = EvaConfig(**DESK_MODEL)
        assert EvaConfig.from_dict(c.to_dict()) == c


class TestParams:
    def test_phi_widths_match(self):
        p = EvaParams.init(EvaConfig())
        assert p["phi1.w"].shape == p["phi2.w"].shape == (1450, 240)
        assert p["psi.w"].shape == (1450, 480)

    def test_state_dict_round_trip_is_exact(self):
        p = EvaParams.init(TINY, 3)
        q = EvaParams.from_state_dict(p.state_dict())
        for k in p.arrays:
            np.testing.assert_array_equal(p[k].data, q[k].data)

    def test_seeded_init(self):
        a, b = EvaParams.init(TINY, 5), EvaParams.init(TINY, 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.arrays)

    @pytest.mark.parametrize("R", [2, 4, 6, 8])
    def test_count_independent_of_rate(self, R):
        cfg = EvaConfig(**DESK_MODEL)
        p = EvaParams.init(cfg)
        n = p.count()
        pts = np.random.default_rng(0).normal(size=(40, 3))
        assert forward(pts, p, cfg, R=R).shape == (40 * R, 3)
        assert p.count() == n == EvaParams.init(EvaConfig(**DESK_MODEL, R_train=2)).count()


class TestFeatureExtraction:
    def test_full_width(self, rng):
        cfg = EvaConfig()
        v = extract_dense_features(rng.normal(size=(20, 3)), EvaParams.init(cfg), 12, cfg)
        assert v.shape == (20, 480)

    def test_permutation_equivariant(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = EvaParams.init(cfg)
        pts = rng.normal(size=(30, 3))
        perm = rng.permutation(30)
        a = extract_dense_features(pts, p, 12, cfg).data
        b = extract_dense_features(pts[perm], p, 12, cfg).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_far_point_leaves_unchanged_neighbourhoods_alone(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = EvaParams.init(cfg)
        pts = rng.normal(size=(30, 3))
        moved = pts.copy()
        moved[0] = [100.0, 100.0, 100.0]
        a = extract_dense_features(pts, p, 6, cfg).data
        b = extract_dense_features(moved, p, 6, cfg).data
        # each block reads its neighbours' previous-block features, so influence spreads one hop per block
        g1, g2 = knn(pts, 6).indices, knn(moved, 6).indices
        affected = ~np.all(g1 == g2, axis=1)
        affected[0] = True
        for _ in range(cfg.n_blocks):
            affected = affected | affected[g1].any(axis=1)
        stable = ~affected
        assert stable.sum() >= 3
        np.testing.assert_array_equal(a[stable], b[stable])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            extract_dense_features(np.zeros((12, 3)), EvaParams.init(EvaConfig()), 12)


class TestEdgeVectors:
    def test_width_and_layout(self, rng):
        pts = rng.normal(size=(15, 3))
        feats = rng.normal(size=(15, 480))
        g = knn(pts, 5)
        e = build_edge_vectors(pts, feats, g).data
        C = 480
        assert e.shape == (15, 5, 1450)
        np.testing.assert_array_equal(e[..., 3 * C + 3:3 * C + 6], pts[g.indices])
        np.testing.assert_array_equal(e[..., C:2 * C], feats[g.indices])
        np.testing.assert_array_equal(e[..., -1], g.distances)

    def test_coincident_neighbour(self, rng):
        pts = rng.normal(size=(8, 3))
        pts[1] = pts[0]
        feats = rng.normal(size=(8, 4))
        feats[1] = feats[0]
        e = build_edge_vectors(pts, feats, knn(pts, 3)).data[0, 0]
        assert not np.any(e[:4]) and not np.any(e[12:15]) and e[-1] == 0

    def test_size_mismatch(self, rng):
        g = knn(rng.normal(size=(8, 3)), 3)
        with pytest.raises(ContractError):
            build_edge_vectors(np.zeros((9, 3)), np.zeros((9, 2)), g)


class TestAnchors:
    def _graph(self, N=5, K=4):
        return NeighborGraph(K, np.zeros((N, K), dtype=np.int64), np.zeros((N, K)))

    def test_all_slots(self):
        s = select_anchors(self._graph(), 4, "random", 0)
        np.testing.assert_array_equal(np.sort(s, axis=1), np.tile(np.arange(4), (5, 1)))

    def test_nearest(self):
        np.testing.assert_array_equal(select_anchors(self._graph(), 2, "nearest"), np.tile([0, 1], (5, 1)))

    def test_uniform_frequency(self):
        g = self._graph(N=1)
        counts = np.zeros(4)
        for seed in range(10_000):
            counts[select_anchors(g, 2, "random", seed)[0]] += 1
        np.testing.assert_allclose(counts / 10_000, 0.5, atol=0.02)

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_anchors(self._graph(), 5)


class TestAttention:
    def _params(self, rng, E=7, C1=5):
        return EvaParams({"phi1.w": DiffArray(rng.normal(size=(E, C1))), "phi1.b": DiffArray(rng.normal(size=C1)),
                          "phi2.w": DiffArray(rng.normal(size=(E, C1))), "phi2.b": DiffArray(rng.normal(size=C1))})

    def test_zero_phi1_gives_uniform_weights(self, rng):
        p = self._params(rng)
        p["phi1.w"].data[:] = 0
        p["phi1.b"].data[:] = 0
        w = eva_attention(rng.normal(size=(3, 2, 7)), rng.normal(size=(3, 6, 7)), p).data
        np.testing.assert_allclose(w, 1 / 6, atol=1e-15)

    def test_loop_oracle(self, rng):
        p = self._params(rng)
        ea, ek = rng.normal(size=(3, 2, 7)), rng.normal(size=(3, 6, 7))
        w = eva_attention(ea, ek, p).data
        assert w.shape == (3, 2, 6)
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-9)
        relu = lambda x: np.maximum(x, 0)
        for i in range(3):
            for r in range(2):
                g = relu(ea[i, r] @ p["phi1.w"].data + p["phi1.b"].data)
                s = np.array([g @ relu(ek[i, k] @ p["phi2.w"].data + p["phi2.b"].data) for k in range(6)]) / np.sqrt(5)
                e = np.exp(s - s.max())
                np.testing.assert_allclose(w[i, r], e / e.sum(), rtol=0, atol=1e-10)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            eva_attention(rng.normal(size=(3, 2, 8)), rng.normal(size=(3, 6, 8)), self._params(rng))


class TestAffineCombine:
    def test_one_hot(self, rng):
        nb = rng.normal(size=(2, 5, 3))
        w = np.zeros((2, 1, 5))
        w[0, 0, 3] = w[1, 0, 1] = 1
        out = affine_combine(w, nb).data
        np.testing.assert_array_equal(out[:, 0], [nb[0, 3], nb[1, 1]])

    def test_square_centroid(self):
        sq = np.array([[[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]])
        np.testing.assert_allclose(affine_combine(np.full((1, 1, 4), 0.25), sq).data[0, 0], [0.5, 0.5, 0])

    def test_plane_is_preserved(self, rng):
        nb = rng.normal(size=(4, 6, 3))
        nb[..., 2] = 3.0
        w = rng.dirichlet(np.ones(6), size=(4, 2))
        np.testing.assert_allclose(affine_combine(w, nb).data[..., 2], 3.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            affine_combine(np.ones((1, 1, 4)), np.ones((1, 5, 3)))


class TestLocalFeatureExpand:
    def _params(self, rng, E=7, C2=4):
        return EvaParams({"psi.w": DiffArray(rng.normal(size=(E, C2))), "psi.b": DiffArray(rng.normal(size=C2))})

    def test_copies_identical_and_loop_oracle(self, rng):
        p = self._params(rng)
        ek = rng.normal(size=(3, 5, 7))
        out = local_feature_expand(ek, p, 3).data
        assert out.shape == (3, 3, 4)
        for i in range(3):
            ref = np.array([max(max(ek[i, k] @ p["psi.w"].data[:, c] + p["psi.b"].data[c], 0) for k in range(5))
                            for c in range(4)])
            for r in range(3):
                np.testing.assert_allclose(out[i, r], ref, rtol=0, atol=1e-12)

    def test_single_neighbour(self, rng):
        p = self._params(rng)
        ek = rng.normal(size=(3, 1, 7))
        out = local_feature_expand(ek, p, 2).data
        np.testing.assert_allclose(out[:, 1], np.maximum(ek[:, 0] @ p["psi.w"].data + p["psi.b"].data, 0), atol=1e-14)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            local_feature_expand(rng.normal(size=(3, 5, 8)), self._params(rng), 2)


class TestReconstruction:
    def _params(self, C2=5):
        return EvaParams.init(EvaConfig(K=4, R_train=2, C1=2, C2=C2, growth=1, stem=1, n_blocks=1,
                                        layers_per_block=1, mlp_widths=(6, 4)))

    def test_zero_head_is_identity(self, rng):
        approx = rng.normal(size=(4, 2, 3))
        out = reconstruct_coordinates(approx, rng.normal(size=(4, 2, 5)), self._params()).data
        assert out.shape == (4, 2, 3)
        np.testing.assert_array_equal(out, approx)

    def test_gradients(self, rng):
        p = _randomize_head(self._params(), rng)
        names = [k for k in p.arrays if k.startswith("recon")]
        approx, lp = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 2, 5))
        t = rng.normal(size=(3, 2, 3))

        def build(a, l, *arrs):
            return sum_all(mul(reconstruct_coordinates(a, l, EvaParams(dict(zip(names, arrs)))), t))

        assert check_grads(build, [approx, lp] + [p[k].data for k in names]) < 1e-4

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            reconstruct_coordinates(rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2, 6)), self._params())


class TestForward:
    def test_output_size(self, rng):
        cfg = EvaConfig(**DESK_MODEL, R_train=4)
        assert forward(rng.normal(size=(256, 3)), EvaParams.init(cfg), cfg, R=4).shape == (1024, 3)

    def test_deterministic(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = _randomize_head(EvaParams.init(cfg), rng)
        pts = rng.normal(size=(40, 3))
        np.testing.assert_array_equal(forward(pts, p, cfg, 4, rng_seed=9).data, forward(pts, p, cfg, 4, rng_seed=9).data)

    @pytest.mark.parametrize("mode", ["nearest", "random"])
    def test_matches_stage_composition(self, rng, mode):
        cfg = EvaConfig(K=6, R_train=3, growth=4, stem=5, C1=8, C2=7, mlp_widths=(9, 6))
        p = _randomize_head(EvaParams.init(cfg, 2), rng)
        pts = rng.normal(size=(25, 3))
        out, parts = forward(pts, p, cfg, R=3, rng_seed=4, anchor_mode=mode, return_parts=True)
        ref, w = _reference_forward(pts, p, cfg, 3, mode, rng_seed=4)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(parts["weights"].data, w, rtol=0, atol=1e-14)

    def test_batched_equals_single(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = _randomize_head(EvaParams.init(cfg), rng)
        pts = rng.normal(size=(2, 30, 3))
        both = forward(pts, p, cfg, 3, anchor_mode="nearest").data
        for b in range(2):
            np.testing.assert_allclose(both[b], forward(pts[b], p, cfg, 3, anchor_mode="nearest").data, atol=1e-12)

    def test_permutation_equivariant(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = _randomize_head(EvaParams.init(cfg), rng)
        pts = rng.normal(size=(30, 3))
        perm = rng.permutation(30)
        a = forward(pts, p, cfg, 3, anchor_mode="nearest").data.reshape(30, 3, 3)
        b = forward(pts[perm], p, cfg, 3, anchor_mode="nearest").data.reshape(30, 3, 3)
        np.testing.assert_allclose(b, a[perm], atol=1e-9)

    @pytest.mark.parametrize("R", [2, 4, 6, 8])
    def test_any_rate_up_to_k(self, rng, R):
        cfg = EvaConfig(**DESK_MODEL, R_train=6)
        out = forward(rng.normal(size=(40, 3)), EvaParams.init(cfg), cfg, R=R).data
        assert out.shape == (40 * R, 3) and np.all(np.isfinite(out))

    def test_rate_above_k(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        with pytest.raises(ValueError, match="R <= K"):
            forward(rng.normal(size=(40, 3)), EvaParams.init(cfg), cfg, R=13)

    def test_too_few_points(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        with pytest.raises(ValueError):
            forward(rng.normal(size=(12, 3)), EvaParams.init(cfg), cfg)

    def test_generated_points_lie_near_neighbour_hull(self, rng):
        cfg = EvaConfig(**DESK_MODEL)
        p = EvaParams.init(cfg)
        pts = rng.normal(size=(40, 3))
        out, parts = forward(pts, p, cfg, 4, return_parts=True)
        w, nb = parts["weights"].data, parts["neighbors"].data
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-9)
        np.testing.assert_allclose(out.data.reshape(40, 4, 3), np.einsum("nrk,nkc->nrc", w, nb), atol=1e-9)

    def test_duplicate_baseline(self, rng):
        cfg = EvaConfig(**DESK_MODEL, R_train=4, upsampler="duplicate")
        p = _randomize_head(EvaParams.init(cfg), rng)
        out = forward(rng.normal(size=(30, 3)), p, cfg).data.reshape(30, 4, 3)
        # learned per-copy codes make the copies differ
        assert np.abs(out[:, 0] - out[:, 1]).max() > 0
        with pytest.raises(ValueError):
            forward(rng.normal(size=(30, 3)), p, cfg, R=2)

    def test_end_to_end_gradients(self, rng):
        p = _randomize_head(EvaParams.init(TINY, 1), rng)
        # zero biases put dead-unit pre-activations exactly on the relu kink
        for k in p.arrays:
            if k.endswith(".b"):
                p[k].data = rng.normal(size=p[k].shape) * 0.1
        names = list(p.arrays)
        pts = rng.normal(size=(16, 3))
        t = rng.normal(size=(32, 3))

        def build(x, *arrs):
            return sum_all(mul(forward(x, EvaParams(dict(zip(names, arrs))), TINY, R=2, rng_seed=3), t))

        assert check_grads(build, [pts] + [p[k].data for k in names]) < 1e-3
