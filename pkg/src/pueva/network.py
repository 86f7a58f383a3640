"""The upsampling network: dense EdgeConv features, edge-vector attention
upsampling and residual coordinate reconstruction.

Two code paths exist for the upsampling stage. The public per-stage ops
(:func:`build_edge_vectors`, :func:`eva_attention`, :func:`local_feature_expand`,
:func:`reconstruct_coordinates`) materialize every tensor literally and serve
as the reference. :func:`forward` computes the same quantities without ever
building the ``N x K x (3C+10)`` edge tensor: a 1x1 convolution of a
concatenation is a sum of per-block products, so each block is projected once
per point and then gathered per edge.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import (
    ContractError,
    DiffArray,
    DimensionError,
    add,
    as_array,
    broadcast_to,
    concat,
    gather_rows,
    matmul,
    max_reduce,
    mul,
    neighbor_edges_relu,
    neighbor_max_relu,
    pointwise_linear,
    relu,
    reshape,
    safe_sqrt,
    slice_axis,
    softmax_lastdim,
    sub,
    sum_all,
    square,
    sum_axis,
    swapaxes,
)
from .geometry import NeighborGraph, knn

ANCHOR_MODES = ("random", "nearest")


@dataclass
class EvaConfig:
    K: int = 12
    R_train: int = 6
    C1: int = 240
    C2: int = 480
    anchor_mode: str = "random"
    n_blocks: int = 4
    layers_per_block: int = 3
    growth: int = 24
    # width of each block's first EdgeConv layer; stem + layers*growth = 120 per block
    stem: int = 48
    mlp_widths: tuple[int, ...] = (256, 128, 64)
    # logit multiplier for g.h^T; None means 1/sqrt(C1)
    attn_scale: float | None = None
    # recompute k-NN in feature space for blocks after the first
    feature_graph: bool = False
    upsampler: str = "eva"

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if not 1 <= self.R_train <= self.K:
            raise ValueError(f"need 1 <= R_train <= K, got R_train={self.R_train}, K={self.K}")
        if self.C1 < 1 or self.C2 < 1:
            raise ValueError("C1 and C2 must be positive")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"anchor_mode must be one of {ANCHOR_MODES}")
        if self.upsampler not in ("eva", "duplicate"):
            raise ValueError("upsampler must be 'eva' or 'duplicate'")

    @property
    def block_width(self) -> int:
        return self.stem + self.layers_per_block * self.growth

    @property
    def feature_dim(self) -> int:
        return self.n_blocks * self.block_width

    @property
    def edge_dim(self) -> int:
        return 3 * self.feature_dim + 10

    @property
    def logit_scale(self) -> float:
        return self.attn_scale if self.attn_scale is not None else 1.0 / math.sqrt(self.C1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_widths"] = list(self.mlp_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaConfig":
        return cls(**d)


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class EvaParams:
    """Named learnable arrays. Iteration order is creation order and is stable."""

    arrays: dict[str, DiffArray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EvaConfig, rng_seed=0) -> "EvaParams":
        rng = np.random.default_rng(rng_seed)
        arrays: dict[str, DiffArray] = {}

        def linear(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else _xavier(rng, fan_in, fan_out)
            arrays[name + ".w"] = DiffArray(w, requires_grad=True, name=name + ".w")
            arrays[name + ".b"] = DiffArray(np.zeros(fan_out), requires_grad=True, name=name + ".b")

        cin = 3
        for b in range(config.n_blocks):
            linear(f"block{b}.stem", 2 * cin, config.stem)
            width = config.stem
            for j in range(config.layers_per_block):
                linear(f"block{b}.layer{j}", width, config.growth)
                width += config.growth
            cin = (b + 1) * config.block_width
        C, E = config.feature_dim, config.edge_dim
        if config.upsampler == "eva":
            linear("phi1", E, config.C1)
            linear("phi2", E, config.C1)
            linear("psi", E, config.C2)
        else:
            # one shared projection plus a learned code per copy (a one-hot input channel)
            linear("dup", C, config.C2)
            arrays["dup.code"] = DiffArray(_xavier(rng, config.R_train, config.C2), requires_grad=True,
                                           name="dup.code")
        width = config.C2 + 3
        for j, w in enumerate(config.mlp_widths):
            linear(f"recon{j}", width, w)
            width = w
        linear(f"recon{len(config.mlp_widths)}", width, 3, zero=True)
        return cls(arrays)

    def __getitem__(self, name: str) -> DiffArray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def parameters(self) -> list[DiffArray]:
        return list(self.arrays.values())

    def count(self) -> int:
        return sum(p.size for p in self.arrays.values())

    def sq_norm(self) -> DiffArray:
        total = None
        for p in self.arrays.values():
            s = sum_all(square(p))
            total = s if total is None else add(total, s)
        return total

    def zero_grad(self) -> None:
        for p in self.arrays.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.arrays.items()}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "EvaParams":
        return cls({k: DiffArray(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in state.items()})

    def copy(self) -> "EvaParams":
        return EvaParams.from_state_dict(self.state_dict())


# ------------------------------------------------------------------ graph helpers


def _batched(coords) -> tuple[DiffArray, bool]:
    x = as_array(coords)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3 or x.shape[-1] != 3:
        raise DimensionError(f"coordinates must be (N, 3) or (B, N, 3), got {x.shape}")
    return x, False


def _global_graph(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-NN per batch item, with indices offset into the flattened (B*N) row space."""
    B, N = points.shape[:2]
    idx = np.empty((B * N, k), dtype=np.int64)
    dist = np.empty((B * N, k))
    for b in range(B):
        g = knn(points[b], k)
        idx[b * N:(b + 1) * N] = g.indices + b * N
        dist[b * N:(b + 1) * N] = g.distances
    return idx, dist


def _edge_lengths(p: DiffArray, idx: np.ndarray) -> DiffArray:
    """Differentiable ``|p[idx[i, k]] - p[i]|``, shape (N, K)."""
    N, K = idx.shape
    diff = sub(gather_rows(p, idx), reshape(p, (N, 1, 3)))
    return safe_sqrt(sum_axis(square(diff), -1))


# ------------------------------------------------------------------ feature extraction


def _edgeconv_block(x: DiffArray, idx: np.ndarray, params: EvaParams, b: int, cfg: EvaConfig) -> DiffArray:
    cin = x.shape[1]
    w = params[f"block{b}.stem.w"]
    w_diff = slice_axis(w, 0, 0, cin)
    w_ctr = slice_axis(w, 0, cin, 2 * cin)
    # stem on [x_k - x_i, x_i], factored per point
    ctr = add(matmul(x, sub(w_ctr, w_diff)), params[f"block{b}.stem.b"])
    feats = [neighbor_edges_relu(matmul(x, w_diff), ctr, None, idx)]
    for j in range(cfg.layers_per_block):
        w = params[f"block{b}.layer{j}.w"]
        # dense connectivity: a layer over concat(feats) is the sum of per-part products
        acc, off = None, 0
        for f in feats:
            width = f.shape[-1]
            part = pointwise_linear(f, slice_axis(w, 0, off, off + width))
            acc = part if acc is None else add(acc, part)
            off += width
        feats.append(relu(add(acc, params[f"block{b}.layer{j}.b"])))
    # max over neighbours commutes with channel concatenation
    return concat([max_reduce(f, axis=1) for f in feats], axis=-1)


def _extract(x: DiffArray, idx: np.ndarray, params: EvaParams, cfg: EvaConfig, B: int, N: int) -> DiffArray:
    outs: list[DiffArray] = []
    inp = x
    for b in range(cfg.n_blocks):
        if b > 0:
            inp = outs[0] if b == 1 else concat(outs, axis=-1)
            if cfg.feature_graph:
                idx, _ = _global_graph(inp.data.reshape(B, N, -1), cfg.K)
        outs.append(_edgeconv_block(inp, idx, params, b, cfg))
    return concat(outs, axis=-1)


def extract_dense_features(coords, params: EvaParams, k: int, config: EvaConfig | None = None) -> DiffArray:
    """Per-point dense EdgeConv features, shape (N, C) or (B, N, C) with C = 480 by default."""
    cfg = config or EvaConfig(K=k, R_train=min(6, k))
    x, single = _batched(coords)
    B, N, _ = x.shape
    if N <= k:
        raise ValueError(f"feature extraction needs N > k (N={N}, k={k})")
    idx, _ = _global_graph(x.data, k)
    v = _extract(reshape(x, (B * N, 3)), idx, params, cfg, B, N)
    return reshape(v, (N, v.shape[-1]) if single else (B, N, v.shape[-1]))


# ------------------------------------------------------------------ reference per-stage ops


def build_edge_vectors(coords, feats, graph: NeighborGraph) -> DiffArray:
    """Edge descriptors ``(v_k - v_i) | v_k | v_i | (p_k - p_i) | p_k | p_i | d_ik``, shape (N, K, 3C+10)."""
    p, v = as_array(coords), as_array(feats)
    N, K = graph.indices.shape
    if p.shape[0] != N or v.shape[0] != N:
        raise ContractError(f"graph has {N} rows but coords/feats have {p.shape[0]}/{v.shape[0]}")
    C = v.shape[1]
    vk = gather_rows(v, graph.indices)
    vi = broadcast_to(reshape(v, (N, 1, C)), (N, K, C))
    pk = gather_rows(p, graph.indices)
    pi = broadcast_to(reshape(p, (N, 1, 3)), (N, K, 3))
    d = reshape(_edge_lengths(p, graph.indices), (N, K, 1)) if p.requires_grad else \
        DiffArray(graph.distances.reshape(N, K, 1))
    return concat([sub(vk, vi), vk, vi, sub(pk, pi), pk, pi, d], axis=-1)


def select_anchors(graph: NeighborGraph, R: int, mode: str = "random", rng_seed=None) -> np.ndarray:
    """Neighbour slots (0..K-1) used as anchors, shape (N, R)."""
    N, K = graph.indices.shape
    if R > K:
        raise ValueError(f"R={R} anchors cannot be drawn from K={K} neighbours")
    if mode == "nearest":
        return np.broadcast_to(np.arange(R), (N, R)).copy()
    if mode != "random":
        raise ValueError(f"unknown anchor mode {mode!r}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return np.argsort(rng.random((N, K)), axis=1)[:, :R]


def eva_attention(edge_anchor, edge_all, params: EvaParams, scale: float | None = None) -> DiffArray:
    """Softmax similarity between anchor and neighbour edge embeddings, shape (N, R, K)."""
    ea, ek = as_array(edge_anchor), as_array(edge_all)
    w1 = params["phi1.w"]
    if ea.shape[-1] != w1.shape[0] or ek.shape[-1] != w1.shape[0]:
        raise DimensionError(f"edge widths {ea.shape[-1]}/{ek.shape[-1]} do not match phi weights {w1.shape}")
    g = relu(pointwise_linear(ea, w1, params["phi1.b"]))
    h = relu(pointwise_linear(ek, params["phi2.w"], params["phi2.b"]))
    if scale is None:
        scale = 1.0 / math.sqrt(g.shape[-1])
    return softmax_lastdim(mul(matmul(g, swapaxes(h, -1, -2)), scale))


def affine_combine(weights, neighbor_coords) -> DiffArray:
    """``sum_k w_rk * p_k`` for each anchor row, shape (N, R, 3)."""
    w, p = as_array(weights), as_array(neighbor_coords)
    if w.shape[-1] != p.shape[-2]:
        raise DimensionError(f"weights {w.shape} do not match neighbour coords {p.shape}")
    return matmul(w, p)


def local_feature_expand(edge_all, params: EvaParams, R: int) -> DiffArray:
    """psi-embedded edges max-pooled over K and tiled R times, shape (N, R, C2)."""
    ek = as_array(edge_all)
    if ek.shape[-1] != params["psi.w"].shape[0]:
        raise DimensionError(f"edge width {ek.shape[-1]} does not match psi weights {params['psi.w'].shape}")
    l = relu(pointwise_linear(ek, params["psi.w"], params["psi.b"]))
    pooled = max_reduce(l, axis=-2)
    lead = pooled.shape[:-1]
    C2 = pooled.shape[-1]
    return broadcast_to(reshape(pooled, lead + (1, C2)), lead + (R, C2))


def _mlp_tail(x: DiffArray, params: EvaParams, n_hidden: int, start: int = 1) -> DiffArray:
    for j in range(start, n_hidden):
        x = relu(pointwise_linear(x, params[f"recon{j}.w"], params[f"recon{j}.b"]))
    return pointwise_linear(x, params[f"recon{n_hidden}.w"], params[f"recon{n_hidden}.b"])


def _n_hidden(params: EvaParams) -> int:
    n = 0
    while f"recon{n + 1}.w" in params:
        n += 1
    return n


def reconstruct_coordinates(approx, lprime, params: EvaParams) -> DiffArray:
    """Residual coordinate regression from ``approx | lprime``, shape (N, R, 3)."""
    a, l = as_array(approx), as_array(lprime)
    if a.shape[:-1] != l.shape[:-1] or a.shape[-1] != 3:
        raise DimensionError(f"approx {a.shape} and lprime {l.shape} disagree")
    if params["recon0.w"].shape[0] != l.shape[-1] + 3:
        raise DimensionError(f"lprime width {l.shape[-1]} does not match reconstruction input {params['recon0.w'].shape}")
    x = relu(pointwise_linear(concat([a, l], axis=-1), params["recon0.w"], params["recon0.b"]))
    return add(a, _mlp_tail(x, params, _n_hidden(params)))


# ------------------------------------------------------------------ fused forward


class _EdgeProjection:
    """A 1x1 conv over edge vectors, precomputed as per-point neighbour/centre terms."""

    def __init__(self, v: DiffArray, p: DiffArray, w: DiffArray, b: DiffArray):
        C = v.shape[1]
        blk = [slice_axis(w, 0, s, e) for s, e in
               ((0, C), (C, 2 * C), (2 * C, 3 * C), (3 * C, 3 * C + 3),
                (3 * C + 3, 3 * C + 6), (3 * C + 6, 3 * C + 9))]
        w_vd, w_vk, w_vi, w_pd, w_pk, w_pi = blk
        self.w_dist = slice_axis(w, 0, 3 * C + 9, 3 * C + 10)
        self.nbr = add(matmul(v, add(w_vd, w_vk)), matmul(p, add(w_pd, w_pk)))
        self.ctr = add(add(matmul(v, sub(w_vi, w_vd)), matmul(p, sub(w_pi, w_pd))), b)

    def pooled(self, idx: np.ndarray, dist: np.ndarray) -> DiffArray:
        """``max_k relu(edges)`` without materializing the per-edge tensor."""
        return neighbor_max_relu(self.nbr, self.ctr, self._w_vec(), idx, dist)

    def edges_relu(self, idx: np.ndarray, dist: np.ndarray) -> DiffArray:
        return neighbor_edges_relu(self.nbr, self.ctr, self._w_vec(), idx, dist)

    def _w_vec(self) -> DiffArray:
        return reshape(self.w_dist, (self.w_dist.shape[-1],))


def forward(coords, params: EvaParams, config: EvaConfig, R: int | None = None, rng_seed=0,
            anchor_mode: str | None = None, return_parts: bool = False):
    """Upsample (N, 3) -> (N*R, 3), or batched (B, N, 3) -> (B, N*R, 3).

    Generated points are grouped per input point: rows ``i*R .. i*R+R-1`` come
    from input point ``i``.
    """
    R = config.R_train if R is None else R
    mode = anchor_mode or config.anchor_mode
    if R > config.K:
        raise ValueError(f"rate R={R} exceeds the neighbourhood size K={config.K}; R must satisfy R <= K")
    if R < 1:
        raise ValueError("rate must be >= 1")
    x, single = _batched(coords)
    B, N, _ = x.shape
    if N <= config.K:
        raise ValueError(f"forward needs more than K={config.K} points, got {N}")
    idx, dist = _global_graph(x.data, config.K)
    BN, K = idx.shape
    p = reshape(x, (BN, 3))
    v = _extract(p, idx, params, config, B, N)
    nbr_coords = gather_rows(p, idx)

    if config.upsampler == "duplicate":
        if R != config.R_train:
            raise ValueError(f"feature duplication is fixed-rate (R={config.R_train}); got R={R}")
        approx = broadcast_to(reshape(p, (BN, 1, 3)), (BN, R, 3))
        shared = reshape(pointwise_linear(v, params["dup.w"], params["dup.b"]), (BN, 1, config.C2))
        copies = relu(add(shared, reshape(params["dup.code"], (1, R, config.C2))))
        out = reconstruct_coordinates(approx, copies, params)
        weights = None
    else:
        rng = np.random.default_rng(rng_seed)
        slots = np.concatenate([
            select_anchors(NeighborGraph(K, idx[b * N:(b + 1) * N], dist[b * N:(b + 1) * N]), R, mode, rng)
            for b in range(B)])
        a_idx = np.take_along_axis(idx, slots, axis=1)
        a_dist = np.take_along_axis(dist, slots, axis=1)
        if p.requires_grad:
            # distances are otherwise constants taken from the k-NN search
            dist, a_dist = _edge_lengths(p, idx), _edge_lengths(p, a_idx)

        phi1 = _EdgeProjection(v, p, params["phi1.w"], params["phi1.b"])
        phi2 = _EdgeProjection(v, p, params["phi2.w"], params["phi2.b"])
        psi = _EdgeProjection(v, p, params["psi.w"], params["psi.b"])
        g = phi1.edges_relu(a_idx, a_dist)
        h = phi2.edges_relu(idx, dist)
        weights = softmax_lastdim(mul(matmul(g, swapaxes(h, -1, -2)), config.logit_scale))
        approx = matmul(weights, nbr_coords)
        pooled = psi.pooled(idx, dist)

        # first reconstruction layer on approx | tile(pooled), factored so the tile never materializes
        w0 = params["recon0.w"]
        h0 = matmul(approx, slice_axis(w0, 0, 0, 3))
        t0 = add(matmul(pooled, slice_axis(w0, 0, 3, w0.shape[0])), params["recon0.b"])
        hidden = relu(add(h0, reshape(t0, (BN, 1, w0.shape[1]))))
        out = add(approx, _mlp_tail(hidden, params, _n_hidden(params)))

    out = reshape(out, (N * R, 3) if single else (B, N * R, 3))
    if return_parts:
        return out, {"approx": approx, "weights": weights, "neighbors": nbr_coords, "graph_idx": idx}
    return out
