"""Training objectives (outlier-filtered Chamfer, uniformity, joint) and
evaluation metrics (CD, HD, P2F, uniformity)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .engine import (
    ContractError,
    DiffArray,
    add,
    as_array,
    gather_rows,
    mul,
    safe_sqrt,
    square,
    sub,
    sum_all,
    sum_axis,
)
from .geometry import TriangleMesh, farthest_point_sample, normalize_to_unit_sphere, point_to_mesh_distance

DEFAULT_P_LIST = (0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass
class LossConfig:
    alpha: float = 150.0
    beta: float = 10.0
    gamma: float = 1.0
    # outlier threshold on squared nearest-neighbour distance
    delta: float = 100.0
    M: int = 1000
    p_list: tuple[float, ...] = DEFAULT_P_LIST
    # when False only p_list[0] enters the training loss
    uniform_all_p: bool = True
    # "sum" over seed subsets, or "mean" to make the term independent of M
    uniform_reduction: str = "sum"
    # uniform_loss rejects clouds whose RMS radius exceeds 1 + tol (augmented patches stay within)
    unit_radius_tol: float = 0.5

    def __post_init__(self):
        self.p_list = tuple(float(p) for p in self.p_list)
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be non-negative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not all(0 < p < 1 for p in self.p_list):
            raise ValueError("every p must lie in (0, 1)")
        if self.uniform_reduction not in ("sum", "mean"):
            raise ValueError("uniform_reduction must be 'sum' or 'mean'")


@dataclass
class UniformSubsetStats:
    sizes: np.ndarray      # |S_j| per seed
    nn_dists: np.ndarray   # nearest-neighbour distance of every subset member
    n_hat: float
    d_hat: np.ndarray      # expected spacing per seed (nan for subsets under 2 points)


# ------------------------------------------------------------------ training losses


def _directed(p: DiffArray, q: DiffArray, delta: float | None) -> DiffArray:
    j, d2 = kernels.nearest(p.data, q.data)
    sq = sum_axis(square(sub(p, gather_rows(q, j))), -1)
    if delta is not None:
        sq = mul(sq, (d2 <= delta).astype(np.float64))
    return mul(sum_all(sq), 1.0 / p.shape[0])


def chamfer_loss(pred, gt, delta: float = 100.0) -> DiffArray:
    """Mean filtered squared NN distance pred->gt plus gt->pred.

    Squared distances above ``delta`` count as 0 (and pass no gradient).
    """
    p, q = as_array(pred), as_array(gt)
    if p.shape[0] < 1 or q.shape[0] < 1:
        raise ValueError("chamfer_loss needs non-empty clouds")
    return add(_directed(p, q, delta), _directed(q, p, delta))


def _balls(points: np.ndarray, M: int, r2_max: float):
    """Members/sq-distances of the balls around the M farthest-point seeds."""
    return kernels.seed_balls(points, farthest_point_sample(points, M, 0), r2_max)


def _restrict(members: np.ndarray, d2: np.ndarray, p: float):
    """Members within radius sqrt(p), keeping the -1 padding layout."""
    sub_members = np.where(d2 <= p, members, -1)
    return sub_members, (sub_members >= 0).sum(axis=1)


def uniform_subsets(points: np.ndarray, M: int, p: float):
    """FPS seeds and ball-query subsets with radius sqrt(p).

    Returns ``(members, sizes)``; ``members`` is (M, S_max) with -1 padding.
    """
    members, d2 = _balls(np.asarray(points, dtype=np.float64), M, p)
    return _restrict(members, d2, p)


def _subset_nn(points: np.ndarray, members: np.ndarray):
    """(seed id, member, nearest other member) triples over all subsets of 2+ points."""
    nn_slot = kernels.subset_nn(points, members)
    seed_id, slot = np.nonzero(nn_slot >= 0)
    return seed_id, members[seed_id, slot], members[seed_id, nn_slot[seed_id, slot]]


def _check_unit(points: np.ndarray, tol: float) -> None:
    # RMS radius rather than max, so a few stray predicted points do not trip it
    radius = float(np.sqrt((points ** 2).sum(axis=1).mean()))
    if radius > 1.0 + tol:
        raise ContractError(
            f"uniform_loss expects a cloud normalized to the unit sphere (RMS radius {radius:.3f})")


def effective_seed_count(n: int, M: int) -> int:
    return M if n >= M else max(1, min(M, n // 4))


def uniform_loss(pred, config: LossConfig | None = None, p: float = 0.004,
                 return_stats: bool = False):
    """Imbalance x clutter uniformity penalty over FPS-seeded ball subsets."""
    config = config or LossConfig()
    if return_stats:
        loss, stats = _uniform(as_array(pred), config, (p,))
        return loss, stats[0]
    return _uniform(as_array(pred), config, (p,))[0]


def uniform_loss_multi(pred, config: LossConfig | None = None, p_list=None) -> DiffArray:
    """Sum of :func:`uniform_loss` over several radii, sharing the seed distances."""
    config = config or LossConfig()
    return _uniform(as_array(pred), config, tuple(p_list or config.p_list))[0]


def _uniform(x: DiffArray, config: LossConfig, p_list):
    pts = x.data
    _check_unit(pts, config.unit_radius_tol)
    n = pts.shape[0]
    M = effective_seed_count(n, config.M)
    all_members, d2 = _balls(pts, M, max(p_list))
    srcs, dsts, dhs, weights, stats = [], [], [], [], []
    for p in p_list:
        members, sizes = _restrict(all_members, d2, p)
        n_hat = p * n
        imbalance = (sizes - n_hat) ** 2 / n_hat
        d_hat = np.full(M, np.nan)
        many = sizes >= 2
        d_hat[many] = np.sqrt(2.0 * math.pi * p / (math.sqrt(3.0) * sizes[many]))
        seed_id, src, dst = _subset_nn(pts, members)
        srcs.append(src)
        dsts.append(dst)
        dhs.append(d_hat[seed_id])
        weights.append(imbalance[seed_id] / d_hat[seed_id])
        stats.append((sizes, seed_id, n_hat, d_hat))
    src, dst = np.concatenate(srcs), np.concatenate(dsts)
    dh, weight = np.concatenate(dhs), np.concatenate(weights)
    if config.uniform_reduction == "mean":
        weight = weight / M
    d = safe_sqrt(sum_axis(square(sub(gather_rows(x, src), gather_rows(x, dst))), -1))
    loss = sum_all(mul(square(sub(d, dh)), weight))
    out_stats, off = [], 0
    for sizes, seed_id, n_hat, d_hat in stats:
        out_stats.append(UniformSubsetStats(sizes, d.data[off:off + seed_id.size].copy(), n_hat, d_hat))
        off += seed_id.size
    return loss, out_stats


def joint_loss(pred, gt, params, config: LossConfig | None = None, return_terms: bool = False):
    """``alpha * chamfer + beta * uniform + gamma * ||theta||^2``.

    ``pred``/``gt`` may be single clouds (M, 3) or batches (B, M, 3); batched
    Chamfer and uniformity terms are averaged over the batch. With
    ``return_terms`` the unweighted term values come back as a dict too.
    """
    config = config or LossConfig()
    p, q = as_array(pred), as_array(gt)
    if p.ndim == 2:
        cd, uni = _sample_terms(p, q, config)
    else:
        B = p.shape[0]
        cd = uni = None
        for b in range(B):
            pb = _row(p, b)
            qb = DiffArray(q.data[b])
            c, u = _sample_terms(pb, qb, config)
            cd = c if cd is None else add(cd, c)
            uni = u if uni is None else add(uni, u)
        cd = mul(cd, 1.0 / B)
        uni = mul(uni, 1.0 / B)
    total = add(mul(cd, config.alpha), mul(uni, config.beta))
    reg = params.sq_norm() if config.gamma else None
    if reg is not None:
        total = add(total, mul(reg, config.gamma))
    if return_terms:
        terms = {"cd": float(cd.data), "uniform": float(uni.data),
                 "sq_norm": float(reg.data) if reg is not None else 0.0}
        return total, terms
    return total


def _row(x: DiffArray, b: int) -> DiffArray:
    from .engine import reshape, slice_axis

    return reshape(slice_axis(x, 0, b, b + 1), x.shape[1:])


def _sample_terms(p: DiffArray, q: DiffArray, config: LossConfig):
    cd = chamfer_loss(p, q, config.delta)
    if config.beta == 0:
        return cd, DiffArray(0.0)
    ps = config.p_list if config.uniform_all_p else config.p_list[:1]
    return cd, uniform_loss_multi(p, config, ps)


# ------------------------------------------------------------------ evaluation metrics


def _nonempty(*clouds) -> list[np.ndarray]:
    out = []
    for c in clouds:
        a = np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)
        if len(a) == 0:
            raise ValueError("metric of an empty cloud")
        out.append(a)
    return out


def metric_cd(a, b, delta: float | None = None) -> float:
    """Symmetric mean squared NN distance; ``delta`` re-enables the training filter."""
    a, b = _nonempty(a, b)
    _, d_ab = kernels.nearest(a, b)
    _, d_ba = kernels.nearest(b, a)
    if delta is not None:
        d_ab = np.where(d_ab <= delta, d_ab, 0.0)
        d_ba = np.where(d_ba <= delta, d_ba, 0.0)
    return float(d_ab.mean() + d_ba.mean())


def metric_hd(a, b) -> float:
    """Symmetric Hausdorff distance (max of the two directed ones)."""
    a, b = _nonempty(a, b)
    _, d_ab = kernels.nearest(a, b)
    _, d_ba = kernels.nearest(b, a)
    return float(math.sqrt(max(d_ab.max(), d_ba.max())))


def metric_p2f(pred, mesh: TriangleMesh) -> float:
    (pred,) = _nonempty(pred)
    return float(np.mean(point_to_mesh_distance(pred, mesh)))


def metric_uniformity(pred, p: float, config: LossConfig | None = None) -> float:
    """Uniformity penalty of a whole cloud after normalizing it to the unit sphere."""
    (pts,) = _nonempty(pred)
    unit = normalize_to_unit_sphere(pts).points
    return float(uniform_loss(DiffArray(unit), config or LossConfig(), p).data)
