"""Pure-Python/numpy implementations of the hot loops.

Mirror of ``_ckernels.pyx``; selected automatically when the compiled
module is unavailable or ``PUEVA_PURE_PYTHON=1`` is set. Both backends must
return bit-identical results.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def _sqdist_rows(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    # explicit left-to-right sum keeps results identical to the C loop
    out = d[:, 0] * d[:, 0]
    for c in range(1, points.shape[1]):
        out = out + d[:, c] * d[:, c]
    return out


def knn(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours of every point, self excluded, ties by lower index."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    d2 = np.empty((n, k), dtype=np.float64)
    ar = np.arange(n)
    for i in range(n):
        row = _sqdist_rows(points, points[i])
        row[i] = np.inf
        if k < n - 1:
            cand = np.argpartition(row, k)[: k + 1]
            # widen the candidate set to every point tied with the k-th distance
            kth = np.sort(row[cand])[k - 1]
            cand = ar[row <= kth]
        else:
            cand = ar[ar != i]
        order = np.lexsort((cand, row[cand]))[:k]
        idx[i] = cand[order]
        d2[i] = row[idx[i]]
    return idx, np.sqrt(d2)


def nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a`` the index of and squared distance to its nearest row of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    idx = np.empty(a.shape[0], dtype=np.int64)
    d2 = np.empty(a.shape[0], dtype=np.float64)
    for i in range(a.shape[0]):
        row = _sqdist_rows(b, a[i])
        j = int(np.argmin(row))
        idx[i] = j
        d2[i] = row[j]
    return idx, d2


def fps(points: np.ndarray, m: int, start: int) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    mind = np.full(points.shape[0], np.inf)
    cur = start
    for s in range(m):
        out[s] = cur
        np.minimum(mind, _sqdist_rows(points, points[cur]), out=mind)
        cur = int(np.argmax(mind))
    return out


def ball_query(points: np.ndarray, seed: np.ndarray, radius: float) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    seed = np.ascontiguousarray(seed, dtype=np.float64)
    d2 = _sqdist_rows(points, seed)
    hit = np.flatnonzero(d2 <= radius * radius)
    return hit[np.lexsort((hit, d2[hit]))].astype(np.int64)


def _segment_sqdist(p, a, b) -> float:
    ux, uy, uz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    px, py, pz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    uu = ux * ux + uy * uy + uz * uz
    t = 0.0
    if uu > 0.0:
        t = min(max((ux * px + uy * py + uz * pz) / uu, 0.0), 1.0)
    dx, dy, dz = px - t * ux, py - t * uy, pz - t * uz
    return dx * dx + dy * dy + dz * dz


def point_triangle_sqdist(p, a, b, c) -> float:
    """Squared distance from ``p`` to triangle ``abc`` (closest-feature classification).

    Degenerate (zero-area) triangles fall back to the nearest of their edges.
    """
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    nx, ny, nz = aby * acz - abz * acy, abz * acx - abx * acz, abx * acy - aby * acx
    if nx * nx + ny * ny + nz * nz == 0.0:
        return min(_segment_sqdist(p, a, b), _segment_sqdist(p, a, c), _segment_sqdist(p, b, c))
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = a[0], a[1], a[2]
    else:
        bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = b[0], b[1], b[2]
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx, qy, qz = a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx, qy, qz = c[0], c[1], c[2]
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx, qy, qz = a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx = b[0] + w * (c[0] - b[0])
            qy = b[1] + w * (c[1] - b[1])
            qz = b[2] + w * (c[2] - b[2])
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            qx = a[0] + abx * v + acx * w
            qy = a[1] + aby * v + acy * w
            qz = a[2] + abz * v + acz * w
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz


def _box_sqdist(p, lo, hi) -> float:
    s = 0.0
    for c in range(3):
        if p[c] < lo[c]:
            t = lo[c] - p[c]
            s += t * t
        elif p[c] > hi[c]:
            t = p[c] - hi[c]
            s += t * t
    return s


# pruning slack; guards against rounding making a box look farther than its triangle
PRUNE_SLACK = 1e-12


def bvh_distance(queries, tris, lo, hi, left, right, start, count, order) -> np.ndarray:
    """Exact point-to-mesh distance via depth-first BVH traversal."""
    out = np.empty(queries.shape[0], dtype=np.float64)
    tris = tris.tolist()
    lo = lo.tolist()
    hi = hi.tolist()
    for qi, p in enumerate(queries.tolist()):
        best = math.inf
        stack = [0]
        while stack:
            node = stack.pop()
            if _box_sqdist(p, lo[node], hi[node]) > best * (1.0 + PRUNE_SLACK):
                continue
            if left[node] < 0:
                for t in order[start[node]: start[node] + count[node]]:
                    a, b, c = tris[t]
                    d = point_triangle_sqdist(p, a, b, c)
                    if d < best:
                        best = d
            else:
                dl = _box_sqdist(p, lo[left[node]], hi[left[node]])
                dr = _box_sqdist(p, lo[right[node]], hi[right[node]])
                # visit the nearer child first
                if dl <= dr:
                    stack.append(right[node])
                    stack.append(left[node])
                else:
                    stack.append(left[node])
                    stack.append(right[node])
        out[qi] = math.sqrt(best)
    return out


def neighbor_max(nbr, ctr, w_dist, idx, dist) -> tuple[np.ndarray, np.ndarray]:
    """``max_k(nbr[idx[:, k]] + ctr + dist[:, k] * w_dist)`` and its lowest-index argmax."""
    N, K = idx.shape
    best = None
    arg = np.zeros((N, ctr.shape[1]), dtype=np.int64)
    for k in range(K):
        z = nbr[idx[:, k]]
        z += ctr
        z += dist[:, k, None] * w_dist
        if best is None:
            best = z
        else:
            upd = z > best
            np.copyto(best, z, where=upd)
            np.copyto(arg, k, where=upd)
    return best, arg


def max_middle(x) -> tuple[np.ndarray, np.ndarray]:
    """Max over axis 1 of a (N, K, C) array with lowest-index argmax."""
    best = x[:, 0].copy()
    arg = np.zeros(best.shape, dtype=np.int64)
    for k in range(1, x.shape[1]):
        upd = x[:, k] > best
        np.copyto(best, x[:, k], where=upd)
        np.copyto(arg, k, where=upd)
    return best, arg


def seed_balls(points, seeds, r2):
    """Members (ascending index, -1 padded) and squared distances of the balls
    of squared radius ``r2`` around each seed point."""
    points = np.asarray(points, dtype=np.float64)
    q = points[np.asarray(seeds, dtype=np.int64)]
    d = q[:, None, 0] - points[None, :, 0]
    d2 = d * d
    for c in (1, 2):
        d = q[:, None, c] - points[None, :, c]
        d2 = d2 + d * d
    inside = d2 <= r2
    counts = inside.sum(axis=1)
    width = max(int(counts.max()) if counts.size else 0, 1)
    mem = np.full((len(q), width), -1, dtype=np.int64)
    dd = np.full((len(q), width), np.inf)
    rows, cols = np.nonzero(inside)
    slot = np.arange(rows.size) - np.searchsorted(rows, rows)
    mem[rows, slot] = cols
    dd[rows, slot] = d2[rows, cols]
    return mem, dd


def subset_nn(points, members):
    """Slot of each member's nearest other member in its row of ``members``
    (-1 entries are padding); -1 for rows with fewer than two members."""
    points = np.asarray(points, dtype=np.float64)
    members = np.asarray(members, dtype=np.int64)
    valid = members >= 0
    pts = points[np.where(valid, members, 0)]
    d = pts[:, :, None, :] - pts[:, None, :, :]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    S = members.shape[1]
    bad = ~(valid[:, :, None] & valid[:, None, :]) | np.eye(S, dtype=bool)[None]
    d2 = np.where(bad, np.inf, d2)
    out = np.argmin(d2, axis=2)
    return np.where(valid & (valid.sum(axis=1)[:, None] >= 2), out, -1)
