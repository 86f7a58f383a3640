# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops; API and results identical to ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"

cdef double PRUNE_SLACK = 1e-12


cdef inline double _sqdist(const double[:, ::1] a, Py_ssize_t i,
                           const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t c
    cdef double t, s
    t = a[i, 0] - b[j, 0]
    s = t * t
    for c in range(1, a.shape[1]):
        t = a[i, c] - b[j, c]
        s = s + t * t
    return s


cdef inline bint _before(double da, Py_ssize_t ia, double db, Py_ssize_t ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


def knn(points, Py_ssize_t k):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    idx_arr = np.empty((n, k), dtype=np.int64)
    d_arr = np.empty((n, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] dd = d_arr
    cdef Py_ssize_t i, j, s, filled
    cdef double d
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                d = _sqdist(P, i, P, j)
                if filled == k and not _before(d, j, dd[i, k - 1], idx[i, k - 1]):
                    continue
                # insertion into the sorted prefix
                s = filled if filled < k else k - 1
                while s > 0 and _before(d, j, dd[i, s - 1], idx[i, s - 1]):
                    dd[i, s] = dd[i, s - 1]
                    idx[i, s] = idx[i, s - 1]
                    s -= 1
                dd[i, s] = d
                idx[i, s] = j
                if filled < k:
                    filled += 1
            for s in range(k):
                dd[i, s] = sqrt(dd[i, s])
    return idx_arr, d_arr


def nearest(a, b):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    d_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] dd = d_arr
    cdef Py_ssize_t i, j, bj
    cdef double d, best
    with nogil:
        for i in range(n):
            best = INFINITY
            bj = 0
            for j in range(m):
                d = _sqdist(A, i, B, j)
                if d < best:
                    best = d
                    bj = j
            idx[i] = bj
            dd[i] = best
    return idx_arr, d_arr


def fps(points, Py_ssize_t m, Py_ssize_t start):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    out_arr = np.empty(m, dtype=np.int64)
    if m == 0:
        return out_arr
    cdef cnp.int64_t[::1] out = out_arr
    mind_arr = np.full(n, np.inf)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t s, j, cur = start, nxt
    cdef double d, best
    with nogil:
        for s in range(m):
            out[s] = cur
            best = -1.0
            nxt = 0
            for j in range(n):
                d = _sqdist(P, j, P, cur)
                if d < mind[j]:
                    mind[j] = d
                if mind[j] > best:
                    best = mind[j]
                    nxt = j
            cur = nxt
    return out_arr


def ball_query(points, seed, double radius):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] S = np.ascontiguousarray(seed, dtype=np.float64).reshape(1, -1)
    cdef Py_ssize_t n = P.shape[0], j, cnt = 0
    cdef double r2 = radius * radius
    d2_arr = np.empty(n, dtype=np.float64)
    hit_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] d2 = d2_arr
    cdef cnp.int64_t[::1] hit = hit_arr
    with nogil:
        for j in range(n):
            d2[j] = _sqdist(P, j, S, 0)
            if d2[j] <= r2:
                hit[cnt] = j
                cnt += 1
    hit_arr = hit_arr[:cnt]
    return hit_arr[np.lexsort((hit_arr, d2_arr[hit_arr]))]


cdef inline double _seg_sqdist(const double[::1] p, double ax, double ay, double az,
                              double bx, double by, double bz) noexcept nogil:
    cdef double ux = bx - ax, uy = by - ay, uz = bz - az
    cdef double px = p[0] - ax, py = p[1] - ay, pz = p[2] - az
    cdef double uu = ux * ux + uy * uy + uz * uz
    cdef double t = 0.0, dx, dy, dz
    if uu > 0.0:
        t = (ux * px + uy * py + uz * pz) / uu
        t = min(max(t, 0.0), 1.0)
    dx = px - t * ux; dy = py - t * uy; dz = pz - t * uz
    return dx * dx + dy * dy + dz * dz


cdef double _tri_sqdist(const double[::1] p, const double[:, :, ::1] T, Py_ssize_t t) noexcept nogil:
    cdef double ax = T[t, 0, 0], ay = T[t, 0, 1], az = T[t, 0, 2]
    cdef double bx = T[t, 1, 0], by = T[t, 1, 1], bz = T[t, 1, 2]
    cdef double cx = T[t, 2, 0], cy = T[t, 2, 1], cz = T[t, 2, 2]
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = p[0] - ax, apy = p[1] - ay, apz = p[2] - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double qx, qy, qz, bpx, bpy, bpz, cpx, cpy, cpz, d3, d4, d5, d6, va, vb, vc, v, w, denom
    cdef double dx, dy, dz
    cdef double nx = aby * acz - abz * acy, ny = abz * acx - abx * acz, nz = abx * acy - aby * acx
    if nx * nx + ny * ny + nz * nz == 0.0:
        return min(_seg_sqdist(p, ax, ay, az, bx, by, bz),
                   min(_seg_sqdist(p, ax, ay, az, cx, cy, cz), _seg_sqdist(p, bx, by, bz, cx, cy, cz)))
    if d1 <= 0.0 and d2 <= 0.0:
        qx = ax; qy = ay; qz = az
    else:
        bpx = p[0] - bx; bpy = p[1] - by; bpz = p[2] - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx = p[0] - cx; cpy = p[1] - cy; cpz = p[2] - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx = bx; qy = by; qz = bz
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx = ax + v * abx; qy = ay + v * aby; qz = az + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx = cx; qy = cy; qz = cz
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx = ax + w * acx; qy = ay + w * acy; qz = az + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx = bx + w * (cx - bx); qy = by + w * (cy - by); qz = bz + w * (cz - bz)
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            qx = ax + abx * v + acx * w
            qy = ay + aby * v + acy * w
            qz = az + abz * v + acz * w
    dx = p[0] - qx; dy = p[1] - qy; dz = p[2] - qz
    return dx * dx + dy * dy + dz * dz


def point_triangle_sqdist(p, a, b, c):
    T = np.ascontiguousarray(np.stack([a, b, c])[None], dtype=np.float64)
    return _tri_sqdist(np.ascontiguousarray(p, dtype=np.float64), T, 0)


cdef inline double _box_sqdist(const double[::1] p, const double[:, ::1] lo,
                               const double[:, ::1] hi, Py_ssize_t node) noexcept nogil:
    cdef double s = 0.0, t
    cdef Py_ssize_t c
    for c in range(3):
        if p[c] < lo[node, c]:
            t = lo[node, c] - p[c]
            s += t * t
        elif p[c] > hi[node, c]:
            t = p[c] - hi[node, c]
            s += t * t
    return s


def bvh_distance(queries, tris, lo, hi, left, right, start, count, order):
    cdef const double[:, ::1] Q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, :, ::1] T = np.ascontiguousarray(tris, dtype=np.float64)
    cdef const double[:, ::1] LO = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] HI = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const cnp.int64_t[::1] L = np.ascontiguousarray(left, dtype=np.int64)
    cdef const cnp.int64_t[::1] R = np.ascontiguousarray(right, dtype=np.int64)
    cdef const cnp.int64_t[::1] ST = np.ascontiguousarray(start, dtype=np.int64)
    cdef const cnp.int64_t[::1] CT = np.ascontiguousarray(count, dtype=np.int64)
    cdef const cnp.int64_t[::1] ORD = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t nq = Q.shape[0], nn = LO.shape[0]
    out_arr = np.empty(nq, dtype=np.float64)
    cdef double[::1] out = out_arr
    stack_arr = np.empty(max(nn, 1) + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    cdef Py_ssize_t qi, top, node, t, a, b
    cdef double best, d, dl, dr
    cdef const double[::1] p
    for qi in range(nq):
        p = Q[qi]
        best = INFINITY
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_sqdist(p, LO, HI, node) > best * (1.0 + PRUNE_SLACK):
                continue
            if L[node] < 0:
                for t in range(ST[node], ST[node] + CT[node]):
                    d = _tri_sqdist(p, T, ORD[t])
                    if d < best:
                        best = d
            else:
                a = L[node]
                b = R[node]
                dl = _box_sqdist(p, LO, HI, a)
                dr = _box_sqdist(p, LO, HI, b)
                if dl <= dr:
                    stack[top] = b
                    stack[top + 1] = a
                else:
                    stack[top] = a
                    stack[top + 1] = b
                top += 2
        out[qi] = sqrt(best)
    return out_arr


def neighbor_max(nbr, ctr, w_dist, idx, dist):
    cdef const double[:, ::1] NB = np.ascontiguousarray(nbr, dtype=np.float64)
    cdef const double[:, ::1] CT = np.ascontiguousarray(ctr, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(w_dist, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] I = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[:, ::1] D = np.ascontiguousarray(dist, dtype=np.float64)
    cdef Py_ssize_t N = I.shape[0], K = I.shape[1], C = CT.shape[1]
    best_arr = np.empty((N, C), dtype=np.float64)
    arg_arr = np.zeros((N, C), dtype=np.int64)
    cdef double[:, ::1] best = best_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, k, c, j
    cdef double z, d
    with nogil:
        for i in range(N):
            j = I[i, 0]
            d = D[i, 0]
            for c in range(C):
                z = NB[j, c]
                z = z + CT[i, c]
                z = z + d * W[c]
                best[i, c] = z
            for k in range(1, K):
                j = I[i, k]
                d = D[i, k]
                for c in range(C):
                    z = NB[j, c]
                    z = z + CT[i, c]
                    z = z + d * W[c]
                    if z > best[i, c]:
                        best[i, c] = z
                        arg[i, c] = k
    return best_arr, arg_arr


def max_middle(x):
    """Max over axis 1 of a (N, K, C) array with lowest-index argmax."""
    cdef const double[:, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t N = X.shape[0], K = X.shape[1], C = X.shape[2]
    best_arr = np.empty((N, C), dtype=np.float64)
    arg_arr = np.zeros((N, C), dtype=np.int64)
    cdef double[:, ::1] best = best_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, k, c
    with nogil:
        for i in range(N):
            for c in range(C):
                best[i, c] = X[i, 0, c]
            for k in range(1, K):
                for c in range(C):
                    if X[i, k, c] > best[i, c]:
                        best[i, c] = X[i, k, c]
                        arg[i, c] = k
    return best_arr, arg_arr


def seed_balls(points, seeds, double r2):
    """Members (ascending index, -1 padded) and squared distances of the balls
    of squared radius ``r2`` around each seed point."""
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const cnp.int64_t[::1] sd = np.ascontiguousarray(seeds, dtype=np.int64)
    cdef Py_ssize_t M = sd.shape[0], n = P.shape[0], j, i, c, width = 0
    counts_arr = np.zeros(M, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    with nogil:
        for j in range(M):
            c = 0
            for i in range(n):
                if _sqdist(P, sd[j], P, i) <= r2:
                    c += 1
            counts[j] = c
            if c > width:
                width = c
    mem_arr = np.full((M, max(width, 1)), -1, dtype=np.int64)
    d2_arr = np.full((M, max(width, 1)), np.inf)
    cdef cnp.int64_t[:, ::1] mem = mem_arr
    cdef double[:, ::1] dd = d2_arr
    cdef double d
    with nogil:
        for j in range(M):
            c = 0
            for i in range(n):
                d = _sqdist(P, sd[j], P, i)
                if d <= r2:
                    mem[j, c] = i
                    dd[j, c] = d
                    c += 1
    return mem_arr, d2_arr


def subset_nn(points, members):
    """Slot of each member's nearest other member in its row of ``members``
    (-1 entries are padding); -1 for rows with fewer than two members."""
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] mem = np.ascontiguousarray(members, dtype=np.int64)
    out_arr = np.full((mem.shape[0], mem.shape[1]), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t j, a, b, best, S = mem.shape[1]
    cdef double d, bd
    with nogil:
        for j in range(mem.shape[0]):
            for a in range(S):
                if mem[j, a] < 0:
                    continue
                best = -1
                bd = INFINITY
                for b in range(S):
                    if b == a or mem[j, b] < 0:
                        continue
                    d = _sqdist(P, mem[j, a], P, mem[j, b])
                    if d < bd:
                        bd = d
                        best = b
                out[j, a] = best
    return out_arr
