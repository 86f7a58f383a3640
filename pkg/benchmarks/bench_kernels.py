"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--points 2048]

Prints one row per kernel: best-of-N wall time for each backend and the
speedup. Both backends return identical results; the script checks that too.
"""

import argparse
import sys
import timeit

import numpy as np

from pueva import kernels
from pueva.geometry import MeshBVH, sample_mesh
from pueva.shapes import make_shape


def _cases(n: int, rng: np.random.Generator):
    pts = sample_mesh(make_shape("torus"), n, 0).points
    other = rng.normal(size=(n, 3)) * 0.5
    bvh = MeshBVH(make_shape("capped_paraboloid"))
    queries = rng.normal(size=(n // 4, 3)) * 0.8
    K, C = 12, 64
    idx, dist = kernels.knn(pts, K)
    nbr, ctr, w = rng.normal(size=(n, C)), rng.normal(size=(n, C)), rng.normal(size=C)
    pooled = rng.normal(size=(n, K, C))
    seeds = np.arange(0, n, 8)
    mem, _ = kernels.seed_balls(pts, seeds, 0.01)
    return {
        "knn (K=12)": lambda b: b.knn(pts, K),
        "nearest": lambda b: b.nearest(pts, other),
        "fps (n/4)": lambda b: b.fps(pts, n // 4, 0),
        "ball_query": lambda b: b.ball_query(pts, pts[0], 0.3),
        "bvh_distance": lambda b: b.bvh_distance(queries, bvh.tris, bvh.lo, bvh.hi, bvh.left, bvh.right,
                                                 bvh.start, bvh.count, bvh.order),
        "neighbor_max": lambda b: b.neighbor_max(nbr, ctr, w, idx, dist),
        "max_middle": lambda b: b.max_middle(pooled),
        "seed_balls": lambda b: b.seed_balls(pts, seeds, 0.01),
        "subset_nn": lambda b: b.subset_nn(pts, mem),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=2048)
    args = ap.parse_args(argv)
    py, cy = kernels.python_backend, kernels.compiled_backend
    if cy is None:
        print("compiled kernels are not built; reinstall with Cython available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'python (ms)':>13}{'compiled (ms)':>15}{'speedup':>9}  identical")
    for name, fn in _cases(args.points, rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_py:>13.2f}{t_cy:>15.2f}{t_py / t_cy:>8.1f}x  {_same(fn(py), fn(cy))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
