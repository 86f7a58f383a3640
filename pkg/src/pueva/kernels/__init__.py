"""Backend selection for the hot loops (geometry queries, neighbour max-pooling).

The compiled ``_ckernels`` extension is used when importable; otherwise the
numpy fallback in ``_pykernels`` is. ``PUEVA_PURE_PYTHON=1`` forces the
fallback. Both expose the same functions with identical results.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("PUEVA_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = active.BACKEND

knn = active.knn
nearest = active.nearest
fps = active.fps
ball_query = active.ball_query
bvh_distance = active.bvh_distance
point_triangle_sqdist = active.point_triangle_sqdist
neighbor_max = active.neighbor_max
max_middle = active.max_middle
seed_balls = active.seed_balls
subset_nn = active.subset_nn
