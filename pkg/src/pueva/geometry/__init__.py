from .. import kernels
from .core import (
    AugmentConfig,
    DegenerateInputError,
    MeshBVH,
    NeighborGraph,
    PointCloud,
    TriangleMesh,
    apply_normalization,
    apply_similarity,
    augment,
    ball_query,
    denormalize,
    farthest_point_sample,
    knn,
    min_pairwise_distance,
    normalize_to_unit_sphere,
    pairwise_distances,
    point_to_mesh_distance,
    random_similarity,
    sample_mesh,
    sample_mesh_uniform,
)

__all__ = [
    "kernels",
    "AugmentConfig",
    "DegenerateInputError",
    "MeshBVH",
    "NeighborGraph",
    "PointCloud",
    "TriangleMesh",
    "apply_normalization",
    "apply_similarity",
    "augment",
    "ball_query",
    "denormalize",
    "farthest_point_sample",
    "knn",
    "min_pairwise_distance",
    "normalize_to_unit_sphere",
    "pairwise_distances",
    "point_to_mesh_distance",
    "random_similarity",
    "sample_mesh",
    "sample_mesh_uniform",
]
