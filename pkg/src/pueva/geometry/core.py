"""Point/mesh geometry: neighbourhoods, sampling, normalization, distances.

Nothing in here is differentiable. Ties are always broken towards the lower
index so every routine is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

from .. import kernels


class DegenerateInputError(ValueError):
    """Input geometry has no extent (zero radius, zero area, ...)."""


@dataclass
class PointCloud:
    points: np.ndarray
    # (centroid, scale) of the normalization that produced ``points``
    transform: tuple[np.ndarray, float] | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise IndexError("triangle vertex index out of range")

    @property
    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @cached_property
    def bvh(self) -> "MeshBVH":
        return MeshBVH(self)


@dataclass
class NeighborGraph:
    k: int
    indices: np.ndarray    # (N, k) ascending distance, self excluded
    distances: np.ndarray  # (N, k) Euclidean


def _pts(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.ascontiguousarray(cloud, dtype=np.float64)


def knn(cloud, k: int) -> NeighborGraph:
    pts = _pts(cloud)
    n = pts.shape[0]
    if k < 1 or k > n - 1:
        raise ValueError(f"knn needs 1 <= k <= n-1; got k={k} for {n} points")
    idx, dist = kernels.knn(pts, k)
    return NeighborGraph(k, idx, dist)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    pts = _pts(cloud)
    n = pts.shape[0]
    if m > n:
        raise ValueError(f"cannot pick {m} points from a cloud of {n}")
    if m > 0 and not 0 <= start < n:
        raise IndexError(f"start index {start} out of range")
    return kernels.fps(pts, m, start)


def ball_query(cloud, seed, radius: float) -> np.ndarray:
    if radius <= 0:
        raise ValueError("ball_query radius must be positive")
    return kernels.ball_query(_pts(cloud), np.asarray(seed, dtype=np.float64).reshape(-1), radius)


def normalize_to_unit_sphere(cloud) -> PointCloud:
    pts = _pts(cloud)
    if len(pts) == 0:
        raise ValueError("cannot normalize an empty cloud")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if scale == 0.0:
        raise DegenerateInputError("all points coincide; normalization radius is zero")
    return PointCloud(centered / scale, (centroid, scale))


def apply_normalization(points, transform) -> np.ndarray:
    """Map points into the frame of an existing normalization."""
    centroid, scale = transform
    return (np.asarray(points, dtype=np.float64) - centroid) / scale


def denormalize(cloud: PointCloud, transform=None) -> PointCloud:
    transform = transform if transform is not None else cloud.transform
    if transform is None:
        return PointCloud(cloud.points.copy())
    centroid, scale = transform
    return PointCloud(cloud.points * scale + centroid)


@dataclass
class AugmentConfig:
    rotate: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must lie in (0, inf), got {self.scale_range}")


def random_similarity(rng: np.random.Generator, config: AugmentConfig):
    """Draw (rotation matrix, scale, shift) for :func:`augment`."""
    rot = Rotation.random(random_state=rng).as_matrix() if config.rotate else np.eye(3)
    scale = rng.uniform(*config.scale_range)
    shift = rng.uniform(config.shift_range[0], config.shift_range[1], size=3)
    return rot, scale, shift


def apply_similarity(points, transform) -> np.ndarray:
    rot, scale, shift = transform
    return scale * (np.asarray(points) @ rot.T) + shift


def augment(cloud, rng_seed, config: AugmentConfig | None = None) -> PointCloud:
    config = config or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    return PointCloud(apply_similarity(_pts(cloud), random_similarity(rng, config)))


def sample_mesh(mesh: TriangleMesh, n: int, rng_seed, oversample: int = 4) -> PointCloud:
    """Blue-noise-like surface sampling.

    Draws ``oversample * n`` area-weighted uniform candidates and keeps ``n``
    of them by farthest-point selection.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    cand = sample_mesh_uniform(mesh, oversample * n, rng)
    keep = farthest_point_sample(cand, n, int(rng.integers(len(cand))))
    return PointCloud(cand[keep])


def sample_mesh_uniform(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """Plain area-weighted uniform sampling (no spacing control)."""
    rng = np.random.default_rng(rng)
    areas = mesh.areas()
    usable = areas > 1e-12
    total = areas[usable].sum()
    if total <= 0:
        raise DegenerateInputError("mesh has zero surface area")
    tri_ids = np.flatnonzero(usable)
    pick = rng.choice(tri_ids, size=n, p=areas[usable] / total)
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    c = mesh.corners[pick]
    return c[:, 0] + u[:, :1] * (c[:, 1] - c[:, 0]) + u[:, 1:] * (c[:, 2] - c[:, 0])


class MeshBVH:
    """Axis-aligned bounding volume hierarchy over a triangle mesh.

    Built top-down by median split of triangle centroids along the widest
    axis; leaves hold at most ``leaf_size`` triangles.
    """

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 4):
        if len(mesh.triangles) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.tris = np.ascontiguousarray(mesh.corners)
        tmin = self.tris.min(axis=1)
        tmax = self.tris.max(axis=1)
        cent = self.tris.mean(axis=1)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(self.tris))

        def build(s: int, e: int) -> int:
            node = len(lo)
            ids = order[s:e]
            lo.append(tmin[ids].min(axis=0))
            hi.append(tmax[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            if e - s <= leaf_size:
                return node
            c = cent[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order[s:e] = ids[np.argsort(c[:, axis], kind="stable")]
            mid = (s + e) // 2
            left[node] = build(s, mid)
            right[node] = build(mid, e)
            count[node] = 0
            return node

        build(0, len(order))
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order.astype(np.int64)

    def distance(self, points) -> np.ndarray:
        q = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return kernels.bvh_distance(q, self.tris, self.lo, self.hi, self.left, self.right,
                                    self.start, self.count, self.order)


def point_to_mesh_distance(point, mesh: TriangleMesh):
    """Exact distance(s) from a point or an (n, 3) array of points to the mesh surface."""
    p = np.asarray(point, dtype=np.float64)
    d = mesh.bvh.distance(p)
    return float(d[0]) if p.ndim == 1 else d


def pairwise_distances(points) -> np.ndarray:
    p = _pts(points)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def min_pairwise_distance(points) -> float:
    d = pairwise_distances(points)
    np.fill_diagonal(d, np.inf)
    return float(d.min())
