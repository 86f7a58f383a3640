"""Empirical check that convex combinations of surface neighbours stay within a
second-order error of the surface.

For a height field z = F(x, y) and simplex weights w, the gap
``|sum w_k z_k - F(sum w_k x_k, sum w_k y_k)|`` should shrink like h**2 as the
neighbourhood radius h shrinks, and vanish on planes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .engine import ContractError
from .geometry import PointCloud

SIMPLEX_TOL = 1e-6
ZERO_ERROR = 1e-12
DEFAULT_CENTERS = ((0.3, -0.2), (-0.4, 0.1), (0.15, 0.45), (-0.25, -0.35))
DEFAULT_RADII = (0.2, 0.1, 0.05, 0.025)
# three halvings; enough range for a stable slope fit
MIN_SPAN = 8.0


@dataclass(frozen=True)
class AnalyticSurface:
    name: str
    height: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def plane(a: float = 2.0, b: float = 3.0, c: float = 1.0) -> AnalyticSurface:
    return AnalyticSurface("plane", lambda x, y: a * x + b * y + c,
                           lambda x, y: (np.full_like(x, a), np.full_like(y, b)))


def paraboloid() -> AnalyticSurface:
    return AnalyticSurface("paraboloid", lambda x, y: x * x + y * y, lambda x, y: (2 * x, 2 * y))


def sphere_cap(radius: float = 1.0) -> AnalyticSurface:
    """Upper hemisphere of a sphere centred at the origin (valid for x^2 + y^2 < radius^2)."""

    def height(x, y):
        return np.sqrt(radius * radius - x * x - y * y)

    def gradient(x, y):
        z = height(x, y)
        return -x / z, -y / z

    return AnalyticSurface("sphere_cap", height, gradient)


def sinusoid() -> AnalyticSurface:
    return AnalyticSurface("sinusoid", lambda x, y: np.sin(x) * np.cos(y),
                           lambda x, y: (np.cos(x) * np.cos(y), -np.sin(x) * np.sin(y)))


SURFACES = {"plane": plane, "paraboloid": paraboloid, "sphere_cap": sphere_cap, "sinusoid": sinusoid}


@dataclass
class ErrorSweepResult:
    surface: str
    radii: np.ndarray
    mean_abs_error: np.ndarray
    max_abs_error: np.ndarray
    # nan when every error is zero (see ``zero_error``)
    loglog_slope: float
    zero_error: bool

    def halving_ratios(self) -> np.ndarray:
        """mean error at h divided by mean error at the next (smaller) radius."""
        return self.mean_abs_error[:-1] / self.mean_abs_error[1:]


def sample_neighborhood(surface: AnalyticSurface, center, h: float, K: int, rng_seed=None) -> PointCloud:
    """K surface points whose (x, y) are uniform in the disk of radius h about ``center``."""
    if h <= 0:
        raise ValueError("radius h must be positive")
    if K < 3:
        raise ValueError("need K >= 3 neighbours")
    rng = np.random.default_rng(rng_seed)
    r = h * np.sqrt(rng.random(K))
    t = 2 * math.pi * rng.random(K)
    x = center[0] + r * np.cos(t)
    y = center[1] + r * np.sin(t)
    return PointCloud(np.stack([x, y, surface.height(x, y)], axis=1))


def _check_simplex(weights: np.ndarray) -> None:
    if weights.min() < -SIMPLEX_TOL or abs(weights.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"weights are not on the simplex (min {weights.min():.3g}, sum {weights.sum():.12g})")


def combination_error(surface: AnalyticSurface, neighborhood, weights) -> float:
    """Height gap between the weighted neighbour average and the surface below it."""
    pts = neighborhood.points if isinstance(neighborhood, PointCloud) else np.asarray(neighborhood, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != pts.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} neighbours")
    _check_simplex(w)
    q = w @ pts
    return float(abs(q[2] - surface.height(q[0], q[1])))


def point_to_surface_error(surface: AnalyticSurface, neighborhood, weights) -> float:
    """Euclidean distance from the weighted neighbour average to the surface."""
    pts = neighborhood.points if isinstance(neighborhood, PointCloud) else np.asarray(neighborhood, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    _check_simplex(w)
    q = w @ pts

    def sq(uv):
        d = np.array([uv[0] - q[0], uv[1] - q[1], surface.height(uv[0], uv[1]) - q[2]])
        return float(d @ d)

    def grad(uv):
        z = surface.height(uv[0], uv[1])
        gx, gy = surface.gradient(uv[0], uv[1])
        dz = z - q[2]
        return np.array([2 * (uv[0] - q[0]) + 2 * dz * gx, 2 * (uv[1] - q[1]) + 2 * dz * gy])

    res = minimize(sq, q[:2], jac=grad, method="BFGS", options={"gtol": 1e-14})
    return float(math.sqrt(min(res.fun, sq(q[:2]))))


WeightFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def dirichlet_weights(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(len(points)))


def attention_weights(config=None, rng_seed: int = 0) -> WeightFn:
    """Weights from a randomly initialized attention block.

    The neighbourhood plus its centre form a (K+1)-point cloud; the centre's
    nearest-anchor attention row gives K simplex weights over the others.
    The returned function expects the centre as the first row of ``points``
    and returns weights for the remaining rows in their given order.
    """
    from .network import EvaConfig, EvaParams, forward

    if config is None:
        config = EvaConfig(K=12, R_train=1, growth=8, stem=16, C1=32, C2=32, mlp_widths=(16,))
    params = EvaParams.init(config, rng_seed)

    def fn(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, parts = forward(points, params, config, R=1, anchor_mode="nearest", return_parts=True)
        w = parts["weights"].data[0, 0]
        out = np.zeros(len(points))
        out[parts["graph_idx"][0]] = w
        return out[1:]

    return fn


def taylor_sweep(surface: AnalyticSurface, centers: Sequence = DEFAULT_CENTERS, radii: Sequence[float] = DEFAULT_RADII,
                 K: int = 12, trials: int = 2000, rng_seed: int = 0, weight_fn: WeightFn | None = None,
                 error: str = "height") -> ErrorSweepResult:
    """Mean/max combination error per radius and the fitted log-log slope.

    Each trial draws a fresh neighbourhood around one of ``centers`` (cycled)
    and fresh simplex weights (symmetric Dirichlet unless ``weight_fn`` is
    given). ``error`` is "height" or "distance" (point-to-surface).
    """
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size < 3 or radii.max() / radii.min() < MIN_SPAN * (1 - 1e-9):
        raise ValueError(f"need at least 3 radii spanning a factor of {MIN_SPAN:g}")
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    if trials < 100:
        raise ValueError("need at least 100 trials per radius")
    if error not in ("height", "distance"):
        raise ValueError("error must be 'height' or 'distance'")
    measure = combination_error if error == "height" else point_to_surface_error
    rng = np.random.default_rng(rng_seed)
    means, maxes = [], []
    for h in radii:
        errs = np.empty(trials)
        for t in range(trials):
            c = centers[t % len(centers)]
            nb = sample_neighborhood(surface, c, h, K, rng).points
            if weight_fn is None:
                w = dirichlet_weights(nb, rng)
            else:
                center = np.array([[c[0], c[1], float(surface.height(c[0], c[1]))]])
                w = weight_fn(np.concatenate([center, nb]), rng)
            errs[t] = measure(surface, nb, w)
        means.append(errs.mean())
        maxes.append(errs.max())
    means, maxes = np.array(means), np.array(maxes)
    zero = bool(np.all(means < ZERO_ERROR))
    slope = math.nan if zero else float(np.polyfit(np.log(radii), np.log(means), 1)[0])
    return ErrorSweepResult(surface.name, radii, means, maxes, slope, zero)
