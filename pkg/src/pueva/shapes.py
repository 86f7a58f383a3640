"""Procedural triangle meshes used as the desk-scale dataset.

Every shape fits roughly inside the unit sphere. Parametric surfaces are
triangulated on a regular (u, v) grid; seams are left unwelded, which is
harmless for sampling and point-to-surface distance.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import TriangleMesh

SHAPE_NAMES = ("sphere", "torus", "cylinder", "cone", "cube", "saddle", "ellipsoid", "capped_paraboloid")


def _grid(fn, nu: int, nv: int, u_range, v_range) -> TriangleMesh:
    u = np.linspace(*u_range, nu + 1)
    v = np.linspace(*v_range, nv + 1)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = np.stack(fn(uu, vv), axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    a = (i * (nv + 1) + j).ravel()
    b, c, d = a + nv + 1, a + 1, a + nv + 2
    tris = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriangleMesh(verts, tris)


def _merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def _drop_degenerate(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices, mesh.triangles[mesh.areas() > 1e-14])


def _disk(radius: float, z: float, n: int, flip: bool = False) -> TriangleMesh:
    def f(r, t):
        return r * np.cos(t), r * np.sin(t), np.full_like(r, z)

    m = _grid(f, max(2, n // 4), n, (0.0, radius), (0.0, 2 * math.pi))
    if flip:
        m = TriangleMesh(m.vertices, m.triangles[:, ::-1])
    return _drop_degenerate(m)


def sphere(res: int = 32) -> TriangleMesh:
    return ellipsoid(res, (1.0, 1.0, 1.0))


def ellipsoid(res: int = 32, axes=(1.0, 0.7, 0.5)) -> TriangleMesh:
    a, b, c = axes

    def f(th, ph):
        return a * np.sin(th) * np.cos(ph), b * np.sin(th) * np.sin(ph), c * np.cos(th)

    return _drop_degenerate(_grid(f, res, 2 * res, (0.0, math.pi), (0.0, 2 * math.pi)))


def torus(res: int = 32, major: float = 0.7, minor: float = 0.3) -> TriangleMesh:
    def f(u, v):
        r = major + minor * np.cos(v)
        return r * np.cos(u), r * np.sin(u), minor * np.sin(v)

    return _grid(f, 2 * res, res, (0.0, 2 * math.pi), (0.0, 2 * math.pi))


def cylinder(res: int = 32, radius: float = 0.5, half_height: float = 0.8) -> TriangleMesh:
    def f(t, z):
        return radius * np.cos(t), radius * np.sin(t), z

    side = _grid(f, 2 * res, res, (0.0, 2 * math.pi), (-half_height, half_height))
    return _merge(side, _disk(radius, half_height, 2 * res), _disk(radius, -half_height, 2 * res, flip=True))


def cone(res: int = 32, radius: float = 0.7, height: float = 1.4) -> TriangleMesh:
    z0 = -height / 2

    def f(t, s):
        r = radius * (1 - s)
        return r * np.cos(t), r * np.sin(t), z0 + s * height

    side = _drop_degenerate(_grid(f, 2 * res, res, (0.0, 2 * math.pi), (0.0, 1.0)))
    return _merge(side, _disk(radius, z0, 2 * res, flip=True))


def cube(res: int = 16, half: float = 0.6) -> TriangleMesh:
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            def f(u, v, axis=axis, sign=sign):
                coords = [None, None, None]
                others = [a for a in range(3) if a != axis]
                coords[axis] = np.full_like(u, sign * half)
                coords[others[0]], coords[others[1]] = u, v
                return tuple(coords)

            faces.append(_grid(f, res, res, (-half, half), (-half, half)))
    return _merge(*faces)


def saddle(res: int = 32, half: float = 0.7) -> TriangleMesh:
    def f(x, y):
        return x, y, x * x - y * y

    return _grid(f, res, res, (-half, half), (-half, half))


def capped_paraboloid(res: int = 32, radius: float = 0.8, height: float = 1.0) -> TriangleMesh:
    k = height / radius ** 2
    z0 = -height / 2

    def f(r, t):
        return r * np.cos(t), r * np.sin(t), z0 + k * r * r

    bowl = _drop_degenerate(_grid(f, res, 2 * res, (0.0, radius), (0.0, 2 * math.pi)))
    return _merge(bowl, _disk(radius, z0 + height, 2 * res))


_BUILDERS = {
    "sphere": sphere,
    "torus": torus,
    "cylinder": cylinder,
    "cone": cone,
    "cube": cube,
    "saddle": saddle,
    "ellipsoid": ellipsoid,
    "capped_paraboloid": capped_paraboloid,
}


def make_shape(name: str) -> TriangleMesh:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {', '.join(SHAPE_NAMES)}") from None


def shape_set(names=SHAPE_NAMES) -> dict[str, TriangleMesh]:
    return {n: make_shape(n) for n in names}
