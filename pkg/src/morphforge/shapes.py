"""Procedural target surfaces (disk, dome, saddle, ...) used by tests and the CLI demo."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import TriMesh, validate_disk


def disk_points(rings: int = 6, per_ring: int = 6, radius: float = 1.0) -> np.ndarray:
    """Concentric rings of roughly uniformly spaced points, centre first."""
    pts = [[0.0, 0.0]]
    for r in range(1, rings + 1):
        n = per_ring * r
        a = 2 * np.pi * np.arange(n) / n + (0.5 * np.pi / n if r % 2 else 0.0)
        pts += list(np.column_stack([np.cos(a), np.sin(a)]) * radius * r / rings)
    return np.array(pts)


def disk_mesh(rings: int = 6, per_ring: int = 6, radius: float = 1.0) -> TriMesh:
    p = disk_points(rings, per_ring, radius)
    tri = Delaunay(p)
    faces = tri.simplices.copy()
    v = np.column_stack([p, np.zeros(len(p))])
    return validate_disk(v, faces)


def square_mesh(n: int = 4, size: float = 1.0) -> TriMesh:
    g = np.linspace(0, size, n + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    v = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    faces = []
    for i in range(n):
        for j in range(n):
            a, b = i * (n + 1) + j, (i + 1) * (n + 1) + j
            faces += [[a, b, b + 1], [a, b + 1, a + 1]]
    return validate_disk(v, np.array(faces))


def _lift(base: TriMesh, z) -> TriMesh:
    v = base.vertices.copy()
    v[:, 2] = z(v[:, 0], v[:, 1])
    return TriMesh(v, base.faces.copy(), base.boundary.copy(), base.boundary_loop.copy())


def dome_mesh(rings: int = 6, per_ring: int = 6, height: float = 0.5) -> TriMesh:
    """Spherical cap over the unit disk with the given apex height."""
    R = (1 + height**2) / (2 * height)
    return _lift(disk_mesh(rings, per_ring), lambda x, y: np.sqrt(np.maximum(R**2 - x**2 - y**2, 0)) - (R - height))


def hemisphere_mesh(rings: int = 8, per_ring: int = 6) -> TriMesh:
    """Hemisphere via an equal-angle radial map of the disk."""
    base = disk_mesh(rings, per_ring)
    v = base.vertices.copy()
    r = np.linalg.norm(v[:, :2], axis=1)
    phi = r * np.pi / 2
    scale = np.where(r > 0, np.sin(phi) / np.where(r > 0, r, 1), 0.0)
    v[:, 0] *= scale
    v[:, 1] *= scale
    v[:, 2] = np.cos(phi)
    return TriMesh(v, base.faces.copy(), base.boundary.copy(), base.boundary_loop.copy())


def saddle_mesh(rings: int = 6, per_ring: int = 6, amplitude: float = 0.35) -> TriMesh:
    return _lift(disk_mesh(rings, per_ring), lambda x, y: amplitude * (x**2 - y**2))


def torus_obj(n: int = 8, m: int = 6, R: float = 2.0, r: float = 0.5) -> str:
    """A closed torus, handy for topology rejection tests."""
    lines = []
    for i in range(n):
        for j in range(m):
            u, v = 2 * np.pi * i / n, 2 * np.pi * j / m
            lines.append(f"v {(R + r*np.cos(v))*np.cos(u)} {(R + r*np.cos(v))*np.sin(u)} {r*np.sin(v)}")
    for i in range(n):
        for j in range(m):
            a = i * m + j
            b = ((i + 1) % n) * m + j
            c = ((i + 1) % n) * m + (j + 1) % m
            d = i * m + (j + 1) % m
            lines += [f"f {a+1} {b+1} {c+1}", f"f {a+1} {c+1} {d+1}"]
    return "\n".join(lines) + "\n"
