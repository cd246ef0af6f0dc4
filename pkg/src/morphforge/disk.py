"""Bijective unit-disk parametrization of disk-topology meshes and barycentric lifting."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .mesh import CompatibleTriangulation, TriMesh, signed_areas, vertex_areas


class EmbeddingError(RuntimeError):
    pass


def _mean_value_weights(V, F):
    """Floater mean-value weights; always positive, so the Tutte-style map is injective."""
    n = len(V)
    rows, cols, vals = [], [], []
    for f in F:
        for k in range(3):
            i, j, l = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            a, b = V[j] - V[i], V[l] - V[i]
            la, lb = np.linalg.norm(a), np.linalg.norm(b)
            ang = np.arccos(np.clip(np.dot(a, b) / (la * lb), -1.0, 1.0))
            t = np.tan(ang / 2)
            # angle at i is adjacent to both edges (i,j) and (i,l)
            rows += [i, i]
            cols += [j, l]
            vals += [t / la, t / lb]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class DiskEmbedding:
    """Source surface with a per-vertex uv map onto the unit disk.

    Holds the forward map (``uv``) and evaluates its inverse by barycentric
    interpolation (``lift``).
    """

    def __init__(self, source: TriMesh, uv: np.ndarray):
        self.source = source
        self.uv = np.asarray(uv, dtype=float)
        F = source.faces
        u0, u1, u2 = self.uv[F[:, 0]], self.uv[F[:, 1]], self.uv[F[:, 2]]
        M = np.stack([u1 - u0, u2 - u0], axis=2)  # (nf, 2, 2), columns are edges
        self._minv = np.linalg.inv(M)
        X = source.vertices
        E3 = np.stack([X[F[:, 1]] - X[F[:, 0]], X[F[:, 2]] - X[F[:, 0]]], axis=2)  # (nf, 3, 2)
        self._dlift = E3 @ self._minv
        self._tree = cKDTree((u0 + u1 + u2) / 3)
        loop = source.boundary_loop
        self._bnd_a = self.uv[loop]
        self._bnd_b = self.uv[np.roll(loop, -1)]
        # face owning each boundary edge
        owner = {}
        for fi, f in enumerate(F):
            for k in range(3):
                owner[(int(f[k]), int(f[(k + 1) % 3]))] = fi
        self._bnd_face = np.array([owner[(int(a), int(b))] for a, b in zip(loop, np.roll(loop, -1))])
        va = vertex_areas(X, F)
        self.vertex_area = va / va.sum()

    @property
    def faces(self):
        return self.source.faces

    def _bary(self, p, fi):
        d = p - self.uv[self.faces[fi, 0]]
        b12 = np.einsum("...ij,...j->...i", self._minv[fi], d)
        return np.concatenate([1 - b12.sum(-1, keepdims=True), b12], axis=-1)

    def locate(self, points):
        """Return (face, barycentric coords, d(point_used)/d(point), outside flag) per query.

        Points outside every uv triangle are projected to the nearest boundary edge.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(p)
        face = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        proj = np.tile(np.eye(2), (n, 1, 1))
        k = min(12, len(self.faces))
        _, cand = self._tree.query(p, k=k)
        cand = cand.reshape(n, k)
        b = self._bary(p[:, None, :], cand)  # (n, k, 3)
        inside = b.min(-1) >= -1e-12
        hit = inside.any(1)
        first = inside.argmax(1)
        face[hit] = cand[hit, first[hit]]
        bary[hit] = b[hit, first[hit]]
        miss = np.where(~hit)[0]
        if len(miss):
            allf = np.arange(len(self.faces))
            bb = self._bary(p[miss, None, :], allf[None, :])  # (m, nf, 3)
            best = bb.min(-1).argmax(1)
            ok = bb[np.arange(len(miss)), best].min(-1) >= -1e-12
            face[miss[ok]] = best[ok]
            bary[miss[ok]] = bb[np.arange(len(miss)), best][ok]
            miss = miss[~ok]
        outside = np.zeros(n, dtype=bool)
        if len(miss):
            outside[miss] = True
            a, bnd = self._bnd_a, self._bnd_b
            seg = bnd - a
            L2 = (seg * seg).sum(1)
            q = p[miss]
            t = ((q[:, None, :] - a[None]) * seg[None]).sum(-1) / L2[None]
            tc = np.clip(t, 0.0, 1.0)
            c = a[None] + tc[..., None] * seg[None]
            d2 = ((q[:, None, :] - c) ** 2).sum(-1)
            j = d2.argmin(1)
            cp = c[np.arange(len(miss)), j]
            fi = self._bnd_face[j]
            face[miss] = fi
            bary[miss] = self._bary(cp, fi)
            tj = t[np.arange(len(miss)), j]
            for m, jj, tt in zip(miss, j, tj):
                if 0.0 < tt < 1.0:
                    u = seg[jj] / np.sqrt(L2[jj])
                    proj[m] = np.outer(u, u)
                else:
                    proj[m] = 0.0
        return face, bary, proj, outside

    def lift(self, points, return_flags=False):
        face, bary, _, outside = self.locate(points)
        X = self.source.vertices[self.faces[face]]  # (n, 3, 3)
        P = np.einsum("nk,nkd->nd", bary, X)
        if np.ndim(points) == 1:
            P, outside = P[0], bool(outside[0])
        return (P, outside) if return_flags else P

    def lift_with_jacobian(self, points):
        """Lifted 3D points, their (n, 3, 2) Jacobians w.r.t. uv, and outside flags."""
        face, bary, proj, outside = self.locate(points)
        X = self.source.vertices[self.faces[face]]
        P = np.einsum("nk,nkd->nd", bary, X)
        J = self._dlift[face] @ proj
        return P, J, outside

    def interpolate(self, values, points):
        """Barycentric interpolation of per-source-vertex scalars at uv points."""
        face, bary, _, _ = self.locate(points)
        return np.einsum("nk,nk->n", bary, np.asarray(values)[self.faces[face]])

    def uv_obj(self) -> str:
        from .mesh import format_obj

        return format_obj(self.source.vertices, self.faces, self.uv)


def embed_to_disk(m: TriMesh) -> DiskEmbedding:
    """Map ``m`` onto the unit disk: boundary by arc length, interior by mean-value weights."""
    V, F = m.vertices, m.faces
    loop = m.boundary_loop
    seg = np.linalg.norm(V[np.roll(loop, -1)] - V[loop], axis=1)
    theta = 2 * np.pi * np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / seg.sum()
    uv = np.zeros((len(V), 2))
    uv[loop] = np.column_stack([np.cos(theta), np.sin(theta)])
    interior = np.where(~m.boundary)[0]
    if len(interior):
        W = _mean_value_weights(V, F)
        L = sp.diags(np.asarray(W.sum(1)).ravel()) - W
        Lii = L[interior][:, interior].tocsc()
        Lib = L[interior][:, loop]
        rhs = -Lib @ uv[loop]
        sol = np.column_stack([spla.spsolve(Lii, rhs[:, k]) for k in range(2)])
        if not np.all(np.isfinite(sol)):
            raise EmbeddingError("singular system while embedding mesh; refine the mesh")
        uv[interior] = sol
    if np.any(signed_areas(uv, F) <= 0):
        raise EmbeddingError("disk embedding has flipped triangles")
    return DiskEmbedding(m, uv)


def init_coarse(embeddings) -> CompatibleTriangulation:
    """Two-triangle start: a square inscribed in the unit circle, shared by every embedding."""
    if len(embeddings) < 2:
        raise ValueError("need at least two target embeddings")
    ang = np.deg2rad([0.0, 90.0, 180.0, 270.0])
    quad = np.column_stack([np.cos(ang), np.sin(ang)])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return CompatibleTriangulation(faces, [quad.copy() for _ in embeddings], quad.copy())
