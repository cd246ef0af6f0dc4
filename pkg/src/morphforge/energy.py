"""Energy terms for compatible-triangulation optimization and their analytic gradients.

Every private ``_*_grad`` helper returns the energy value together with the
gradient with respect to the vertex positions it consumes. Barrier terms return
``math.inf`` on their degeneracy sets; ``inf`` propagates through sums and is
rejected by the line search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .disk import DiskEmbedding
from .mesh import CompatibleTriangulation, TriMesh, mesh_edges

INF = math.inf
_DEGENERATE = 1e-30


@dataclass(frozen=True)
class StageWeights:
    eps_approx: float
    w_map: float
    w_bij: float
    w_boundary: float
    w_tri: float
    w_approx: float
    w_fabmap: float
    w_shrink: float
    change_topology: bool
    eps2: float = 0.25  # shrink softening, annealed to 0 during the fab stage
    eps3: float = 0.005
    r_hat: float = 0.33
    eps_eq: float = 0.3

    def __post_init__(self):
        for name in ("eps_approx", "w_map", "w_bij", "w_boundary", "w_tri", "w_approx", "w_fabmap", "w_shrink"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.eps2 <= 0.25:
            raise ValueError("eps2 must lie in [0, 0.25]")


MAP_WEIGHTS = StageWeights(0.035, 1.0, 1e-5, 1.0, 1.0, 1.0, 0.0, 0.0, True)
FAB_WEIGHTS = StageWeights(0.030, 0.0, 1e-5, 1.0, 1.0, 1.0, 1.0, 200.0, False)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _scatter(n, idx, vals):
    out = np.zeros((n, vals.shape[1]))
    for d in range(vals.shape[1]):
        out[:, d] = np.bincount(idx, weights=vals[:, d], minlength=n)
    return out


def _gram(P, faces):
    e1 = P[faces[:, 1]] - P[faces[:, 0]]
    e2 = P[faces[:, 2]] - P[faces[:, 0]]
    return e1, e2, (e1 * e1).sum(1), (e1 * e2).sum(1), (e2 * e2).sum(1)


def _gram_backward(n, faces, e1, e2, g11, g12, g22):
    """Chain dE/d(a11, a12, a22) back to vertex positions."""
    d1 = 2 * g11[:, None] * e1 + g12[:, None] * e2
    d2 = 2 * g22[:, None] * e2 + g12[:, None] * e1
    idx = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    return _scatter(n, idx, np.concatenate([d1, d2, -d1 - d2]))


def _frame2d(tri):
    """Express a 2D or 3D triangle's edge vectors in an orthonormal in-plane frame."""
    tri = np.asarray(tri, dtype=float)
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    if tri.shape[1] == 2:
        return np.column_stack([e1, e2])
    x = e1 / np.linalg.norm(e1)
    nrm = np.cross(e1, e2)
    y = np.cross(nrm / np.linalg.norm(nrm), x)
    return np.array([[e1 @ x, e2 @ x], [e1 @ y, e2 @ y]])


def jacobian(src, dst) -> np.ndarray:
    """2x2 linear map taking the edge vectors of ``src`` to those of ``dst``.

    3D triangles are first expressed in their own orthonormal frames.
    """
    E = _frame2d(src)
    if abs(np.linalg.det(E)) <= _DEGENERATE:
        raise ValueError("degenerate source triangle")
    return _frame2d(dst) @ np.linalg.inv(E)


# ---------------------------------------------------------------------------
# conformal map distortion
# ---------------------------------------------------------------------------


def _distortion_grad(PA, PB, faces, need_grad=True):
    """sum_t (|J|_F |J^-1|_F - 2)(A_a + A_b) for the per-triangle map A -> B.

    Uses |J|_F |J^-1|_F = tr(adj(G_A) G_B) / sqrt(det G_A det G_B) with G the edge
    Gram matrices, which is symmetric in A and B term by term.
    """
    e1a, e2a, a11, a12, a22 = _gram(PA, faces)
    e1b, e2b, b11, b12, b22 = _gram(PB, faces)
    da = a11 * a22 - a12 * a12
    db = b11 * b22 - b12 * b12
    if np.any(da <= _DEGENERATE) or np.any(db <= _DEGENERATE):
        return INF, None, None
    X = a22 * b11 + a11 * b22 - 2 * a12 * b12
    D = np.sqrt(da * db)
    K = X / D
    sa, sb = np.sqrt(da), np.sqrt(db)
    S = 0.5 * (sa + sb)
    val = float(np.sum(np.maximum(K - 2.0, 0.0) * S))
    if not need_grad:
        return val, None, None
    Km2 = K - 2.0

    def side(x11, x12, x22, y11, y12, y22, dx, sx):
        g11 = (y22 / D - K * x22 / (2 * dx)) * S + Km2 * x22 / (4 * sx)
        g22 = (y11 / D - K * x11 / (2 * dx)) * S + Km2 * x11 / (4 * sx)
        g12 = (-2 * y12 / D + K * x12 / dx) * S - Km2 * x12 / (2 * sx)
        return g11, g12, g22

    gA = _gram_backward(len(PA), faces, e1a, e2a, *side(a11, a12, a22, b11, b12, b22, da, sa))
    gB = _gram_backward(len(PB), faces, e1b, e2b, *side(b11, b12, b22, a11, a12, a22, db, sb))
    return val, gA, gB


def e_map(A, B, faces, w_map: float = 1.0) -> float:
    """Conformal distortion of the piecewise-linear map between two meshes sharing ``faces``."""
    v, _, _ = _distortion_grad(np.asarray(A, float), np.asarray(B, float), np.asarray(faces), need_grad=False)
    return w_map * v if v != INF or w_map == 0 else INF


# ---------------------------------------------------------------------------
# triangle quality
# ---------------------------------------------------------------------------


def _tri_grad(P, faces, target_len, eps_eq, need_grad=True):
    e1, e2, a11, a12, a22 = _gram(P, faces)
    det = a11 * a22 - a12 * a12
    if np.any(det <= _DEGENERATE):
        return INF, None
    L2 = np.asarray(target_len, float) ** 2
    sq = np.sqrt(det)
    At = 0.5 * sq
    Aeq = np.sqrt(3.0) / 4 * L2
    # area term: det(J_eq) = Aeq / At
    q = Aeq / At
    p = At / Aeq
    area = (q - 1) ** 2 * Aeq + (p - 1) ** 2 * At
    # angle term against the equilateral Gram L^2 [[1, 1/2], [1/2, 1]]
    X = L2 * (a11 + a22 - a12)
    D = sq * np.sqrt(0.75) * L2
    K = X / D
    slack = K - (2.0 + eps_eq)
    active = slack > 0
    angle = np.where(active, slack * (At + Aeq), 0.0)
    val = float(np.sum(area + angle))
    if not need_grad:
        return val, None
    dAt = -2 * (q - 1) * Aeq * Aeq / (At * At) + 2 * (p - 1) * At / Aeq + (p - 1) ** 2
    dAt = dAt + np.where(active, slack, 0.0)
    # dAt/d(det) = 1 / (4 sqrt(det)); d(det)/d(a11, a12, a22) = (a22, -2 a12, a11)
    c = dAt / (4 * sq)
    g11, g12, g22 = c * a22, -2 * c * a12, c * a11
    w = np.where(active, At + Aeq, 0.0)
    dKd = -K / (2 * det)
    g11 = g11 + w * (L2 / D + dKd * a22)
    g22 = g22 + w * (L2 / D + dKd * a11)
    g12 = g12 + w * (-L2 / D + dKd * (-2 * a12))
    return val, _gram_backward(len(P), faces, e1, e2, g11, g12, g22)


def e_tri(P, faces, target_len, eps_eq: float = 0.3) -> float:
    """Deviation of every triangle from an equilateral triangle of its target edge length."""
    return _tri_grad(np.asarray(P, float), np.asarray(faces), target_len, eps_eq, need_grad=False)[0]


# ---------------------------------------------------------------------------
# injectivity barrier, boundary, approximation
# ---------------------------------------------------------------------------


def _bij_grad(U, faces, need_grad=True):
    a, b, c = U[faces[:, 0]], U[faces[:, 1]], U[faces[:, 2]]
    sa = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    if np.any(sa <= 0):
        return INF, None
    val = float(np.sum(-np.log(sa)))
    if not need_grad:
        return val, None
    w = (-1.0 / sa)[:, None] * 0.5
    ga = w * np.column_stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0]])
    gb = w * np.column_stack([c[:, 1] - a[:, 1], a[:, 0] - c[:, 0]])
    gc = w * np.column_stack([a[:, 1] - b[:, 1], b[:, 0] - a[:, 0]])
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    return val, _scatter(len(U), idx, np.concatenate([ga, gb, gc]))


def e_bij(U, faces) -> float:
    """Sum of -log(signed area); +inf as soon as any triangle is flat or flipped."""
    return _bij_grad(np.asarray(U, float), np.asarray(faces), need_grad=False)[0]


def _boundary_grad(U, bmask, eps_approx):
    B = U[bmask]
    r = np.linalg.norm(B, axis=1)
    c = 1.0 / (eps_approx**2 * len(B))
    val = float(c * np.sum((r - 1) ** 2))
    g = np.zeros_like(U)
    safe = np.where(r > 0, r, 1.0)
    g[bmask] = (2 * c * (r - 1) / safe)[:, None] * B
    return val, g


def e_boundary(U, bmask, eps_approx: float) -> float:
    """Mean squared radial deviation of boundary vertices from the unit circle, over eps^2."""
    bmask = np.asarray(bmask, bool)
    if not bmask.any():
        raise ValueError("boundary vertex set is empty")
    return _boundary_grad(np.asarray(U, float), bmask, eps_approx)[0]


def _rot(v):
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def _approx_grad(src: DiskEmbedding, U, P, faces, eps_approx, need_grad=True):
    """Area-weighted distance from source vertices to their projections on the approximation.

    Each source vertex is located in the approximation's uv triangulation; points
    outside it use the least-outside triangle with extrapolated barycentrics.
    """
    q = src.uv
    u = U[faces]  # (nf, 3, 2)
    rel = u[None, :, :, :] - q[:, None, None, :]  # (ns, nf, 3, 2)
    n = np.empty(rel.shape[:3])
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        x, y = rel[:, :, i], rel[:, :, j]
        n[:, :, k] = x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]
    S = n.sum(-1)
    b = n / S[..., None]
    f = b.min(-1).argmax(1)
    ar = np.arange(len(q))
    bb, nn, SS, rr = b[ar, f], n[ar, f], S[ar, f], rel[ar, f]
    Pf = P[faces[f]]  # (ns, 3, 3)
    vbar = np.einsum("nk,nkd->nd", bb, Pf)
    diff = src.source.vertices - vbar
    dist = np.linalg.norm(diff, axis=1)
    w = src.vertex_area / eps_approx**2
    val = float(np.sum(w * dist))
    if not need_grad:
        return val, None, None
    unit = np.where(dist[:, None] > 1e-300, diff / np.where(dist > 1e-300, dist, 1.0)[:, None], 0.0)
    gv = -w[:, None] * unit  # dE / d vbar
    gP = _scatter(len(P), faces[f].ravel(), (bb[:, :, None] * gv[:, None, :]).reshape(-1, 3))
    s = np.einsum("nd,nkd->nk", gv, Pf)
    t = (s * bb).sum(1)
    coef = (s - t[:, None]) / SS[:, None]  # (ns, 3)
    gU_local = np.zeros((len(q), 3, 2))
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        # n_k = cross(u_i - q, u_j - q)
        gU_local[:, i] += coef[:, k, None] * _rot(rr[:, j])
        gU_local[:, j] += coef[:, k, None] * (-_rot(rr[:, i]))
    gU = _scatter(len(U), faces[f].ravel(), gU_local.reshape(-1, 2))
    return val, gU, gP


def e_approx(src: DiskEmbedding, U, P, faces, eps_approx: float) -> float:
    """How far source vertices lie from the approximated surface (uv ``U``, lifted ``P``)."""
    return _approx_grad(src, np.asarray(U, float), np.asarray(P, float), np.asarray(faces), eps_approx, False)[0]


# ---------------------------------------------------------------------------
# shrinkage
# ---------------------------------------------------------------------------


def shrink_penalty(r, eps0, eps1, r0=0.005, r1=0.325):
    """Piecewise soft barrier on shrink ratios: 0 on [r0, r1], +inf outside (r0-eps0, r1+eps1)."""
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, INF)
    out[(r >= r0) & (r <= r1)] = 0.0
    lo = (r > r0 - eps0) & (r < r0)
    x = (r[lo] - r0) / eps0
    out[lo] = -np.log1p(x) + x
    hi = (r > r1) & (r < r1 + eps1)
    y = (r[hi] - r1) / eps1
    out[hi] = -np.log1p(-y) - y
    return out


def shrink_softening(r, eps2, eps3=0.005, r_hat=0.33):
    """(eps0, eps1) recomputed from the current ratio extremes."""
    eps0 = max(0.0, eps3 - float(np.min(r))) + eps2
    eps1 = max(0.0, float(np.max(r)) - r_hat + eps3) + eps2
    return eps0, eps1


def _shrink_grad(F, P, edges, eps2, eps3, r_hat, need_grad=True):
    dF = F[edges[:, 1]] - F[edges[:, 0]]
    dP = P[edges[:, 1]] - P[edges[:, 0]]
    lF = np.linalg.norm(dF, axis=1)
    lP = np.linalg.norm(dP, axis=1)
    if np.any(lF <= 0):
        return INF, None, None
    r = 1.0 - lP / lF
    eps0, eps1 = shrink_softening(r, eps2, eps3, r_hat)
    r0, r1 = eps3, r_hat - eps3
    if eps0 <= 0 or eps1 <= 0:
        # eps2 == 0 with every ratio inside the band: plain indicator
        e = np.where((r >= r0) & (r <= r1), 0.0, INF)
        val = float(e.sum())
        if not need_grad or val == INF:
            return val, (None if val == INF else np.zeros_like(F)), (None if val == INF else np.zeros_like(P))
        return val, np.zeros_like(F), np.zeros_like(P)
    e = shrink_penalty(r, eps0, eps1, r0, r1)
    val = float(e.sum())
    if not need_grad or val == INF:
        return val, None, None
    dr = np.zeros_like(r)
    lo = (r > r0 - eps0) & (r < r0)
    x = (r[lo] - r0) / eps0
    dEdx = x / (1 + x)
    dr[lo] = dEdx / eps0
    d_eps0 = float(np.sum(dEdx * (-x / eps0)))
    hi = (r > r1) & (r < r1 + eps1)
    y = (r[hi] - r1) / eps1
    dEdy = y / (1 - y)
    dr[hi] = dEdy / eps1
    d_eps1 = float(np.sum(dEdy * (-y / eps1)))
    # the softening widths depend on the extreme ratios
    if eps3 - r.min() > 0:
        dr[int(np.argmin(r))] += -d_eps0
    if r.max() - r_hat + eps3 > 0:
        dr[int(np.argmax(r))] += d_eps1
    # r = 1 - lP / lF
    gl_P = -dr / lF
    gl_F = dr * lP / lF**2
    uF = dF / lF[:, None]
    uP = dP / np.where(lP > 0, lP, 1.0)[:, None]
    idx = np.concatenate([edges[:, 1], edges[:, 0]])
    gF = _scatter(len(F), idx, np.concatenate([gl_F[:, None] * uF, -gl_F[:, None] * uF]))
    gP = _scatter(len(P), idx, np.concatenate([gl_P[:, None] * uP, -gl_P[:, None] * uP]))
    return val, gF, gP


def e_shrink(flat, target, edges, eps2=0.25, eps3=0.005, r_hat=0.33) -> float:
    """Soft shrink-ratio barrier summed over the edges shared by the flat and a target mesh."""
    return _shrink_grad(np.asarray(flat, float), np.asarray(target, float), np.asarray(edges), eps2, eps3, r_hat, False)[0]


# ---------------------------------------------------------------------------
# sizing field for the triangle-quality term
# ---------------------------------------------------------------------------


def max_abs_curvature(m: TriMesh) -> np.ndarray:
    """Per-vertex max |principal curvature| from a quadric fit over the 2-ring."""
    V, F = m.vertices, m.faces
    n = len(V)
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    vn = _scatter(n, F.ravel(), np.repeat(fn, 3, axis=0))
    vn /= np.linalg.norm(vn, axis=1, keepdims=True)
    ring = [set() for _ in range(n)]
    for f in F:
        for a in f:
            ring[a].update(int(x) for x in f)
    out = np.zeros(n)
    for v in range(n):
        nb = set(ring[v])
        for w in list(ring[v]):
            nb |= ring[w]
        nb.discard(v)
        nb = np.fromiter(nb, dtype=np.int64)
        z = vn[v]
        t1 = np.cross(z, [1.0, 0, 0] if abs(z[0]) < 0.9 else [0, 1.0, 0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(z, t1)
        d = V[nb] - V[v]
        x, y, h = d @ t1, d @ t2, d @ z
        A = np.column_stack([x * x, x * y, y * y, x, y])
        coef = np.linalg.lstsq(A, h, rcond=None)[0]
        a, b, c, gx, gy = coef
        g = 1.0 + gx * gx + gy * gy
        # shape operator of the fitted height field at the origin
        I = np.array([[1 + gx * gx, gx * gy], [gx * gy, 1 + gy * gy]])
        II = np.array([[2 * a, b], [b, 2 * c]]) / np.sqrt(g)
        k = np.linalg.eigvals(np.linalg.solve(I, II)).real
        out[v] = np.abs(k).max()
    return out


def sizing_field(m: TriMesh, eps_approx: float) -> np.ndarray:
    """Curvature-adaptive target edge length per source vertex, clamped around the median edge."""
    kappa = max_abs_curvature(m)
    e = mesh_edges(m.faces)
    med = float(np.median(np.linalg.norm(m.vertices[e[:, 1]] - m.vertices[e[:, 0]], axis=1)))
    with np.errstate(divide="ignore"):
        L = np.where(kappa > 0, np.sqrt(6 * eps_approx / np.where(kappa > 0, kappa, 1.0)), np.inf)
    return np.clip(L, 0.2 * med, 5 * med)


# ---------------------------------------------------------------------------
# optimization state and total energy
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    tri: CompatibleTriangulation
    sources: list
    weights: StageWeights
    sizing: list = field(default_factory=list)  # per-source-vertex target lengths
    target_len: list = field(default_factory=list)  # per target, per face
    step_size: float = 1e-2

    @property
    def n_targets(self) -> int:
        return len(self.sources)

    def lifted(self, i):
        return self.sources[i].lift(self.tri.uv[i])

    def approximations(self):
        return [self.lifted(i) for i in range(self.n_targets)]

    def copy(self, **changes) -> "OptState":
        s = replace(self, tri=self.tri.copy(), target_len=[t.copy() for t in self.target_len])
        return replace(s, **changes) if changes else s

    def variables(self) -> np.ndarray:
        return np.concatenate([u.ravel() for u in self.tri.uv] + [self.tri.flat.ravel()])

    def with_variables(self, x) -> "OptState":
        tri = self.tri.copy()
        off = 0
        for i, u in enumerate(tri.uv):
            k = u.size
            tri.uv[i] = x[off:off + k].reshape(u.shape).copy()
            off += k
        tri.flat = x[off:off + tri.flat.size].reshape(tri.flat.shape).copy()
        return replace(self, tri=tri)


def refresh_target_lengths(state: OptState) -> OptState:
    """Recompute per-face target edge lengths from each source's sizing field."""
    if not state.sizing:
        state.sizing = [sizing_field(s.source, state.weights.eps_approx) for s in state.sources]
    out = []
    for src, L, U in zip(state.sources, state.sizing, state.tri.uv):
        Lv = src.interpolate(L, U)
        out.append(Lv[state.tri.faces].mean(1))
    state.target_len = out
    return state


def make_state(tri, sources, weights, step_size=1e-2) -> OptState:
    s = OptState(tri, list(sources), weights, step_size=step_size)
    return refresh_target_lengths(s)


def energy_terms(state: OptState) -> dict:
    """Each weighted, normalized contribution to the total energy, keyed by name."""
    return _evaluate(state, need_grad=False)[1]


def total_energy(state: OptState) -> float:
    return _evaluate(state, need_grad=False)[0]


def gradient(state: OptState) -> np.ndarray:
    """Analytic gradient of ``total_energy`` over all uv and flat coordinates."""
    val, _, g = _evaluate(state, need_grad=True)
    if not math.isfinite(val):
        raise FloatingPointError("gradient requested at a state with non-finite energy")
    return g


def energy_and_gradient(state: OptState):
    val, _, g = _evaluate(state, need_grad=True)
    return val, g


def _evaluate(state: OptState, need_grad: bool):
    w = state.weights
    tri = state.tri
    faces = tri.faces
    N = state.n_targets
    bmask = tri.boundary_vertices()
    edges = mesh_edges(faces) if w.w_shrink > 0 else None
    lifts = [s.lift_with_jacobian(u) for s, u in zip(state.sources, tri.uv)]
    P = [l[0] for l in lifts]
    gP = [np.zeros_like(p) for p in P]
    gU = [np.zeros_like(u) for u in tri.uv]
    gF = np.zeros_like(tri.flat)
    terms = {}

    def add(name, value):
        terms[name] = terms.get(name, 0.0) + value

    if w.w_map > 0 and N >= 2:
        c = w.w_map / math.comb(N, 2)
        for i, j in combinations(range(N), 2):
            v, ga, gb = _distortion_grad(P[i], P[j], faces, need_grad)
            add("map", c * v)
            if need_grad and ga is not None:
                gP[i] += c * ga
                gP[j] += c * gb
    for i in range(N):
        if w.w_tri > 0:
            v, g = _tri_grad(P[i], faces, state.target_len[i], w.eps_eq, need_grad)
            add("tri", w.w_tri / N * v)
            if need_grad and g is not None:
                gP[i] += w.w_tri / N * g
        if w.w_bij > 0:
            v, g = _bij_grad(tri.uv[i], faces, need_grad)
            add("bij", w.w_bij / N * v)
            if need_grad and g is not None:
                gU[i] += w.w_bij / N * g
        if w.w_boundary > 0:
            v, g = _boundary_grad(tri.uv[i], bmask, w.eps_approx)
            add("boundary", w.w_boundary / N * v)
            if need_grad:
                gU[i] += w.w_boundary / N * g
        if w.w_approx > 0:
            v, gu, gp = _approx_grad(state.sources[i], tri.uv[i], P[i], faces, w.eps_approx, need_grad)
            add("approx", w.w_approx / N * v)
            if need_grad:
                gU[i] += w.w_approx / N * gu
                gP[i] += w.w_approx / N * gp
        if w.w_bij > 0:
            v, g = _bij_grad(tri.flat, faces, need_grad)
            add("fab_bij", w.w_bij / N * v)
            if need_grad and g is not None:
                gF += w.w_bij / N * g
        if w.w_fabmap > 0:
            v, gf, gp = _distortion_grad(tri.flat, P[i], faces, need_grad)
            add("fab_map", w.w_fabmap / N * v)
            if need_grad and gf is not None:
                gF += w.w_fabmap / N * gf
                gP[i] += w.w_fabmap / N * gp
        if w.w_shrink > 0:
            v, gf, gp = _shrink_grad(tri.flat, P[i], edges, w.eps2, w.eps3, w.r_hat, need_grad)
            add("shrink", w.w_shrink / N * v)
            if need_grad and gf is not None:
                gF += w.w_shrink / N * gf
                gP[i] += w.w_shrink / N * gp
    total = 0.0
    for v in terms.values():
        total += v
    if not need_grad or not math.isfinite(total):
        return total, terms, None
    for i in range(N):
        gU[i] += np.einsum("nd,ndk->nk", gP[i], lifts[i][1])
    g = np.concatenate([u.ravel() for u in gU] + [gF.ravel()])
    return total, terms, g
