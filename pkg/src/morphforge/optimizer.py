"""Two-stage discrete/continuous optimization of a compatible triangulation and its flat design."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .disk import DiskEmbedding, embed_to_disk, init_coarse
from .energy import (
    FAB_WEIGHTS,
    MAP_WEIGHTS,
    OptState,
    StageWeights,
    energy_and_gradient,
    make_state,
    refresh_target_lengths,
    total_energy,
)
from .fabrication import ConstraintReport, FabricationLimits, check_constraints, feasible_scale_range
from .graph import MorphTarget, SkeletalGraph, graph_from_flat_mesh
from .mesh import CompatibleTriangulation, RemeshOp, TriMesh, apply_remesh_op, mesh_edges, normalize_unit_area, signed_areas


@dataclass(frozen=True)
class StageConfig:
    name: str
    weights: StageWeights
    iterations: int = 100
    change_topology: bool = True

    def __post_init__(self):
        if self.name not in ("map", "fab"):
            raise ValueError("stage name must be 'map' or 'fab'")
        if self.change_topology != (self.name == "map"):
            raise ValueError("only the map stage may change topology")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def map_stage(iterations: int = 100) -> StageConfig:
    return StageConfig("map", MAP_WEIGHTS, iterations, True)


def fab_stage(iterations: int = 100) -> StageConfig:
    return StageConfig("fab", FAB_WEIGHTS, iterations, False)


@dataclass
class StepInfo:
    kind: str
    energy_before: float
    energy_after: float
    accepted: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# continuous step
# ---------------------------------------------------------------------------


def _uv_slices(state: OptState):
    off = 0
    out = []
    for u in state.tri.uv:
        out.append(slice(off, off + u.size))
        off += u.size
    return out


def _project_to_circle(state: OptState) -> OptState:
    bm = state.tri.boundary_vertices()
    for u in state.tri.uv:
        u[bm] /= np.linalg.norm(u[bm], axis=1, keepdims=True)
    return state


def _tangential(state: OptState, g: np.ndarray) -> np.ndarray:
    """Drop the radial gradient component at uv boundary vertices (they stay on the circle)."""
    g = g.copy()
    bm = state.tri.boundary_vertices()
    for sl, u in zip(_uv_slices(state), state.tri.uv):
        gu = g[sl].reshape(u.shape)
        n = u[bm] / np.linalg.norm(u[bm], axis=1, keepdims=True)
        gu[bm] -= (gu[bm] * n).sum(1, keepdims=True) * n
        g[sl] = gu.ravel()
    return g


def continuous_step(state: OptState, mask=None, max_halvings: int = 30, max_step: float = 0.1):
    """One backtracking line search along the (projected) negative gradient.

    The step is measured as the largest coordinate displacement. Only strict energy
    decrease is accepted; otherwise the input state is returned with ``accepted`` False.
    ``mask`` (bool per variable) freezes the unmasked variables.
    """
    f0, g = energy_and_gradient(state)
    if not math.isfinite(f0):
        raise FloatingPointError("continuous_step needs a state with finite energy")
    g = _tangential(state, g)
    if mask is not None:
        g = np.where(mask, g, 0.0)
    gmax = float(np.abs(g).max()) if g.size else 0.0
    if gmax == 0.0:
        return state, StepInfo("continuous", f0, f0, False, "zero gradient")
    d = -g / gmax
    x0 = state.variables()
    alpha = state.step_size
    for _ in range(max_halvings):
        trial = _project_to_circle(state.with_variables(x0 + alpha * d))
        f1 = total_energy(trial)
        if f1 < f0:
            trial.step_size = min(2 * alpha, max_step)
            return trial, StepInfo("continuous", f0, f1, True)
        alpha *= 0.5
    return state, StepInfo("continuous", f0, f0, False, "line search failed")


# ---------------------------------------------------------------------------
# discrete step
# ---------------------------------------------------------------------------


def candidate_ops(tri: CompatibleTriangulation):
    """Every split, every interior flip and every collapse, in edge-id order."""
    edges = tri.edges()
    interior = _interior_edge_mask(tri.faces, edges)
    ops = []
    for (a, b), inner in zip(edges, interior):
        ops.append(RemeshOp("split", (int(a), int(b))))
        if inner:
            ops.append(RemeshOp("flip", (int(a), int(b))))
        ops.append(RemeshOp("collapse", (int(a), int(b))))
    return ops


def _interior_edge_mask(faces, edges):
    und = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    # np.unique sorts rows the same way mesh_edges does
    return counts == 2


def _changed_vertex_mask(old_faces, new_faces, n):
    old = {tuple(sorted(f)) for f in old_faces.tolist()}
    m = np.zeros(n, dtype=bool)
    for f in new_faces.tolist():
        if tuple(sorted(f)) not in old:
            m[f] = True
    return m


def _variable_mask(state: OptState, vmask):
    parts = [np.repeat(vmask, 2) for _ in state.tri.uv] + [np.repeat(vmask, 2)]
    return np.concatenate(parts)


def _with_tri(state: OptState, tri) -> OptState:
    return refresh_target_lengths(replace(state, tri=tri, target_len=[]))


def discrete_step(state: OptState, rng=None, top_k: int = 4, relax_steps: int = 3, max_accept: int = 2):
    """Greedy pass over remesh candidates ranked by their unrelaxed energy change.

    The best ``top_k`` candidates are locally relaxed (a few masked gradient steps on
    the vertices of the changed faces) and kept only if the total energy strictly
    drops. After each acceptance the remaining candidates are re-applied to the new
    triangulation, which re-validates them.
    """
    f0 = total_energy(state)
    if not state.weights.change_topology:
        return state, StepInfo("discrete", f0, f0, False, "topology frozen")
    rng = rng if rng is not None else np.random.default_rng(0)
    scored = []
    for op in candidate_ops(state.tri):
        tri, reason = apply_remesh_op(state.tri, op)
        if reason is not None:
            continue
        e = total_energy(_with_tri(state, tri))
        if math.isfinite(e):
            scored.append((e - f0, rng.random(), op))
    scored.sort(key=lambda t: (t[0], t[1]))
    cur, fcur = state, f0
    accepted = []
    for _, _, op in scored[:top_k]:
        tri, reason = apply_remesh_op(cur.tri, op)
        if reason is not None:
            continue
        cand = _with_tri(cur, tri)
        vmask = _changed_vertex_mask(cur.tri.faces, tri.faces, tri.n_vertices)
        mask = _variable_mask(cand, vmask)
        for _ in range(relax_steps):
            cand, info = continuous_step(cand, mask=mask)
            if not info.accepted:
                break
        fc = total_energy(cand)
        if fc < fcur:
            cur, fcur = cand, fc
            accepted.append(op.kind)
            if len(accepted) >= max_accept or op.kind == "collapse":
                break  # vertex ids shift after a collapse, so stop revalidating here
    return cur, StepInfo("discrete", f0, fcur, bool(accepted), ",".join(accepted))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def eps2_schedule(k: int, iterations: int, start: float = 0.25) -> float:
    """Linear anneal from ``start`` toward 0; never reaches 0 inside the stage."""
    return start * (1.0 - k / max(iterations, 1))


def run_stage(state: OptState, cfg: StageConfig, rng=None, trace=None, progress=None) -> OptState:
    """``cfg.iterations`` rounds of (discrete step if allowed, then continuous step)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    trace = trace if trace is not None else []
    state = _project_to_circle(replace(state, weights=cfg.weights))
    state = refresh_target_lengths(state)
    for k in range(cfg.iterations):
        if cfg.name == "fab":
            state = replace(state, weights=replace(cfg.weights, eps2=eps2_schedule(k, cfg.iterations)))
        if cfg.change_topology:
            state, info = discrete_step(state, rng)
            trace.append(info)
        state, info = continuous_step(state)
        trace.append(info)
        if progress is not None:
            progress(f"{cfg.name} {k + 1}/{cfg.iterations} E={info.energy_after:.6g} faces={len(state.tri.faces)}")
    return state


def _reseed_flat(state: OptState, target_ratio: float = 0.01) -> OptState:
    """Start the flat mesh from the mean uv embedding, uniformly scaled to barely shrink.

    The scale puts the least-shrinking edge at ``target_ratio``; ratios above the
    band are left to the shrink barrier.
    """
    tri = state.tri.copy()
    flat = np.mean(tri.uv, axis=0)
    if np.any(signed_areas(flat, tri.faces) <= 0):
        flat = tri.uv[0].copy()
    edges = mesh_edges(tri.faces)
    lf = np.linalg.norm(flat[edges[:, 1]] - flat[edges[:, 0]], axis=1)
    lo = np.max([np.linalg.norm(P[edges[:, 1]] - P[edges[:, 0]], axis=1) for P in state.approximations()], axis=0)
    s = float(np.max(lo / lf)) / (1.0 - target_ratio)
    tri.flat = flat * s
    return replace(state, tri=tri)


# ---------------------------------------------------------------------------
# curvature signs
# ---------------------------------------------------------------------------


def vertex_normals(P, faces):
    fn = np.cross(P[faces[:, 1]] - P[faces[:, 0]], P[faces[:, 2]] - P[faces[:, 0]])
    vn = np.zeros_like(P)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)


def edge_bend_degrees(P, faces, edges=None):
    """Signed turning of the surface normal along each edge, in degrees.

    Positive means the surface bends away from its normal along the edge
    (dome-like, cap-shaped when normals point up); a flat mesh gives 0.
    """
    edges = mesh_edges(faces) if edges is None else edges
    n = vertex_normals(P, faces)
    d = P[edges[:, 1]] - P[edges[:, 0]]
    dn = n[edges[:, 1]] - n[edges[:, 0]]
    l = np.linalg.norm(d, axis=1)
    s = (dn * d).sum(1) / l
    c = np.clip((n[edges[:, 1]] * n[edges[:, 0]]).sum(1), -1, 1)
    return np.degrees(np.arccos(c)) * np.sign(s)


def curvature_signs(P, faces, flat=None, threshold_deg: float = 1.0):
    """Per-edge sign in {-1, 0, +1} of the bend relative to the flat mesh."""
    bend = edge_bend_degrees(P, faces)
    if flat is not None:
        F = np.column_stack([flat, np.zeros(len(flat))]) if flat.shape[1] == 2 else flat
        bend = bend - edge_bend_degrees(F, faces)
    return np.where(np.abs(bend) < threshold_deg, 0, np.sign(bend)).astype(np.int64)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


@dataclass
class DesignResult:
    tri: CompatibleTriangulation
    approximations: list  # per target, unit-area design units
    graph: SkeletalGraph
    morph_targets: list
    report: ConstraintReport
    scale_mm: float
    scale_range: tuple
    traces: dict = field(default_factory=dict)
    sources: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.report.ok


def prepare_sources(targets) -> list:
    out = []
    for t in targets:
        if isinstance(t, DiskEmbedding):
            out.append(t)
        else:
            out.append(embed_to_disk(normalize_unit_area(t)))
    return out


def design(
    targets,
    limits: FabricationLimits | None = None,
    scale_mm="auto",
    seed: int = 0,
    iterations=(100, 100),
    target_ids=None,
    delta: float = 0.02,
    progress=None,
) -> DesignResult:
    """Run init, map stage and fab stage, then export the graph and morph targets at ``scale_mm``.

    ``scale_mm`` is millimetres per unit of the unit-area design space, or ``"auto"`` to
    pick the smallest scale at which every flat edge clears the minimum length.
    Infeasibility is reported in ``result.report``; nothing is raised for it.
    """
    limits = limits or FabricationLimits()
    if len(targets) < 2:
        raise ValueError("design needs at least two target meshes")
    rng = np.random.default_rng(seed)
    sources = prepare_sources(targets)
    tri = init_coarse(sources)
    state = make_state(tri, sources, MAP_WEIGHTS)
    traces = {"map": [], "fab": []}
    state = run_stage(state, map_stage(iterations[0]), rng, traces["map"], progress)
    state = _reseed_flat(replace(state, weights=FAB_WEIGHTS))
    state = run_stage(state, fab_stage(iterations[1]), rng, traces["fab"], progress)

    tri = state.tri
    approx = state.approximations()
    edges = mesh_edges(tri.faces)
    flat_len = np.linalg.norm(tri.flat[edges[:, 1]] - tri.flat[edges[:, 0]], axis=1)
    tgt_len = [np.linalg.norm(P[edges[:, 1]] - P[edges[:, 0]], axis=1) for P in approx]
    lo, hi = feasible_scale_range(flat_len, tgt_len, limits)
    if scale_mm == "auto" or scale_mm is None:
        scale = lo * 1.001
    else:
        scale = float(scale_mm)
    graph = graph_from_flat_mesh(tri.flat, tri.faces, scale)
    ids = list(target_ids) if target_ids is not None else [f"target{i}" for i in range(len(approx))]
    mts = []
    for i, (P, L) in enumerate(zip(approx, tgt_len)):
        mts.append(MorphTarget(L * scale, curvature_signs(P, tri.faces, tri.flat), delta, ids[i], P * scale))
    report = check_constraints(graph, mts, limits)
    return DesignResult(tri, approx, graph, mts, report, scale, (lo, hi), traces, sources)


def stderr_progress(msg: str):
    print(msg, file=sys.stderr, flush=True)
