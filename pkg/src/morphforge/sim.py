"""Thermal LCE actuator model and quasi-static bone/muscle simulation with gravity and ground contact.

Bones are two-segment elastic rods (a mid node per edge) with stretch and hinge
bending energies; graph nodes carry joint-angle terms between incident bones.
Muscles are tension-only springs between attachment points offset from the bone
axis, whose rest length follows the actuator temperature. Units: mm, N, g, s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import brentq

from .graph import Edge, MorphTarget, MuscleSlot, SkeletalGraph, graph_from_edges

jax.config.update("jax_enable_x64", True)

AMBIENT_C = 22.0
HOT_C = 120.0
MAX_CONTRACTION = 0.33
SIGMOID_CENTER_C = 80.0
SIGMOID_WIDTH_C = 15.0
G_N_PER_G = 9.81e-3  # weight of one gram in newtons
BOTTOM, TOP = 0, 1
SIDES = {"bottom": BOTTOM, "top": TOP}


# ---------------------------------------------------------------------------
# thermal actuator
# ---------------------------------------------------------------------------


def _logistic(t):
    return 1.0 / (1.0 + np.exp(-(t - SIGMOID_CENTER_C) / SIGMOID_WIDTH_C))


def contraction_fraction(temp_c):
    """Fraction of the maximum contraction reached at ``temp_c``; 0 at ambient, 1 at 120 C."""
    t = np.clip(np.asarray(temp_c, dtype=float), AMBIENT_C, HOT_C)
    lo, hi = _logistic(AMBIENT_C), _logistic(HOT_C)
    return (_logistic(t) - lo) / (hi - lo)


def actuator_rest_length(temp_c, nominal_mm):
    """Muscle rest length: nominal at ambient, 67% of nominal at 120 C and above."""
    if np.any(np.asarray(nominal_mm) <= 0):
        raise ValueError("nominal length must be positive")
    return np.asarray(nominal_mm, dtype=float) * (1.0 - MAX_CONTRACTION * contraction_fraction(temp_c))


@dataclass(frozen=True)
class ThermalParams:
    # one 2 s sweep at full intensity from ambient gives 3% contraction
    tau_heat_s: float = 6.5943
    # slow passive cooling: a heated muscle holds its length over a morph sequence
    tau_cool_s: float = 2000.0
    sweep_time_s: float = 2.0
    cool_time_s: float = 60.0  # window during which a heated muscle counts as hot

    @property
    def capacity(self) -> int:
        return int(math.floor(self.cool_time_s / self.sweep_time_s))


@dataclass
class ThermalActuatorState:
    nominal_mm: float
    temperature: float = AMBIENT_C
    params: ThermalParams = field(default_factory=ThermalParams)

    @property
    def rest_fraction(self) -> float:
        return float(1.0 - MAX_CONTRACTION * contraction_fraction(self.temperature))

    @property
    def rest_length(self) -> float:
        return self.nominal_mm * self.rest_fraction


def relax_temperature(temp, heating, dt, intensity=1.0, params: ThermalParams = ThermalParams()):
    """Exact first-order lag toward 120 C (heated) or ambient (cooling); vectorized."""
    temp = np.asarray(temp, dtype=float)
    heating = np.asarray(heating, dtype=bool)
    inten = np.clip(np.asarray(intensity, dtype=float), 0.0, 1.0)
    rate = np.where(heating, inten / params.tau_heat_s, 1.0 / params.tau_cool_s)
    goal = np.where(heating & (inten > 0), HOT_C, AMBIENT_C)
    return goal + (temp - goal) * np.exp(-dt * rate)


def thermal_step(s: ThermalActuatorState, heating, dt: float, intensity: float = 1.0) -> ThermalActuatorState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    t = float(relax_temperature(s.temperature, bool(heating), dt, intensity, s.params))
    return replace(s, temperature=t)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

MATERIAL_FACTOR = {"flexible": 1.0, "rigid": 100.0}
DENSITY_G_PER_MM3 = {"flexible": 1.21e-3, "rigid": 1.24e-3}


@dataclass(frozen=True)
class Calibration:
    k_muscle: float = 3.0  # N per unit strain; 33% blocked contraction gives about 1 N
    k_stretch: float = 0.1  # N per unit strain, reference bone
    k_bend: float = 10.0  # N mm per unit squared curvature, reference bone
    k_joint_ratio: float = 1.0  # joint stiffness relative to the bone's bend stiffness
    lateral_bend_ratio: float = 100.0  # bones bend preferentially toward their muscles, not sideways
    offset_ratio: float = 0.5  # muscle offset from the bone axis, in bone radii
    ref_radius_mm: float = 2.0
    ref_length_mm: float = 50.0
    contact_k: float = 1e4  # N/mm
    shrink_target: float = 0.675
    bend_target_deg: float = 90.0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _calibration_path():
    return resources.files("morphforge").joinpath("data/calibration.json")


@lru_cache(maxsize=1)
def load_calibration() -> Calibration:
    try:
        d = json.loads(_calibration_path().read_text())
    except FileNotFoundError:
        return Calibration()
    return Calibration(**d)


# ---------------------------------------------------------------------------
# quasi-static model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Environment:
    gravity: bool = True
    ground: bool = True
    ground_z: float = 0.0
    gravity_scale: float = 1.0


@dataclass
class BoneModel:
    """Static arrays describing a graph's elastic model."""

    graph: SkeletalGraph
    x0: np.ndarray  # (n + m, 3) rest positions, mid nodes last
    edges: np.ndarray
    seg: np.ndarray  # (2m, 2)
    seg_rest: np.ndarray
    k_s: np.ndarray
    k_b: np.ndarray
    h: np.ndarray
    joints: np.ndarray  # (p, 3): node, first-seg node of bone 1, of bone 2
    joint_rest: np.ndarray
    k_j: np.ndarray
    muscle_nominal: np.ndarray  # (m, 2)
    muscle_present: np.ndarray  # (m, 2)
    mass: np.ndarray
    cal: Calibration

    @property
    def n_nodes(self):
        return self.graph.n_nodes


def _unit(v):
    return v / jnp.sqrt(jnp.sum(v * v, axis=-1, keepdims=True))


def _attachment_normal(t):
    z = jnp.array([0.0, 0.0, 1.0])
    n = z - (t @ z)[..., None] * t
    return _unit(n)


def _muscle_lengths(X, edges, n, h):
    """Muscle path lengths (m, 2): each muscle follows its bone through the mid node at offset h.

    Offsets are taken along the vertical attachment normal of each bone segment, so bending
    in the ground plane leaves a muscle's length unchanged and only bending toward the muscle
    side shortens it.
    """
    a = X[edges[:, 0]]
    b = X[edges[:, 1]]
    mid = X[n + jnp.arange(len(edges))]
    t1 = _unit(mid - a)
    t2 = _unit(b - mid)
    na = _attachment_normal(t1)
    nb = _attachment_normal(t2)
    nm = _attachment_normal(_unit(t1 + t2))
    # side 0 (bottom) sits below the bone, side 1 (top) above
    sgn = jnp.array([-1.0, 1.0])[None, :, None]
    hh = h[:, None, None]
    p = a[:, None, :] + sgn * hh * na[:, None, :]
    c = mid[:, None, :] + sgn * hh * nm[:, None, :]
    q = b[:, None, :] + sgn * hh * nb[:, None, :]
    return jnp.sqrt(jnp.sum((c - p) ** 2, axis=-1)) + jnp.sqrt(jnp.sum((q - c) ** 2, axis=-1))


def _tan_half_sq(d1, d2):
    """tan^2 of half the turning angle between direction d1 and the continuation -d2."""
    c = jnp.cross(d1, d2)
    return jnp.sum(c * c, axis=-1) / (1.0 - jnp.sum(d1 * d2, axis=-1)) ** 2


def build_model(graph: SkeletalGraph, cal: Calibration | None = None, positions=None) -> BoneModel:
    cal = cal or load_calibration()
    P = graph.nodes if positions is None else np.asarray(positions, dtype=float)
    E = graph.edge_index()
    n, m = len(P), len(E)
    mids = 0.5 * (P[E[:, 0]] + P[E[:, 1]])
    x0 = np.vstack([P, mids])
    seg = np.concatenate([np.column_stack([E[:, 0], n + np.arange(m)]), np.column_stack([n + np.arange(m), E[:, 1]])])
    seg_rest = np.linalg.norm(x0[seg[:, 1]] - x0[seg[:, 0]], axis=1)
    r = np.array([e.radius_mm for e in graph.edges])
    mat = np.array([MATERIAL_FACTOR.get(e.material, 1.0) for e in graph.edges])
    k_s = cal.k_stretch * mat * (r / cal.ref_radius_mm) ** 2
    k_b = cal.k_bend * mat * (r / cal.ref_radius_mm) ** 4
    h = cal.offset_ratio * r
    joints, k_j = [], []
    inc = [[] for _ in range(n)]
    for ei, (a, b) in enumerate(E):
        inc[a].append(ei)
        inc[b].append(ei)
    for v in range(n):
        for i in range(len(inc[v])):
            for j in range(i + 1, len(inc[v])):
                e1, e2 = inc[v][i], inc[v][j]
                joints.append([v, n + e1, n + e2])
                k_j.append(cal.k_joint_ratio * 0.5 * (k_b[e1] + k_b[e2]))
    joints = np.array(joints, dtype=np.int64).reshape(-1, 3)
    if len(joints):
        d1 = x0[joints[:, 1]] - x0[joints[:, 0]]
        d2 = x0[joints[:, 2]] - x0[joints[:, 0]]
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
        joint_rest = np.sqrt(np.asarray(_tan_half_sq(jnp.asarray(d1), jnp.asarray(d2))))
    else:
        joint_rest = np.zeros(0)
    nominal = np.asarray(_muscle_lengths(jnp.asarray(x0), jnp.asarray(E), n, jnp.asarray(h)))
    present = np.array([[e.bottom.present, e.top.present] for e in graph.edges], dtype=bool).reshape(m, 2)
    dens = np.array([DENSITY_G_PER_MM3.get(e.material, 1.2e-3) for e in graph.edges])
    me = dens * np.pi * r**2 * graph.rest_lengths()
    mass = np.zeros(n + m)
    np.add.at(mass, E[:, 0], 0.25 * me)
    np.add.at(mass, E[:, 1], 0.25 * me)
    mass[n:] += 0.5 * me
    return BoneModel(graph, x0, E, seg, seg_rest, k_s, k_b, h, joints, joint_rest, np.array(k_j), nominal, present, mass, cal)


def _energy_fn(model: BoneModel):
    n = model.n_nodes
    E = jnp.asarray(model.edges)
    m = len(model.edges)
    seg = jnp.asarray(model.seg)
    seg_rest = jnp.asarray(model.seg_rest)
    k_s = jnp.asarray(np.concatenate([model.k_s, model.k_s]))
    k_b = jnp.asarray(model.k_b)
    k_lat = k_b * (model.cal.lateral_bend_ratio - 1.0)
    h = jnp.asarray(model.h)
    J = jnp.asarray(model.joints)
    jr = jnp.asarray(model.joint_rest)
    k_j = jnp.asarray(model.k_j)
    nominal = jnp.asarray(model.muscle_nominal)
    present = jnp.asarray(model.muscle_present, dtype=float)
    mass = jnp.asarray(model.mass)
    km = model.cal.k_muscle
    kc = model.cal.contact_k

    def energy(x, rest_frac, gz, ground_on, ground_z):
        X = x.reshape(-1, 3)
        d = X[seg[:, 1]] - X[seg[:, 0]]
        l = jnp.sqrt(jnp.sum(d * d, axis=1))
        e = 0.5 * jnp.sum(k_s * (l - seg_rest) ** 2 / seg_rest)
        u = d[:m] / l[:m, None]
        v = d[m:] / l[m:, None]
        # hinge at the mid node: straight at rest, (2 tan(theta/2))^2 curvature measure
        e += 0.5 * jnp.sum(k_b * 4.0 * _tan_half_sq(u, -v))
        # extra stiffness against sideways bending (rotation axis along the attachment normal)
        nz = _attachment_normal(_unit(X[E[:, 1]] - X[E[:, 0]]))
        lat = jnp.sum(jnp.cross(u, v) * nz, axis=1) / (1.0 + jnp.sum(u * v, axis=1))
        e += 0.5 * jnp.sum(k_lat * 4.0 * lat * lat)
        if J.shape[0]:
            d1 = _unit(X[J[:, 1]] - X[J[:, 0]])
            d2 = _unit(X[J[:, 2]] - X[J[:, 0]])
            t2 = _tan_half_sq(d1, d2)
            straight = jr < 1e-9
            t = jnp.sqrt(jnp.where(straight, 1.0, t2))
            dev = jnp.where(straight, t2, (t - jr) ** 2)
            e += 0.5 * jnp.sum(k_j * 4.0 * dev)
        ml = _muscle_lengths(X, E, n, h)
        r0 = nominal * rest_frac
        stretch = jnp.maximum(ml - r0, 0.0)
        e += 0.5 * km * jnp.sum(present * stretch**2 / r0)
        e += gz * jnp.sum(mass * X[:, 2])
        pen = jnp.minimum(X[:, 2] - ground_z, 0.0)
        e += ground_on * 0.5 * kc * jnp.sum(pen * pen)
        return e

    return energy


@dataclass
class SolveResult:
    positions: np.ndarray  # graph node positions (n, 3)
    x: np.ndarray  # all nodes, mid nodes last
    converged: bool
    iterations: int
    residual: float
    energy_trace: list


class QuasiStaticSolver:
    """Damped Newton with backtracking line search on the total potential.

    A stationary point with a clearly negative Hessian eigenvalue is a saddle (a flat
    sheet under in-plane load is the common case); the solver then steps along that
    eigenvector, oriented upward for determinism, and resumes Newton.
    """

    def __init__(self, model: BoneModel, env: Environment = Environment(), tol: float = 1e-6, max_iter: int = 200, max_escapes: int = 20):
        self.model = model
        self.env = env
        self.tol = tol
        self.max_iter = max_iter
        self.max_escapes = max_escapes
        f = _energy_fn(model)
        self._e = jax.jit(f)
        self._g = jax.jit(jax.grad(f))
        self._h = jax.jit(jax.hessian(f))

    def _args(self, rest_frac):
        env = self.env
        gz = G_N_PER_G * env.gravity_scale if env.gravity else 0.0
        return jnp.asarray(rest_frac, dtype=float), gz, 1.0 if env.ground else 0.0, env.ground_z

    def energy(self, x, rest_frac):
        return float(self._e(jnp.asarray(x).ravel(), *self._args(rest_frac)))

    def _escape(self, x, f, args):
        """Energy-decreasing step along a direction of negative curvature, or None.

        Contact is one-sided, so its penalty stiffness is left out of the curvature and
        points touching the ground may only move up. The direction minimizes the Rayleigh
        quotient under that sign constraint (projected descent from the lowest mode); the
        full energy decides whether the step is taken.
        """
        H = np.asarray(self._h(x, args[0], args[1], 0.0, args[3]))
        scale = max(1.0, float(np.abs(np.diag(H)).max()))
        lam, vec = np.linalg.eigh(H)
        if lam[0] > -1e-7 * scale:
            return None
        X = np.asarray(x).reshape(-1, 3)
        zi = 3 * np.arange(len(X)) + 2
        touching = zi[X[:, 2] <= args[3] + 1e-3] if args[2] else zi[:0]

        def project(v):
            v = v.copy()
            v[touching] = np.maximum(v[touching], 0.0)
            nv = np.linalg.norm(v)
            return v / nv if nv > 0 else v

        v = vec[:, 0]
        if v[zi].sum() < 0:
            v = -v
        v = project(v)
        step = 0.5 / max(abs(lam[-1]), abs(lam[0]))
        for _ in range(500):
            hv = H @ v
            v = project(v - step * (hv - (v @ hv) * v))
        if not v @ H @ v < -1e-7 * scale:
            return None
        v = v / np.abs(v).max()
        t = 8.0  # mm of largest displacement
        for _ in range(30):
            xn = x + t * jnp.asarray(v)
            fn = float(self._e(xn, *args))
            if np.isfinite(fn) and fn < f - 1e-12 * max(1.0, abs(f)):
                return xn, fn
            t *= 0.5
        return None

    def solve(self, rest_frac=None, x0=None) -> SolveResult:
        m = self.model
        if rest_frac is None:
            rest_frac = np.ones((len(m.edges), 2))
        args = self._args(rest_frac)
        x = jnp.asarray(m.x0 if x0 is None else x0, dtype=float).ravel()
        f = float(self._e(x, *args))
        trace = [f]
        mu = 1e-6
        it = 0
        res = math.inf
        escapes = 0
        for it in range(1, self.max_iter + 1):
            g = self._g(x, *args)
            res = float(jnp.max(jnp.abs(g)))
            if res < self.tol:
                out = self._escape(x, f, args) if escapes < self.max_escapes else None
                if out is None:
                    it -= 1
                    break
                escapes += 1
                x, f = out
                trace.append(f)
                continue
            H = np.asarray(self._h(x, *args))
            gn = np.asarray(g)
            scale = max(1.0, float(np.abs(np.diag(H)).max()))
            step_ok = False
            for _ in range(40):
                try:
                    d = np.linalg.solve(H + mu * scale * np.eye(len(gn)), -gn)
                except np.linalg.LinAlgError:
                    mu *= 10
                    continue
                if gn @ d < 0:
                    break
                mu *= 10
            t = 1.0
            for _ in range(40):
                xn = x + t * jnp.asarray(d)
                fn = float(self._e(xn, *args))
                if np.isfinite(fn) and fn <= f + 1e-4 * t * float(gn @ d):
                    step_ok = True
                    break
                t *= 0.5
            if not step_ok:
                mu *= 10
                if mu > 1e6:
                    break
                continue
            x, f = xn, fn
            trace.append(f)
            mu = max(mu / 3.0, 1e-12) if t == 1.0 else min(mu * 2.0, 1e6)
        else:
            g = self._g(x, *args)
            res = float(jnp.max(jnp.abs(g)))
        X = np.asarray(x).reshape(-1, 3)
        return SolveResult(X[: m.n_nodes].copy(), X, res < self.tol, it, res, trace)


def quasi_static_solve(graph: SkeletalGraph, rest_frac=None, env: Environment = Environment(), cal=None, x0=None):
    """Equilibrium node positions for per-muscle rest fractions of shape (edges, 2) [bottom, top]."""
    return QuasiStaticSolver(build_model(graph, cal), env).solve(rest_frac, x0)


def bend_angle_deg(x, model: BoneModel, edge: int = 0) -> float:
    """Signed turning angle at a bone's mid node; positive when it arches up (cap shaped)."""
    X = np.asarray(x).reshape(-1, 3)
    a, b = model.edges[edge]
    mid = X[model.n_nodes + edge]
    u, v = mid - X[a], X[b] - mid
    ang = math.degrees(math.acos(np.clip(u @ v / np.linalg.norm(u) / np.linalg.norm(v), -1, 1)))
    chord_mid = 0.5 * (X[a] + X[b])
    return ang if mid[2] >= chord_mid[2] else -ang


def building_block(length_mm=None, radius_mm=None, material="flexible") -> SkeletalGraph:
    cal = load_calibration()
    L = cal.ref_length_mm if length_mm is None else length_mm
    r = cal.ref_radius_mm if radius_mm is None else radius_mm
    return graph_from_edges(np.array([[0.0, 0, 0], [L, 0, 0]]), [(0, 1)], material, r)


def block_response(cal: Calibration, bottom: float, top: float, length_mm=None):
    """Solve a free building block (no gravity, no ground) at the given muscle contractions."""
    g = graph_from_edges(np.array([[0.0, 0, 0], [length_mm or cal.ref_length_mm, 0, 0]]), [(0, 1)], "flexible", cal.ref_radius_mm)
    model = build_model(g, cal)
    solver = QuasiStaticSolver(model, Environment(gravity=False, ground=False), tol=1e-9, max_iter=400)
    res = solver.solve(np.array([[1.0 - bottom, 1.0 - top]]))
    ratio = float(np.linalg.norm(res.positions[1] - res.positions[0]) / g.edges[0].rest_mm)
    return ratio, bend_angle_deg(res.x, model), res


def calibrate(base: Calibration | None = None) -> Calibration:
    """Fit stretch stiffness to the two-muscle shrink target, then bend stiffness to the bend target."""
    base = base or Calibration()

    def shrink_gap(logk):
        return block_response(replace(base, k_stretch=math.exp(logk)), MAX_CONTRACTION, MAX_CONTRACTION)[0] - base.shrink_target

    ks = math.exp(brentq(shrink_gap, math.log(1e-4), math.log(1e2), xtol=1e-10))
    cal = replace(base, k_stretch=ks)

    def bend_gap(logk):
        return block_response(replace(cal, k_bend=math.exp(logk)), MAX_CONTRACTION, 0.0)[1] - base.bend_target_deg

    kb = math.exp(brentq(bend_gap, math.log(1e-6), math.log(1e5), xtol=1e-10))
    return replace(cal, k_bend=kb)


def save_calibration(cal: Calibration, path=None):
    path = path or _calibration_path()
    with open(path, "w") as fh:
        json.dump(cal.to_dict(), fh, indent=1)
    load_calibration.cache_clear()


# ---------------------------------------------------------------------------
# simulated robot used as the scheduler's feedback source
# ---------------------------------------------------------------------------


class SimulatedRobot:
    """Thermal state per muscle plus a warm-started quasi-static solve after every change.

    Implements the feedback interface used by the morph scheduler: ``lengths()``,
    ``apply(packets)`` and ``wait(dt)``.
    """

    def __init__(self, graph: SkeletalGraph, env: Environment = Environment(), params: ThermalParams = ThermalParams(), cal=None):
        self.graph = graph
        self.params = params
        self.model = build_model(graph, cal)
        self.solver = QuasiStaticSolver(self.model, env)
        m = len(graph.edges)
        self.temps = np.full((m, 2), AMBIENT_C)
        self.time_s = 0.0
        self._lookup = _muscle_lookup(graph)
        self.unconverged = 0
        self.solves = 0
        self._x = self.model.x0.copy()
        self._resolve()

    def rest_fractions(self):
        return 1.0 - MAX_CONTRACTION * contraction_fraction(self.temps)

    def _resolve(self):
        res = self.solver.solve(self.rest_fractions(), self._x)
        self.solves += 1
        if not res.converged:
            self.unconverged += 1
        self._x = res.x
        self.last = res

    @property
    def positions(self):
        return self._x[: self.graph.n_nodes]

    def lengths(self):
        return self.graph.lengths(self.positions)

    def _cool_all(self, dt):
        if dt > 0:
            self.temps = relax_temperature(self.temps, False, dt, params=self.params)

    def apply(self, packets):
        """Sweep each packet in turn; every other muscle cools meanwhile."""
        for p in packets:
            edge, side = self._lookup.muscle_for(p)
            dur = p.duration_s
            heat = np.zeros_like(self.temps, dtype=bool)
            heat[edge, side] = True
            self.temps = relax_temperature(self.temps, heat, dur, p.intensity, self.params)
            self.time_s += dur
        self._resolve()

    def wait(self, dt):
        self._cool_all(dt)
        self.time_s += dt
        self._resolve()


class _MuscleLookup:
    def __init__(self, table):
        self.table = table

    def muscle_for(self, packet):
        key = _packet_key(packet.start, packet.end)
        if key not in self.table:
            raise KeyError("packet does not match any muscle of the graph")
        return self.table[key]


def _packet_key(start, end):
    return tuple(np.round(np.asarray(start, dtype=np.float32), 2)) + tuple(np.round(np.asarray(end, dtype=np.float32), 2))


def muscle_segment(graph: SkeletalGraph, edge: int, side: int, cal: Calibration | None = None):
    """Laser target segment for one muscle, in flat mm coordinates (offset beside the bone)."""
    cal = cal or load_calibration()
    e = graph.edges[edge]
    lo, hi = sorted((e.a, e.b))
    a, b = graph.nodes[lo], graph.nodes[hi]
    t = (b - a) / np.linalg.norm(b - a)
    left = np.cross([0.0, 0.0, 1.0], t)
    if np.linalg.norm(left) < 1e-9:
        left = np.array([0.0, 1.0, 0.0])
    left /= np.linalg.norm(left)
    # bottom muscle on the left of the low-to-high direction, top on the right
    off = (cal.offset_ratio * e.radius_mm + 1.0) * (left if side == BOTTOM else -left)
    return a + off, b + off


def _muscle_lookup(graph: SkeletalGraph):
    table = {}
    for i in range(len(graph.edges)):
        for s in (BOTTOM, TOP):
            p, q = muscle_segment(graph, i, s)
            table[_packet_key(p, q)] = (i, s)
    return _MuscleLookup(table)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def kabsch_align(P, Q):
    """Rigidly move P onto Q (least squares); returns the aligned copy of P."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    pc, qc = P.mean(0), Q.mean(0)
    H = (P - pc).T @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return (P - pc) @ R.T + qc


@dataclass
class VerificationReport:
    final_mm: np.ndarray
    target_mm: np.ndarray
    delta: float
    max_node_err_mm: float | None
    converged: bool
    epochs: int
    positions: np.ndarray | None = None

    @property
    def err(self):
        return (self.final_mm - self.target_mm) / self.target_mm

    @property
    def ok(self) -> bool:
        return bool(np.all(np.abs(self.err) <= self.delta))

    def to_dict(self):
        return {
            "per_edge": [
                {"edge_id": i, "final_mm": float(f), "target_mm": float(t), "err": float(e)}
                for i, (f, t, e) in enumerate(zip(self.final_mm, self.target_mm, self.err))
            ],
            "max_node_err_mm": self.max_node_err_mm,
            "converged": self.converged,
            "epochs": self.epochs,
            "ok": self.ok,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def verify_morph(graph: SkeletalGraph, profile, target: MorphTarget, env: Environment = Environment(), robot=None) -> VerificationReport:
    """Replay a profile's timeline through the thermal model and quasi-static solves."""
    robot = robot or SimulatedRobot(graph, env)
    epochs = 0
    converged = robot.last.converged
    t_ms = 0.0
    for group_t, packets in profile.epochs():
        if group_t > t_ms:
            robot.wait((group_t - t_ms) / 1000.0)
            converged &= robot.last.converged
        robot.apply(packets)
        converged &= robot.last.converged
        t_ms = group_t + 1000.0 * sum(p.duration_s for p in packets)
        epochs += 1
    if profile.end_ms > t_ms:
        robot.wait((profile.end_ms - t_ms) / 1000.0)
        converged &= robot.last.converged
    final = robot.lengths()
    node_err = None
    if target.positions_mm is not None and len(target.positions_mm) == graph.n_nodes:
        aligned = kabsch_align(robot.positions, target.positions_mm)
        node_err = float(np.linalg.norm(aligned - target.positions_mm, axis=1).max())
    return VerificationReport(final, target.target_mm, target.delta, node_err, bool(converged), epochs, robot.positions.copy())
