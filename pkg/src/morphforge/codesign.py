"""Rigid articulated locomotion on flat, inclined and water terrain, and two-step DE co-design.

Each skeleton node is a rigid body made of particles: the node itself plus the two
hinge particles of every incident bone. A bone's two hinge particles sit at its
midpoint, offset sideways in the plane, and are shared by both end bodies, so the
bone is a revolute hinge about the in-plane axis perpendicular to it. Muscles drive
the hinge fold angle. Units inside the simulator: mm, g, s.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import differential_evolution

from .control import GaitParams
from .graph import SkeletalGraph, graph_from_edges

jax.config.update("jax_enable_x64", True)

DT = 1e-3
GRAVITY = 9810.0  # mm/s^2
INCLINE_DEG = 20.0
MAX_CONTRACTION = 0.33
TERRAINS = ("flat", "incline", "water")
TASKS = {"walk": "flat", "climb": "incline", "swim": "water"}


@dataclass(frozen=True)
class Template:
    name: str
    nodes: np.ndarray  # (n, 2) mm, flat
    edges: tuple  # ((a, b), ...)
    active: tuple  # edge indices with gaits
    radius_mm: float = 1.0
    material: str = "rigid"

    def graph(self, nodes=None) -> SkeletalGraph:
        P = self.nodes if nodes is None else np.asarray(nodes, dtype=float)
        return graph_from_edges(P, self.edges, self.material, self.radius_mm)


def frog_template() -> Template:
    """10 nodes, 12 bones: a braced rectangular body with two-segment hind legs and short fore legs."""
    nodes = np.array(
        [
            [60.0, 40.0],  # 0 front left
            [60.0, -40.0],  # 1 front right
            [0.0, -40.0],  # 2 rear right
            [0.0, 40.0],  # 3 rear left
            [100.0, 80.0],  # 4 fore foot left
            [100.0, -80.0],  # 5 fore foot right
            [-40.0, -80.0],  # 6 hind knee right
            [-40.0, 80.0],  # 7 hind knee left
            [-100.0, -80.0],  # 8 hind foot right
            [-100.0, 80.0],  # 9 hind foot left
        ]
    )
    edges = ((0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3), (0, 4), (1, 5), (2, 6), (6, 8), (3, 7), (7, 9))
    return Template("frog", nodes, edges, active=(6, 7, 8, 9, 10, 11))


def x_template() -> Template:
    """5 nodes, 4 bones: a centre node with four diagonal legs."""
    nodes = np.array([[0.0, 0.0], [50.0, 50.0], [50.0, -50.0], [-50.0, -50.0], [-50.0, 50.0]])
    edges = ((0, 1), (0, 2), (0, 3), (0, 4))
    return Template("xbot", nodes, edges, active=(0, 1, 2, 3))


TEMPLATES = {"frog": frog_template, "xbot": x_template}


@dataclass(frozen=True)
class PhysicsParams:
    friction: float = 0.6
    hinge_width_mm: float = 10.0
    rigid_omega: float = 400.0  # rad/s, sets spring stiffness per particle mass
    rigid_zeta: float = 0.05
    hinge_k: float = 2e6  # g mm^2 / s^2 per rad^2, active bones
    passive_factor: float = 4.0
    hinge_zeta: float = 0.5
    contact_k: float = 2e4  # g / s^2
    contact_c: float = 20.0
    drag_normal: float = 2e-5  # g / mm, quadratic drag across a bone
    drag_tangent: float = 2e-6
    density: float = 1.24e-3  # g / mm^3
    min_particle_mass: float = 0.05


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    com: np.ndarray  # (T, 3) mm, sampled every ``sample_dt``
    sample_dt: float
    flagged: bool
    terrain: str

    @property
    def displacement(self) -> np.ndarray:
        return self.com[-1] - self.com[0]

    @property
    def height_gain(self) -> float:
        """Gain along the world vertical (the incline rises along +x)."""
        d = self.displacement
        if self.terrain == "incline":
            th = math.radians(INCLINE_DEG)
            return float(d[0] * math.sin(th) + d[2] * math.cos(th))
        return float(d[2])


def reward(traj: Trajectory, task: str) -> float:
    """Metres along +x for walk/swim, metres of height for climb; -inf when flagged."""
    if traj.flagged or not np.all(np.isfinite(traj.com)):
        return -math.inf
    if task == "climb":
        return traj.height_gain / 1000.0
    if task in ("walk", "swim"):
        return float(traj.displacement[0]) / 1000.0
    raise ValueError(f"unknown task {task!r}")


class RigidSim:
    """Batched, jit-compiled simulator for one skeleton topology and terrain."""

    def __init__(self, template: Template, terrain: str = "flat", duration_s: float = 3.0, params: PhysicsParams = PhysicsParams(), sample_every: int = 20):
        if terrain not in TERRAINS:
            raise ValueError(f"terrain must be one of {TERRAINS}")
        self.template = template
        self.terrain = terrain
        self.params = params
        self.steps = int(round(duration_s / DT))
        self.sample_every = sample_every
        E = np.asarray(template.edges, dtype=np.int64)
        n, m = len(template.nodes), len(E)
        self.n, self.m = n, m
        self.P = n + 2 * m
        bodies = [[i] for i in range(n)]
        for e, (a, b) in enumerate(E):
            for v in (a, b):
                bodies[v] += [n + 2 * e, n + 2 * e + 1]
        pairs = set()
        for body in bodies:
            for i in range(len(body)):
                for j in range(i + 1, len(body)):
                    pairs.add((min(body[i], body[j]), max(body[i], body[j])))
        self.pairs = np.array(sorted(pairs), dtype=np.int64)
        active = np.zeros(m, dtype=bool)
        active[list(template.active)] = True
        self.active = active
        self.edges = E
        self._run = jax.jit(jax.vmap(self._episode, in_axes=(0, 0, None)))

    # geometry from flat node positions ------------------------------------------------
    def _rest(self, V):
        E = jnp.asarray(self.edges)
        p = self.params
        a, b = V[E[:, 0]], V[E[:, 1]]
        t = b - a
        L = jnp.sqrt(jnp.sum(t * t, axis=1))
        t = t / L[:, None]
        w = jnp.stack([-t[:, 1], t[:, 0]], axis=1)
        mid = 0.5 * (a + b)
        h = jnp.stack([mid - p.hinge_width_mm * w, mid + p.hinge_width_mm * w], axis=1).reshape(-1, 2)
        X2 = jnp.concatenate([V, h], axis=0)
        X = jnp.concatenate([X2, jnp.zeros((X2.shape[0], 1))], axis=1)
        me = p.density * math.pi * self.template.radius_mm**2 * L
        mass = jnp.zeros(self.P)
        mass = mass.at[E[:, 0]].add(0.25 * me).at[E[:, 1]].add(0.25 * me)
        mass = mass.at[self.n + 2 * jnp.arange(self.m)].add(0.25 * me)
        mass = mass.at[self.n + 2 * jnp.arange(self.m) + 1].add(0.25 * me)
        mass = jnp.maximum(mass, p.min_particle_mass)
        return X, mass

    def _fold(self, X):
        """Signed fold angle of every bone about its hinge axis; positive folds the ends down."""
        E = jnp.asarray(self.edges)
        n = self.n
        h1 = X[n + 2 * jnp.arange(self.m)]
        h2 = X[n + 2 * jnp.arange(self.m) + 1]
        ax = h2 - h1
        ax = ax / jnp.sqrt(jnp.sum(ax * ax, axis=1, keepdims=True))
        mid = 0.5 * (h1 + h2)

        def perp(q):
            d = q - mid
            d = d - jnp.sum(d * ax, axis=1, keepdims=True) * ax
            return d / jnp.sqrt(jnp.sum(d * d, axis=1, keepdims=True))

        u = perp(X[E[:, 0]])
        v = perp(X[E[:, 1]])
        s = jnp.sum(jnp.cross(v, u) * ax, axis=1)
        c = -jnp.sum(u * v, axis=1)
        return jnp.arctan2(s, c)

    def _episode(self, V, gait, friction):
        """V: (n, 2) node positions; gait: (m, 3) rows (A, omega, phi), zero rows for passive bones."""
        p = self.params
        X0, mass = self._rest(V)
        pi, pj = self.pairs[:, 0], self.pairs[:, 1]
        l0 = jnp.sqrt(jnp.sum((X0[pj] - X0[pi]) ** 2, axis=1))
        mpair = jnp.minimum(mass[pi], mass[pj])
        k_pair = mpair * p.rigid_omega**2
        c_pair = 2 * p.rigid_zeta * jnp.sqrt(k_pair * mpair)
        active = jnp.asarray(self.active)
        k_h = jnp.where(active, p.hinge_k, p.hinge_k * p.passive_factor)
        c_h = 2 * p.hinge_zeta * jnp.sqrt(k_h * 0.25 * jnp.mean(mass))
        A, om, ph = gait[:, 0], gait[:, 1], gait[:, 2]
        inv_m = (1.0 / mass)[:, None]
        th = math.radians(INCLINE_DEG)
        if self.terrain == "flat":
            g = jnp.array([0.0, 0.0, -GRAVITY])
        elif self.terrain == "incline":
            g = jnp.array([-GRAVITY * math.sin(th), 0.0, -GRAVITY * math.cos(th)])
        else:
            g = jnp.zeros(3)
        E = jnp.asarray(self.edges)
        hinge_idx = self.n + jnp.arange(2 * self.m)
        seg_of = jnp.repeat(jnp.arange(self.m), 2)

        def forces(X, Vel, t):
            d = X[pj] - X[pi]
            l = jnp.sqrt(jnp.sum(d * d, axis=1))
            dh = d / l[:, None]
            rel = jnp.sum((Vel[pj] - Vel[pi]) * dh, axis=1)
            f = (k_pair * (l - l0) + c_pair * rel)[:, None] * dh
            F = jnp.zeros_like(X).at[pi].add(f).at[pj].add(-f)
            c = A * jnp.maximum(0.0, jnp.sin(om * t + ph))
            target = c / MAX_CONTRACTION * (0.5 * math.pi)
            psi, vjp = jax.vjp(self._fold, X)
            _, psidot = jax.jvp(self._fold, (X,), (Vel,))
            coef = k_h * (psi - target) + c_h * psidot
            F = F - vjp(coef)[0]
            return F + mass[:, None] * g

        def step(state, k):
            X, Vel = state
            t = k * DT
            F = forces(X, Vel, t)
            if self.terrain != "water":
                pen = jnp.minimum(X[:, 2], 0.0)
                fn = jnp.maximum(-p.contact_k * pen - p.contact_c * Vel[:, 2] * (pen < 0), 0.0)
                F = F.at[:, 2].add(fn)
                Vel = Vel + DT * F * inv_m
                # Coulomb friction as a tangential impulse bounded by mu times the normal impulse
                vt = Vel[:, :2]
                speed = jnp.sqrt(jnp.sum(vt * vt, axis=1) + 1e-300)
                cut = jnp.minimum(speed, friction * DT * fn / mass)
                Vel = Vel.at[:, :2].set(vt * (1.0 - cut / speed)[:, None])
            else:
                Vel = Vel + DT * F * inv_m
                # implicit quadratic drag on hinge particles, split along / across the bone
                tdir = X[E[:, 1]] - X[E[:, 0]]
                tdir = tdir / jnp.sqrt(jnp.sum(tdir * tdir, axis=1, keepdims=True))
                td = tdir[seg_of]
                vh = Vel[hinge_idx]
                vpar = jnp.sum(vh * td, axis=1, keepdims=True) * td
                vperp = vh - vpar
                mh = mass[hinge_idx][:, None]

                def implicit(vv, cd):
                    s = jnp.sqrt(jnp.sum(vv * vv, axis=1, keepdims=True))
                    a = cd * DT / mh
                    s_new = jnp.where(s > 0, (jnp.sqrt(1.0 + 4.0 * a * s) - 1.0) / (2.0 * a), 0.0)
                    return vv * jnp.where(s > 0, s_new / jnp.where(s > 0, s, 1.0), 0.0)

                Vel = Vel.at[hinge_idx].set(implicit(vpar, p.drag_tangent) + implicit(vperp, p.drag_normal))
            X = X + DT * Vel
            return (X, Vel), None

        def block(state, kb):
            state, _ = jax.lax.scan(step, state, kb * self.sample_every + jnp.arange(self.sample_every))
            X, _ = state
            com = jnp.sum(X * mass[:, None], axis=0) / jnp.sum(mass)
            return state, com

        com0 = jnp.sum(X0 * mass[:, None], axis=0) / jnp.sum(mass)
        nblocks = self.steps // self.sample_every
        state, coms = jax.lax.scan(block, (X0, jnp.zeros_like(X0)), jnp.arange(nblocks))
        Xf, Vf = state
        coms = jnp.concatenate([com0[None], coms], axis=0)
        bad = ~jnp.all(jnp.isfinite(coms)) | (jnp.max(jnp.abs(Xf)) > 1e5) | (jnp.max(jnp.abs(Vf)) > 1e6)
        return coms, bad

    def run(self, V, gait, friction=None):
        """Batch run: V (B, n, 2), gait (B, m, 3). Returns list of Trajectory."""
        fr = self.params.friction if friction is None else friction
        coms, bad = self._run(jnp.asarray(V, dtype=float), jnp.asarray(gait, dtype=float), fr)
        coms, bad = np.asarray(coms), np.asarray(bad)
        return [Trajectory(c, DT * self.sample_every, bool(b), self.terrain) for c, b in zip(coms, bad)]


@lru_cache(maxsize=16)
def _cached_sim(template_name, terrain, duration_s, params):
    return RigidSim(TEMPLATES[template_name](), terrain, duration_s, params)


def _sim_for(template: Template, terrain, duration_s, params):
    if template.name in TEMPLATES and np.array_equal(template.nodes, TEMPLATES[template.name]().nodes):
        return _cached_sim(template.name, terrain, duration_s, params)
    return RigidSim(template, terrain, duration_s, params)


def gait_matrix(template: Template, gait: GaitParams) -> np.ndarray:
    """(m, 3) rows of (A, omega, phi) with zeros on passive bones."""
    G = np.zeros((len(template.edges), 3))
    G[list(template.active)] = np.column_stack([gait.amplitude, gait.omega, gait.phase])
    return G


def simulate_rigid(template: Template, gait: GaitParams, terrain: str = "flat", duration_s: float = 3.0, nodes=None, params: PhysicsParams = PhysicsParams(), friction=None) -> Trajectory:
    """Forward dynamics of one skeleton under a periodic gait."""
    V = template.nodes if nodes is None else np.asarray(nodes, dtype=float)
    sim = RigidSim(template, terrain, duration_s, params) if nodes is None else _sim_for(template, terrain, duration_s, params)
    return sim.run(V[None], gait_matrix(template, gait)[None], friction)[0]


# ---------------------------------------------------------------------------
# co-design problem
# ---------------------------------------------------------------------------


@dataclass
class CodesignProblem:
    template: Template
    task: str = "walk"
    disp_bound_mm: float = 8.0
    amp_bounds: tuple = (0.0, 0.33)
    omega_bounds: tuple = (math.pi, 4 * math.pi)
    phase_bounds: tuple = (0.0, 2 * math.pi)
    duration_s: float = 3.0
    seed: int = 0
    step1_generations: int = 40
    step2_generations: int = 4
    rounds: int = 5
    min_edge_mm: float = 30.0
    params: PhysicsParams = field(default_factory=PhysicsParams)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {tuple(TASKS)}")
        self.validate()

    @property
    def terrain(self) -> str:
        return TASKS[self.task]

    def validate(self):
        for lo, hi in (self.amp_bounds, self.omega_bounds, self.phase_bounds):
            if lo > hi:
                raise ValueError("lower bound exceeds upper bound")
        if self.disp_bound_mm < 0:
            raise ValueError("displacement bound must be >= 0")
        if self.amp_bounds[0] < 0 or self.amp_bounds[1] > MAX_CONTRACTION:
            raise ValueError("amplitude bounds must lie in [0, 0.33]")
        L = self.template.graph().rest_lengths()
        # each endpoint may move by up to sqrt(2) * d
        if np.any(L - 2 * math.sqrt(2) * self.disp_bound_mm <= self.min_edge_mm):
            raise ValueError("displacement bounds allow bones at or below the minimum length")

    @property
    def n_nodes(self):
        return len(self.template.nodes)

    @property
    def n_active(self):
        return len(self.template.active)

    def node_bounds(self):
        d = self.disp_bound_mm
        return [(-d, d)] * (2 * self.n_nodes)

    def gait_bounds(self):
        return [self.amp_bounds, self.omega_bounds, self.phase_bounds] * self.n_active

    def decode_nodes(self, xv):
        return self.template.nodes + np.asarray(xv).reshape(-1, self.n_nodes, 2)

    def decode_gait(self, xg):
        return np.asarray(xg).reshape(-1, self.n_active, 3)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("template", "params")}
        d["template"] = self.template.name
        d["params"] = asdict(self.params)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        tpl = TEMPLATES[d.pop("template", "frog")]()
        params = PhysicsParams(**d.pop("params", {}))
        for k in ("amp_bounds", "omega_bounds", "phase_bounds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(tpl, params=params, **d)


class Evaluator:
    """Batched fitness with an evaluation log and a hard evaluation budget."""

    def __init__(self, problem: CodesignProblem, budget: int | None = None):
        self.problem = problem
        self.sim = _sim_for(problem.template, problem.terrain, problem.duration_s, problem.params)
        self.budget = budget
        self.log = []  # (node displacement vector, gait vector, fitness)
        self.best = (-math.inf, None, None)
        self.trace = []  # best-so-far after each batch

    @property
    def count(self):
        return len(self.log)

    def __call__(self, xv, xg):
        xv = np.atleast_2d(xv)
        xg = np.atleast_2d(xg)
        B = len(xv)
        if self.budget is not None and self.count + B > self.budget:
            raise RuntimeError("evaluation budget exceeded")
        V = self.problem.decode_nodes(xv)
        G = np.zeros((B, len(self.problem.template.edges), 3))
        G[:, list(self.problem.template.active)] = self.problem.decode_gait(xg)
        trajs = self.sim.run(V, G)
        fit = np.array([reward(t, self.problem.task) for t in trajs])
        for i in range(B):
            self.log.append((xv[i].copy(), xg[i].copy(), float(fit[i])))
            if fit[i] > self.best[0]:
                self.best = (float(fit[i]), xv[i].copy(), xg[i].copy())
        self.trace.append(self.best[0])
        return fit


def _de(fun, bounds, pop, generations, seed, incumbent=None):
    """scipy DE over the non-collapsed coordinates; returns the best full vector."""
    bounds = np.asarray(bounds, dtype=float)
    free = bounds[:, 1] > bounds[:, 0]
    fixed = bounds[:, 0].copy()
    if not free.any():
        x = fixed
        fun(x[None])
        return x
    lo, hi = bounds[free, 0], bounds[free, 1]
    rng = np.random.default_rng(seed)
    init = lo + (hi - lo) * rng.random((pop, int(free.sum())))
    if incumbent is not None:
        init[0] = np.clip(np.asarray(incumbent)[free], lo, hi)

    def full(z):
        Z = np.tile(fixed, (z.shape[1], 1))
        Z[:, free] = z.T
        return Z

    def obj(z):
        f = fun(full(z))
        return np.where(np.isfinite(f), -f, 1e30)

    res = differential_evolution(
        obj,
        list(zip(lo, hi)),
        maxiter=generations,
        init=init,
        mutation=0.7,
        recombination=0.9,
        polish=False,
        tol=0,
        atol=0,
        seed=int(rng.integers(2**31 - 1)),
        vectorized=True,
        updating="deferred",
    )
    x = fixed.copy()
    x[free] = res.x
    return x


@dataclass
class CodesignResult:
    nodes: np.ndarray
    gait: GaitParams
    fitness: float
    trace: list  # best-so-far fitness per evaluated batch
    evaluations: int
    log: list

    def graph(self, template: Template) -> SkeletalGraph:
        return template.graph(self.nodes)


def codesign_optimize(problem: CodesignProblem, budget: int | None = 2000, progress=None) -> CodesignResult:
    """Joint DE (population 5), then alternating node-only / gait-only DE rounds (population 30)."""
    ev = Evaluator(problem, budget)
    nb, gb = problem.node_bounds(), problem.gait_bounds()
    nv = len(nb)
    rng = np.random.default_rng(problem.seed)

    def joint(X):
        return ev(X[:, :nv], X[:, nv:])

    _de(joint, nb + gb, 5, problem.step1_generations, int(rng.integers(2**31 - 1)))
    if progress:
        progress(f"step 1: best {ev.best[0]:.6g} after {ev.count} evaluations")
    for r in range(problem.rounds):
        _, bv, bg = ev.best
        _de(lambda X: ev(X, np.tile(bg, (len(X), 1))), nb, 30, problem.step2_generations, int(rng.integers(2**31 - 1)), bv)
        _, bv, bg = ev.best
        _de(lambda X: ev(np.tile(bv, (len(X), 1)), X), gb, 30, problem.step2_generations, int(rng.integers(2**31 - 1)), bg)
        if progress:
            progress(f"round {r + 1}: best {ev.best[0]:.6g} after {ev.count} evaluations")
    f, bv, bg = ev.best
    G = problem.decode_gait(bg)[0]
    gait = GaitParams(G[:, 0], G[:, 1], G[:, 2], tuple(problem.template.active))
    return CodesignResult(problem.decode_nodes(bv)[0], gait, f, ev.trace, ev.count, ev.log)


def random_gait_baseline(problem: CodesignProblem, n: int = 8, seed: int = 12345) -> float:
    """Mean absolute fitness of uniformly random gaits on the unmodified template."""
    rng = np.random.default_rng(seed)
    gb = np.asarray(problem.gait_bounds())
    xg = gb[:, 0] + (gb[:, 1] - gb[:, 0]) * rng.random((n, len(gb)))
    ev = Evaluator(problem)
    fit = ev(np.zeros((n, 2 * problem.n_nodes)), xg)
    return float(np.mean(np.abs(fit)))


def save_result(result: CodesignResult, problem: CodesignProblem, out_dir):
    import csv
    import os

    os.makedirs(out_dir, exist_ok=True)
    result.graph(problem.template).save(os.path.join(out_dir, "skeleton.json"))
    with open(os.path.join(out_dir, "gait.json"), "w") as fh:
        json.dump(result.gait.to_list(), fh, indent=1)
    with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "best"])
        for i, b in enumerate(result.trace):
            w.writerow([i, repr(b)])
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump({"fitness": result.fitness, "evaluations": result.evaluations, "problem": problem.to_dict()}, fh, indent=1)
