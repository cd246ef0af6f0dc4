"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import struct
import time

import numpy as np
import pytest
from conftest import random_state, record_acceptance, toy_graph, toy_target

from morphforge.cli import write_design
from morphforge.codesign import CodesignProblem, codesign_optimize, frog_template, random_gait_baseline
from morphforge.control import (
    MAGIC,
    PACKET_VERSION,
    LaserPacket,
    PacketError,
    build_morph_profile,
    decode_packet,
    encode_packet,
    priority,
)
from morphforge.energy import e_bij, e_map, e_shrink, energy_and_gradient, shrink_penalty, shrink_softening, total_energy
from morphforge.mesh import signed_areas
from morphforge.shapes import disk_mesh
from morphforge.sim import (
    AMBIENT_C,
    SimulatedRobot,
    ThermalActuatorState,
    block_response,
    load_calibration,
    thermal_step,
    verify_morph,
)


def test_criterion_01_gradient_check():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for _ in range(100):
        s = random_state(rng)
        f, g = energy_and_gradient(s)
        assert math.isfinite(f)
        x = s.variables()
        fd = np.empty_like(x)
        for i in range(len(x)):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (total_energy(s.with_variables(xp)) - total_energy(s.with_variables(xm))) / (2 * h)
        worst = max(worst, float(np.abs(g - fd).max() / np.abs(fd).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 60
    record_acceptance(1, "energy gradient vs central differences on 100 random states", ok, f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-5
    assert elapsed < 60


def _random_mesh(rng):
    m = disk_mesh(rings=int(rng.integers(1, 5)), per_ring=int(rng.integers(3, 9)))
    V = m.vertices.copy()
    V[:, :2] += rng.normal(0, 0.01, (len(V), 2))
    V[:, 2] = rng.normal(0, 0.2, len(V))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return V @ q.T + rng.normal(size=3), m.faces


def test_criterion_02_conformal_invariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        A, F = _random_mesh(rng)
        worst = max(worst, abs(e_map(A, A, F)))
        for s in (0.5, 2.0, 10.0):
            worst = max(worst, abs(e_map(A, s * A, F)))
    ok = worst < 1e-12
    record_acceptance(2, "conformal distortion vanishes under identity and uniform scaling on 50 meshes", ok, f"max {worst:.1e}")
    assert ok


def test_criterion_03_barrier_semantics():
    rng = np.random.default_rng(11)
    # injectivity barrier: finite exactly when every signed area is positive
    bij_ok = True
    F = np.array([[0, 1, 2], [0, 2, 3]])
    for _ in range(2000):
        U = rng.normal(size=(4, 2))
        finite = math.isfinite(e_bij(U, F))
        bij_ok &= finite == bool(np.all(signed_areas(U, F) > 0))
    r = np.linspace(-0.3, 0.7, 10_000)
    band = (r >= 0.005) & (r <= 0.325)
    # hard indicator once the softening has annealed away
    flat = np.array([[0.0, 0.0], [1.0, 0.0]])
    vals = np.array([e_shrink(flat, np.array([[0.0, 0.0], [1.0 - ri, 0.0]]), np.array([[0, 1]]), eps2=0.0) for ri in r])
    hard_ok = bool(np.all(vals[band] == 0.0) and np.all(np.isinf(vals[~band])))
    # softened barrier: zero on the band, finite inside the soft margins, infinite beyond them
    eps0, eps1 = shrink_softening(np.array([0.0, 0.33]), 0.25)
    pen = shrink_penalty(r, eps0, eps1)
    inner = (r > 0.005 - eps0) & (r < 0.325 + eps1)
    soft_ok = bool(np.all(pen[band] == 0.0) and np.all(np.isfinite(pen[inner])) and np.all(np.isinf(pen[~inner])) and np.all(pen[inner & ~band] > 0))
    ok = bij_ok and hard_ok and soft_ok
    record_acceptance(3, "barrier semantics over 1e4 ratio samples", ok, f"bij {bij_ok}, hard band {hard_ok}, softened {soft_ok}")
    assert ok


def test_criterion_04_optimizer_monotone(dome_saddle_design):
    res = dome_saddle_design
    steps = 0
    mono = True
    for stage in ("map", "fab"):
        trace = res.traces[stage]
        steps += sum(t.accepted for t in trace)
        mono &= all(t.energy_after <= t.energy_before for t in trace if t.accepted)
        mono &= all(t.energy_after == t.energy_before for t in trace if not t.accepted)
        mono &= all(b.energy_before <= a.energy_after for a, b in zip(trace, trace[1:]))
    inverted = int(np.sum(signed_areas(res.tri.flat, res.tri.faces) <= 0))
    bm = res.tri.boundary_vertices()
    rad_err = max(float(np.abs(np.linalg.norm(u[bm], axis=1) - 1).max()) for u in res.tri.uv)
    ok = mono and inverted == 0 and rad_err < 1e-6
    record_acceptance(
        4,
        "dome+saddle optimizer trace monotone, flat mesh valid, boundary on the unit circle",
        ok,
        f"{steps} accepted steps, {inverted} inverted, radius err {rad_err:.1e}, {res.elapsed_s:.0f} s",
    )
    assert mono and inverted == 0 and rad_err < 1e-6


def _independent_check(out):
    """Read graph and morph targets from disk and test the fabrication limits directly."""
    g = json.loads((out / "graph.json").read_text())
    pos = {n["id"]: np.array([n["x"], n["y"], n["z"]]) for n in g["nodes"]}
    flat = np.array([np.linalg.norm(pos[e["b"]] - pos[e["a"]]) for e in g["edges"]])
    stored = np.array([e["rest_mm"] for e in g["edges"]])
    verdicts = [bool(np.allclose(flat, stored, rtol=1e-12)), bool(np.all(flat > 30.0))]
    for f in sorted((out / "morph_targets").glob("*.json")):
        rows = sorted(json.loads(f.read_text())["edges"], key=lambda r: r["edge_id"])
        tgt = np.array([r["target_mm"] for r in rows])
        ratio = (flat - tgt) / flat
        verdicts += [len(tgt) == len(flat), float(np.abs(flat - tgt).sum()) <= 300.0, bool(np.all(ratio < 0.33)), bool(np.all(ratio >= 0))]
    return all(verdicts), len(list((out / "morph_targets").glob("*.json")))


def test_criterion_05_fabrication_constraints(dome_saddle_design, tmp_path):
    res = dome_saddle_design
    write_design(res, tmp_path)
    exit_ok = res.ok  # the design command exits 0 exactly when this holds
    checked, n = _independent_check(tmp_path)
    ok = exit_ok and checked and n == 2
    record_acceptance(5, "emitted design satisfies budget, ratio and length limits (file-only checker)", ok, f"{n} targets, report ok {exit_ok}")
    assert ok


def test_criterion_06_morph_bot_scale(dome_saddle_design):
    res = dome_saddle_design
    g = res.graph
    n, m = g.n_nodes, len(g.edges)
    ok = 7.5 <= n <= 30 and 16.5 <= m <= 66 and g.is_connected() and res.ok
    record_acceptance(6, "dome+saddle graph size within 2x of 15 nodes / 33 edges", ok, f"{n} nodes, {m} edges at {res.scale_mm:.1f} mm/unit")
    assert ok


def _concurrency_oracle(prof, window_ms):
    starts = sorted((e.timestamp_ms, e.edge_id, e.side) for e in prof.entries)
    peak = 0
    for t, _, _ in starts:
        peak = max(peak, len({(ei, s) for tt, ei, s in starts if t - window_ms < tt <= t}))
    return peak


def test_criterion_07_closed_loop_toy():
    g = toy_graph()
    t = toy_target(g)
    cap = 3000
    prof = build_morph_profile(g, t, feedback=SimulatedRobot(g), max_iterations=cap)
    rep = verify_morph(g, prof, t)
    within = rep.converged and bool(np.all(np.abs(rep.err) <= t.delta))
    peak = _concurrency_oracle(prof, 62_000)
    rng = np.random.default_rng(5)
    rs, vs = rng.uniform(0, 0.33, 10_000), rng.integers(0, cap, 10_000)
    penalty_ok = bool(np.all([priority(r, v + 1) < priority(r, v) for r, v in zip(rs, vs)]))
    visits_ok = max(prof.visits.values()) <= cap and sum(prof.visits.values()) == len(prof)
    ok = prof.converged and within and peak <= 30 and prof.concurrency_peak == peak and penalty_ok and visits_ok
    record_acceptance(
        7,
        "toy closed-loop morph replays within delta with bounded concurrency",
        ok,
        f"{len(prof)} packets, max |err| {np.abs(rep.err).max():.4f}, peak {peak}",
    )
    assert ok


def test_criterion_08_building_block():
    cal = load_calibration()
    ratio, bend_both, r1 = block_response(cal, 0.33, 0.33)
    _, bend_bottom, r2 = block_response(cal, 0.33, 0.0)
    _, bend_top, r3 = block_response(cal, 0.0, 0.33)
    shrink = 1 - ratio
    ok = (
        r1.converged and r2.converged and r3.converged
        and abs(shrink - 0.33) <= 0.02
        and bend_bottom > 0 > bend_top
        and abs(abs(bend_bottom) - 90) <= 9 and abs(abs(bend_top) - 90) <= 9
    )
    record_acceptance(8, "building block shrink and bend envelope", ok, f"shrink {shrink:.4f}, bend {bend_bottom:+.2f}/{bend_top:+.2f} deg")
    assert ok


def test_criterion_09_thermal_model():
    s = ThermalActuatorState(30.0)
    dose = s.params.sweep_time_s
    contraction = [0.0]
    for _ in range(400):
        s = thermal_step(s, True, dose)
        contraction.append(1 - s.rest_length / 30.0)
    c = np.array(contraction)
    monotone = bool(np.all(np.diff(c) >= 0))
    saturated = abs(c[-1] - 0.33) < 1e-6 and c.max() <= 0.33 + 1e-12
    h = thermal_step(ThermalActuatorState(30.0), True, s.params.tau_heat_s)
    cooled = thermal_step(h, False, 20 * s.params.tau_cool_s)
    recover = abs(cooled.rest_length - 30.0) / 30.0
    idle = thermal_step(ThermalActuatorState(30.0), False, 1e5)
    ok = monotone and saturated and recover < 1e-3 and idle.temperature == AMBIENT_C
    record_acceptance(9, "thermal contraction monotone in dose, saturates at 33%, recovers on cooling", ok, f"final {c[-1]:.6f}, recovery err {recover:.1e}")
    assert ok


def test_criterion_10_frog_codesign():
    p = CodesignProblem(frog_template(), "walk", seed=7)
    base = random_gait_baseline(p)
    t0 = time.perf_counter()
    res = codesign_optimize(p, budget=2000)
    elapsed = time.perf_counter() - t0
    again = codesign_optimize(CodesignProblem(frog_template(), "walk", seed=7), budget=2000)
    identical = (
        again.fitness == res.fitness
        and np.array_equal(again.nodes, res.nodes)
        and np.array_equal(again.gait.amplitude, res.gait.amplitude)
        and np.array_equal(again.gait.omega, res.gait.omega)
        and np.array_equal(again.gait.phase, res.gait.phase)
        and again.trace == res.trace
    )
    monotone = all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    ok = res.fitness >= 1.5 * base and res.evaluations <= 2000 and monotone and identical and elapsed < 900
    record_acceptance(
        10,
        "frog co-design beats 1.5x the random-gait baseline, deterministic",
        ok,
        f"best {res.fitness:.4f} m vs baseline {base:.4f} m ({res.fitness / base:.1f}x), {res.evaluations} evals, {elapsed:.0f} s",
    )
    assert ok


def _random_packet(rng):
    return LaserPacket(
        tuple(rng.uniform(-500, 500, 3)),
        tuple(rng.uniform(-500, 500, 3)),
        float(rng.uniform(0, 1)),
        float(rng.uniform(0.1, 1000)),
        int(rng.integers(1, 65536)),
    )


def test_criterion_11_packet_codec():
    rng = np.random.default_rng(99)
    identity = True
    for _ in range(10_000):
        p = _random_packet(rng)
        data = encode_packet(p)
        identity &= len(data) == 39 and decode_packet(data) == p and encode_packet(decode_packet(data)) == data
    rejected = 0
    cases = 0
    raw = struct.Struct("<4sB8fH")
    for bad in list(rng.uniform(1.0001, 10, 50)) + list(rng.uniform(-10, -1e-4, 50)) + [math.nan, math.inf]:
        cases += 2
        with pytest.raises(PacketError):
            LaserPacket((0, 0, 0), (1, 0, 0), bad, 10.0, 1)
        rejected += 1
        with pytest.raises(PacketError):
            decode_packet(raw.pack(MAGIC, PACKET_VERSION, 0, 0, 0, 1, 0, 0, bad, 10.0, 1))
        rejected += 1
    cases += 2
    with pytest.raises(PacketError):
        LaserPacket((0, 0, 0), (1, 0, 0), 0.5, 10.0, 0)
    rejected += 1
    with pytest.raises(PacketError):
        decode_packet(raw.pack(MAGIC, PACKET_VERSION, 0, 0, 0, 1, 0, 0, 0.5, 10.0, 0))
    rejected += 1
    ok = identity and rejected == cases
    record_acceptance(11, "packet codec round trip on 1e4 packets, invalid packets rejected", ok, f"{rejected}/{cases} invalid rejected")
    assert ok
