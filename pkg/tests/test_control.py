import math

import numpy as np
import pytest

from morphforge.control import (
    PACKET_SIZE,
    PRIORITY_LAMBDA,
    ActuationProfile,
    GaitParams,
    LaserPacket,
    MorphScheduleError,
    PacketError,
    ProfileEntry,
    build_morph_profile,
    concurrency_timeline,
    curvature_to_muscle,
    decode_packet,
    encode_packet,
    gait_command,
    priority,
)
from morphforge.fabrication import FabricationLimits
from morphforge.graph import MorphTarget, graph_from_edges
from morphforge.sim import SimulatedRobot, _muscle_lookup


def _packet(**kw):
    d = dict(start=(0.0, 1.0, 2.0), end=(30.0, 1.0, 2.0), intensity=0.5, speed=15.0, repetitions=1)
    d.update(kw)
    return LaserPacket(**d)


def test_packet_size():
    assert PACKET_SIZE == 4 + 1 + 24 + 4 + 4 + 2 == 39
    assert len(encode_packet(_packet())) == 39


def test_packet_round_trip():
    p = _packet(intensity=0.123456789, speed=7.3)
    assert decode_packet(encode_packet(p)) == p


@pytest.mark.parametrize("kw", [dict(intensity=1.2), dict(intensity=-0.1), dict(repetitions=0), dict(speed=0.0), dict(start=(math.nan, 0, 0))])
def test_invalid_packets_rejected(kw):
    with pytest.raises(PacketError):
        _packet(**kw)


def test_decode_rejects_garbage():
    data = bytearray(encode_packet(_packet()))
    with pytest.raises(PacketError):
        decode_packet(bytes(data[:-1]))
    data[0:4] = b"XXXX"
    with pytest.raises(PacketError):
        decode_packet(bytes(data))


def test_profile_bytes_round_trip(tmp_path):
    prof = ActuationProfile([ProfileEntry(0, _packet()), ProfileEntry(2000, _packet(intensity=1.0))], 4000)
    prof.save(tmp_path / "p.bin", tmp_path / "p.json")
    back = ActuationProfile.load(tmp_path / "p.bin", tmp_path / "p.json")
    assert [e.packet for e in back.entries] == [e.packet for e in prof.entries]
    assert [e.timestamp_ms for e in back.entries] == [0, 2000]
    assert back.end_ms == 4000


@pytest.mark.parametrize("sign,expected", [(1, ("bottom",)), (-1, ("top",)), (0, ("bottom", "top"))])
def test_curvature_to_muscle(sign, expected):
    assert curvature_to_muscle(sign) == expected


def test_no_shrink_no_muscle():
    assert curvature_to_muscle(0, shrink_demand=False) == ()


def test_priority_penalises_visits():
    assert priority(0.2, 0) == 0.2
    assert priority(0.2, 3) == pytest.approx(0.2 - 3 * PRIORITY_LAMBDA)
    rng = np.random.default_rng(0)
    for r, v in zip(rng.uniform(0, 0.33, 1000), rng.integers(0, 100, 1000)):
        assert priority(r, v + 1) < priority(r, v)


def test_gait_command():
    g = GaitParams([0.2], [2 * np.pi], [0.0])
    assert gait_command(g, 0.25)[0] == pytest.approx(0.2)
    assert gait_command(g, 0.0)[0] == 0.0
    assert np.all(gait_command(GaitParams([0.0], [3.0], [1.0]), np.linspace(0, 10, 7)[:, None]) == 0)


def test_gait_periodic_and_bounded():
    g = GaitParams([0.1, 0.3], [2.0, 5.0], [0.3, 1.1])
    t = np.linspace(0, 20, 500)[:, None]
    c = gait_command(g, t)
    assert np.all(c <= g.amplitude + 1e-15) and np.all(c >= 0)
    for k in range(2):
        period = 2 * np.pi / g.omega[k]
        assert np.allclose(gait_command(g, t + period)[:, k], c[:, k], atol=1e-12)


def test_gait_rejects_large_amplitude():
    with pytest.raises(ValueError):
        GaitParams([0.4], [1.0], [0.0])


class LinearRobot:
    """Feedback stub: each sweep shortens its edge by 3% of rest times the intensity."""

    def __init__(self, graph):
        self.graph = graph
        self.L = graph.rest_lengths().copy()
        self.lookup = _muscle_lookup(graph)
        self.waited = 0.0

    def lengths(self):
        return self.L.copy()

    def apply(self, packets):
        for p in packets:
            e, _ = self.lookup.muscle_for(p)
            self.L[e] -= 0.03 * self.graph.rest_lengths()[e] * p.intensity / len(packets)

    def wait(self, dt):
        self.waited += dt


def _star(n, length=40.0):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    nodes = np.vstack([[0.0, 0, 0], np.column_stack([length * np.cos(ang), length * np.sin(ang), np.zeros(n)])])
    return graph_from_edges(nodes, [(0, i + 1) for i in range(n)])


def test_already_at_target_gives_empty_profile(toy):
    g, _ = toy
    t = MorphTarget(g.rest_lengths(), np.zeros(len(g.edges), int))
    prof = build_morph_profile(g, t, feedback=LinearRobot(g))
    assert len(prof) == 0 and prof.converged


def test_priority_isolation(toy):
    g, _ = toy
    tgt = g.rest_lengths().copy()
    tgt[2] *= 0.75
    t = MorphTarget(tgt, np.zeros(len(g.edges), int))
    prof = build_morph_profile(g, t, feedback=SimulatedRobot(g))
    assert prof.converged and len(prof) > 0
    assert {e.edge_id for e in prof.entries} == {2}
    assert {e.side for e in prof.entries} == {"bottom", "top"}


def test_curvature_sign_picks_muscle():
    g = _star(3)
    t = MorphTarget(g.rest_lengths() * 0.9, np.array([1, -1, 0]))
    prof = build_morph_profile(g, t, feedback=LinearRobot(g))
    sides = {}
    for e in prof.entries:
        sides.setdefault(e.edge_id, set()).add(e.side)
    assert sides == {0: {"bottom"}, 1: {"top"}, 2: {"bottom", "top"}}


def test_concurrency_cap_forces_waits():
    g = _star(12)
    limits = FabricationLimits(total_budget_mm=1000.0, max_concurrent_muscles=6)
    t = MorphTarget(g.rest_lengths() * 0.8, np.zeros(12, int))
    robot = LinearRobot(g)
    prof = build_morph_profile(g, t, limits, robot)
    assert prof.converged
    assert prof.concurrency_peak <= 6
    assert concurrency_timeline(prof, 62.0) == prof.concurrency_peak
    assert robot.waited > 0


def test_visits_bounded_and_recorded():
    g = _star(4)
    t = MorphTarget(g.rest_lengths() * np.array([0.9, 0.8, 0.75, 0.95]), np.zeros(4, int))
    prof = build_morph_profile(g, t, feedback=LinearRobot(g), max_iterations=500)
    counts = {}
    for e in prof.entries:
        counts[(e.edge_id, e.side)] = counts.get((e.edge_id, e.side), 0) + 1
    assert counts == prof.visits
    assert max(prof.visits.values()) <= 500


def test_iteration_cap_gives_partial_profile():
    g = _star(3)
    t = MorphTarget(g.rest_lengths() * 0.75, np.zeros(3, int))
    prof = build_morph_profile(g, t, feedback=LinearRobot(g), max_iterations=3)
    assert not prof.converged and "iteration cap" in prof.diagnostic
    assert len(prof) > 0


def test_infeasible_target_refused(toy):
    g, _ = toy
    t = MorphTarget(g.rest_lengths() * 0.6, np.zeros(len(g.edges), int))
    with pytest.raises(MorphScheduleError):
        build_morph_profile(g, t, feedback=LinearRobot(g))
