"""Laser actuation profiles: packet codec, closed-loop morph scheduler and periodic gaits."""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .fabrication import FabricationLimits, check_constraints
from .graph import MorphTarget, SkeletalGraph

MAGIC = b"LCEP"
PACKET_VERSION = 1
_PACKET = struct.Struct("<4sB8fH")
_RECORD = struct.Struct("<I")
PACKET_SIZE = _PACKET.size
LATENCY_MS = 50
PRIORITY_LAMBDA = 0.01


class PacketError(ValueError):
    pass


def _f32(x):
    return float(np.float32(x))


@dataclass(frozen=True)
class LaserPacket:
    """One laser sweep instruction; floats are stored at float32 precision."""

    start: tuple
    end: tuple
    intensity: float
    speed: float  # mm/s
    repetitions: int = 1

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(_f32(v) for v in self.start))
        object.__setattr__(self, "end", tuple(_f32(v) for v in self.end))
        object.__setattr__(self, "intensity", _f32(self.intensity))
        object.__setattr__(self, "speed", _f32(self.speed))
        object.__setattr__(self, "repetitions", int(self.repetitions))
        validate_packet(self)

    @property
    def length_mm(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))

    @property
    def duration_s(self) -> float:
        return self.repetitions * self.length_mm / self.speed

    def to_dict(self):
        return {"start": list(self.start), "end": list(self.end), "intensity": self.intensity, "speed": self.speed, "repetitions": self.repetitions}


def validate_packet(p: LaserPacket):
    if len(p.start) != 3 or len(p.end) != 3:
        raise PacketError("segment endpoints must be 3D")
    if not all(math.isfinite(v) for v in p.start + p.end):
        raise PacketError("non-finite endpoint")
    if not 0.0 <= p.intensity <= 1.0:
        raise PacketError(f"intensity {p.intensity} outside [0, 1]")
    if not (math.isfinite(p.speed) and p.speed > 0):
        raise PacketError("scan speed must be positive")
    if not 1 <= p.repetitions <= 0xFFFF:
        raise PacketError("repetitions must be in [1, 65535]")


def encode_packet(p: LaserPacket) -> bytes:
    validate_packet(p)
    return _PACKET.pack(MAGIC, PACKET_VERSION, *p.start, *p.end, p.intensity, p.speed, p.repetitions)


def decode_packet(data: bytes) -> LaserPacket:
    if len(data) != PACKET_SIZE:
        raise PacketError(f"packet must be {PACKET_SIZE} bytes, got {len(data)}")
    magic, ver, *vals, reps = _PACKET.unpack(data)
    if magic != MAGIC:
        raise PacketError("bad magic")
    if ver != PACKET_VERSION:
        raise PacketError(f"unsupported packet version {ver}")
    try:
        return LaserPacket(tuple(vals[0:3]), tuple(vals[3:6]), vals[6], vals[7], reps)
    except PacketError:
        raise
    except (TypeError, ValueError) as exc:
        raise PacketError(str(exc)) from exc


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------


@dataclass
class ProfileEntry:
    timestamp_ms: int
    packet: LaserPacket
    edge_id: int | None = None
    side: str | None = None


@dataclass
class ActuationProfile:
    entries: list = field(default_factory=list)
    end_ms: int = 0
    converged: bool = True
    diagnostic: str = ""
    visits: dict = field(default_factory=dict)
    concurrency_peak: int = 0
    budget_used_mm: float = 0.0

    def __len__(self):
        return len(self.entries)

    def epochs(self):
        """Entries grouped into scheduler pops: yields (start_ms, packets).

        Back-to-back sweeps of the same edge form one pop; without edge ids every
        sweep is its own pop.
        """
        out = []
        prev = None
        for e in self.entries:
            same = prev is not None and e.edge_id is not None and e.edge_id == prev.edge_id
            prev = e
            if out and same and e.timestamp_ms == out[-1][2]:
                out[-1][1].append(e.packet)
                out[-1][2] = e.timestamp_ms + _gap_ms(e.packet)
            else:
                out.append([e.timestamp_ms, [e.packet], e.timestamp_ms + _gap_ms(e.packet)])
        return [(t, ps) for t, ps, _ in out]

    def to_bytes(self) -> bytes:
        return b"".join(_RECORD.pack(e.timestamp_ms) + encode_packet(e.packet) for e in self.entries)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ActuationProfile":
        rec = _RECORD.size + PACKET_SIZE
        if len(data) % rec:
            raise PacketError("profile length is not a whole number of records")
        entries = []
        for off in range(0, len(data), rec):
            (t,) = _RECORD.unpack_from(data, off)
            entries.append(ProfileEntry(t, decode_packet(data[off + _RECORD.size: off + rec])))
        end = entries[-1].timestamp_ms + _gap_ms(entries[-1].packet) if entries else 0
        return cls(entries, end)

    def to_dict(self):
        return {
            "end_ms": self.end_ms,
            "converged": self.converged,
            "diagnostic": self.diagnostic,
            "concurrency_peak": self.concurrency_peak,
            "budget_used_mm": self.budget_used_mm,
            "visits": {f"{k[0]}:{k[1]}": v for k, v in sorted(self.visits.items())},
            "entries": [
                {"timestamp_ms": e.timestamp_ms, "edge_id": e.edge_id, "side": e.side, **e.packet.to_dict()} for e in self.entries
            ],
        }

    def save(self, bin_path, json_path=None):
        with open(bin_path, "wb") as fh:
            fh.write(self.to_bytes())
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, bin_path, json_path=None) -> "ActuationProfile":
        with open(bin_path, "rb") as fh:
            prof = cls.from_bytes(fh.read())
        if json_path is not None:
            with open(json_path) as fh:
                d = json.load(fh)
            prof.end_ms = int(d.get("end_ms", prof.end_ms))
            prof.converged = bool(d.get("converged", True))
            for e, de in zip(prof.entries, d.get("entries", [])):
                e.edge_id, e.side = de.get("edge_id"), de.get("side")
        return prof


def _gap_ms(p: LaserPacket) -> int:
    return max(LATENCY_MS, int(math.ceil(1000.0 * p.duration_s)))


def concurrency_timeline(profile: ActuationProfile, window_s: float):
    """Peak number of distinct muscles whose last sweep started within ``window_s``."""
    starts = sorted((e.timestamp_ms, (e.edge_id, e.side) if e.edge_id is not None else (e.packet.start, e.packet.end)) for e in profile.entries)
    peak = 0
    win = 1000.0 * window_s
    for i, (t, _) in enumerate(starts):
        hot = {k for tt, k in starts[: i + 1] if t - tt < win}
        peak = max(peak, len(hot))
    return peak


# ---------------------------------------------------------------------------
# scheduling rules
# ---------------------------------------------------------------------------


def curvature_to_muscle(sign: int, shrink_demand: bool = True):
    """Which muscles to heat: bottom for +1, top for -1, both (or none) for 0."""
    if sign > 0:
        return ("bottom",)
    if sign < 0:
        return ("top",)
    return ("bottom", "top") if shrink_demand else ()


def priority(remaining_ratio: float, visits: int, lam: float = PRIORITY_LAMBDA) -> float:
    return remaining_ratio - lam * visits


@dataclass
class GaitParams:
    amplitude: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    edges: tuple = ()

    def __post_init__(self):
        self.amplitude = np.atleast_1d(np.asarray(self.amplitude, dtype=float))
        self.omega = np.broadcast_to(np.asarray(self.omega, dtype=float), self.amplitude.shape).copy()
        self.phase = np.broadcast_to(np.asarray(self.phase, dtype=float), self.amplitude.shape).copy()
        if np.any(self.amplitude < 0) or np.any(self.amplitude > 0.33):
            raise ValueError("amplitudes must lie in [0, 0.33]")

    def to_list(self):
        ids = self.edges or tuple(range(len(self.amplitude)))
        return [{"edge_id": int(e), "A": float(a), "omega": float(w), "phi": float(p)} for e, a, w, p in zip(ids, self.amplitude, self.omega, self.phase)]


def gait_command(g: GaitParams, t):
    """Commanded contraction per active edge: A * max(0, sin(omega t + phi))."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    return g.amplitude * np.maximum(0.0, np.sin(g.omega * t + g.phase))


# ---------------------------------------------------------------------------
# closed-loop morph scheduler
# ---------------------------------------------------------------------------


class MorphScheduleError(RuntimeError):
    pass


def _sweep_speed(length_mm: float, sweep_time_s: float) -> float:
    return length_mm / sweep_time_s


def build_morph_profile(
    graph: SkeletalGraph,
    target: MorphTarget,
    limits: FabricationLimits | None = None,
    feedback=None,
    sweep_time_s: float = 2.0,
    cool_time_s: float = 60.0,
    max_iterations: int = 3000,
    wait_s: float = 30.0,
    expected_gain: float = 0.03,
) -> ActuationProfile:
    """Greedy closed loop: pop the edge furthest from its target, heat its muscle(s), re-measure.

    ``feedback`` provides ``lengths()``, ``apply(packets)`` and ``wait(dt)``; the
    simulator and a camera tracker both fit. Sweep intensity is scaled by a running
    per-edge estimate of contraction per unit dose so edges approach their target
    without overshooting.
    """
    from .sim import BOTTOM, TOP, SimulatedRobot, muscle_segment

    limits = limits or FabricationLimits()
    rep = check_constraints(graph, target, limits)
    if not rep.ok:
        raise MorphScheduleError("target violates fabrication constraints: " + json.dumps(rep.to_dict()["targets"][0]["violations"]))
    feedback = feedback if feedback is not None else SimulatedRobot(graph)
    rest = graph.rest_lengths()
    tgt = target.target_mm
    delta = target.delta
    m = len(rest)
    window_ms = 1000.0 * (sweep_time_s + cool_time_s)
    visits = np.zeros(m, dtype=np.int64)
    gain = np.full(m, expected_gain)
    last_hot = {}  # muscle -> last sweep start (ms)
    prof = ActuationProfile(budget_used_mm=rep.targets[0].budget_used_mm)
    t_ms = 0
    side_idx = {"bottom": BOTTOM, "top": TOP}
    for it in range(max_iterations):
        L = feedback.lengths()
        err = (L - tgt) / tgt
        if np.all(np.abs(err) <= delta):
            break
        remaining = (L - tgt) / rest  # contraction still to do, as a fraction of flat length
        need = np.where(err > delta)[0]
        if len(need) == 0:
            # only over-contracted edges remain; let them cool back
            feedback.wait(wait_s)
            t_ms += int(1000 * wait_s)
            continue
        heap = [(-priority(remaining[e], visits[e]), int(e)) for e in need]
        heapq.heapify(heap)
        _, e = heapq.heappop(heap)
        sides = curvature_to_muscle(int(target.curvature_sign[e]), True)
        keys = [(e, s) for s in sides]
        hot = {k for k, t0 in last_hot.items() if t_ms - t0 < window_ms}
        if len(hot | set(keys)) > limits.max_concurrent_muscles:
            oldest = min(last_hot[k] for k in hot)
            dt_ms = int(oldest + window_ms - t_ms) + 1
            feedback.wait(dt_ms / 1000.0)
            t_ms += dt_ms
            continue
        inten = float(np.clip(0.6 * remaining[e] / gain[e], 0.01, 1.0))
        packets = []
        for s in sides:
            p, q = muscle_segment(graph, e, side_idx[s])
            pk = LaserPacket(p, q, inten, _sweep_speed(float(np.linalg.norm(q - p)), sweep_time_s), 1)
            prof.entries.append(ProfileEntry(t_ms, pk, e, s))
            last_hot[(e, s)] = t_ms
            prof.visits[(e, s)] = prof.visits.get((e, s), 0) + 1
            packets.append(pk)
            t_ms += _gap_ms(pk)
        before = L[e]
        feedback.apply(packets)
        got = (before - feedback.lengths()[e]) / rest[e]
        if got > 0:
            gain[e] = 0.5 * gain[e] + 0.5 * got / inten
        visits[e] += 1
    else:
        prof.converged = False
        prof.diagnostic = f"iteration cap {max_iterations} reached"
    L = feedback.lengths()
    if np.any(np.abs((L - tgt) / tgt) > delta):
        prof.converged = False
        prof.diagnostic = prof.diagnostic or "edges outside tolerance"
    prof.end_ms = t_ms
    prof.concurrency_peak = concurrency_timeline(prof, sweep_time_s + cool_time_s)
    return prof
