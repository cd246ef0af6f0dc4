"""Fabrication constraints, actuation budget and muscle placement rules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import MorphTarget, SkeletalGraph


@dataclass(frozen=True)
class FabricationLimits:
    max_shrink_ratio: float = 0.33
    total_budget_mm: float = 300.0
    min_edge_mm: float = 30.0
    max_concurrent_muscles: int = 30
    slack_ratio: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")
        if self.max_shrink_ratio >= 1:
            raise ValueError("max_shrink_ratio must be < 1")


def shrink_ratio(flat_mm, target_mm):
    """(flat - target) / flat; negative values mean the edge would have to grow."""
    flat = np.asarray(flat_mm, dtype=float)
    if np.any(flat <= 0):
        raise ValueError("flat length must be positive")
    r = (flat - np.asarray(target_mm, dtype=float)) / flat
    return float(r) if r.ndim == 0 else r


@dataclass
class Violation:
    code: str  # budget | ratio | expansion | min_length | mismatch
    edge_id: int | None
    value: float
    limit: float

    @property
    def margin(self) -> float:
        return self.limit - self.value


@dataclass
class TargetReport:
    target_id: str
    budget_used_mm: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "budget_used_mm": self.budget_used_mm,
            "violations": [asdict(v) for v in self.violations],
        }


@dataclass
class ConstraintReport:
    targets: list
    limits: FabricationLimits = field(default_factory=FabricationLimits)

    @property
    def ok(self) -> bool:
        return all(t.ok for t in self.targets)

    def violations(self):
        return [v for t in self.targets for v in t.violations]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "limits": asdict(self.limits), "targets": [t.to_dict() for t in self.targets]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def check_target(flat_mm, target_mm, limits: FabricationLimits, target_id="target") -> TargetReport:
    """Check one target's per-edge lengths against the flat lengths (both in mm)."""
    flat = np.asarray(flat_mm, dtype=float)
    tgt = np.asarray(target_mm, dtype=float)
    rep = TargetReport(target_id, 0.0)
    if flat.shape != tgt.shape:
        rep.violations.append(Violation("mismatch", None, float(tgt.size), float(flat.size)))
        return rep
    rep.budget_used_mm = float(np.abs(flat - tgt).sum())
    for i, l in enumerate(flat):
        if not l > limits.min_edge_mm:
            rep.violations.append(Violation("min_length", i, float(l), limits.min_edge_mm))
    if np.any(flat <= 0):
        return rep
    r = shrink_ratio(flat, tgt)
    for i, ri in enumerate(np.atleast_1d(r)):
        if ri < 0:
            rep.violations.append(Violation("expansion", i, float(ri), 0.0))
        elif not ri < limits.max_shrink_ratio:
            rep.violations.append(Violation("ratio", i, float(ri), limits.max_shrink_ratio))
    if rep.budget_used_mm > limits.total_budget_mm:
        rep.violations.append(Violation("budget", None, rep.budget_used_mm, limits.total_budget_mm))
    return rep


def check_constraints(flat: SkeletalGraph, targets, limits: FabricationLimits | None = None) -> ConstraintReport:
    """Verdict per target: budget, strict shrink-ratio bound, strict minimum flat edge length."""
    limits = limits or FabricationLimits()
    if isinstance(targets, MorphTarget):
        targets = [targets]
    flat_mm = flat.rest_lengths()
    return ConstraintReport([check_target(flat_mm, t.target_mm, limits, t.target_id) for t in targets], limits)


def feasible_scale_range(flat_unit, targets_unit, limits: FabricationLimits | None = None):
    """Interval of scale factors (mm per design unit) where all absolute limits can hold.

    Ratios are scale free; the minimum length bound is a lower bound on the scale and
    the budget an upper bound. Returns ``(lo, hi)``; the range is empty when lo >= hi.
    """
    limits = limits or FabricationLimits()
    flat_unit = np.asarray(flat_unit, dtype=float)
    lo = limits.min_edge_mm / float(flat_unit.min())
    used = max(float(np.abs(flat_unit - np.asarray(t, dtype=float)).sum()) for t in targets_unit)
    hi = math.inf if used == 0 else limits.total_budget_mm / used
    return lo, hi


def actuation_capacity(op_time_s: float, cool_time_s: float) -> int:
    """How many muscles one laser can keep hot: floor(cooling time / operating time)."""
    if op_time_s <= 0:
        raise ValueError("operating time must be positive")
    return int(math.floor(cool_time_s / op_time_s))


@dataclass(frozen=True)
class MusclePlacement:
    start: int  # lower node index
    end: int
    bottom_side: str
    top_side: str
    cut_length_mm: float


def muscle_placement(edge, limits: FabricationLimits | None = None) -> MusclePlacement:
    """Bottom muscle on the left and top on the right, walking from the lower to the higher index.

    ``edge`` is a graph ``Edge`` or a tuple ``(a, b, length_mm)``.
    """
    limits = limits or FabricationLimits()
    if hasattr(edge, "rest_mm"):
        a, b, length = edge.a, edge.b, edge.rest_mm
    else:
        a, b, length = edge
    if a == b:
        raise ValueError("edge endpoints must differ")
    lo, hi = sorted((int(a), int(b)))
    return MusclePlacement(lo, hi, "left", "right", float(length) * (1 + limits.slack_ratio))
