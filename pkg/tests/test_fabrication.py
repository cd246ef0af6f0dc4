import numpy as np
import pytest

from morphforge.fabrication import (
    FabricationLimits,
    actuation_capacity,
    check_constraints,
    check_target,
    feasible_scale_range,
    muscle_placement,
    shrink_ratio,
)
from morphforge.graph import MorphTarget, graph_from_edges


@pytest.mark.parametrize("flat,target,expected", [(40, 30, 0.25), (30, 30, 0.0), (90, 60, 1 / 3)])
def test_shrink_ratio(flat, target, expected):
    assert shrink_ratio(flat, target) == pytest.approx(expected)


def _chain(n, length):
    nodes = np.array([[i * length, 0.0, 0.0] for i in range(n + 1)])
    return graph_from_edges(nodes, [(i, i + 1) for i in range(n)])


def test_budget_within_limit():
    g = _chain(22, 40.0)
    t = MorphTarget(np.full(22, 30.0), np.zeros(22, int))
    rep = check_constraints(g, [t])
    assert rep.targets[0].budget_used_mm == pytest.approx(220.0)
    assert rep.ok


def test_budget_exceeded():
    g = _chain(31, 40.0)
    t = MorphTarget(np.full(31, 30.0), np.zeros(31, int))
    rep = check_constraints(g, [t])
    assert [v.code for v in rep.violations()] == ["budget"]


def test_short_edge_violation():
    g = graph_from_edges(np.array([[0.0, 0, 0], [25, 0, 0], [65, 0, 0]]), [(0, 1), (1, 2)])
    t = MorphTarget(np.array([24.0, 35.0]), np.zeros(2, int))
    v = check_constraints(g, [t]).violations()
    assert [(x.code, x.edge_id) for x in v] == [("min_length", 0)]


def test_ratio_violation():
    rep = check_target([50.0, 50.0], [30.0, 45.0], FabricationLimits())
    assert [(x.code, x.edge_id) for x in rep.violations] == [("ratio", 0)]
    assert rep.violations[0].value == pytest.approx(0.40)


def test_ratio_bound_is_strict():
    rep = check_target([100.0], [67.0], FabricationLimits())
    assert [x.code for x in rep.violations] == ["ratio"]


def test_expansion_violation():
    rep = check_target([40.0], [41.0], FabricationLimits())
    assert [x.code for x in rep.violations] == ["expansion"]


def test_feasible_scale_range():
    lo, hi = feasible_scale_range([0.5, 1.0], [[0.4, 0.9]], FabricationLimits())
    assert lo == pytest.approx(60.0)
    assert hi == pytest.approx(1500.0)


@pytest.mark.parametrize("op,cool,expected", [(2, 60, 30), (5, 5, 1), (10, 5, 0)])
def test_actuation_capacity(op, cool, expected):
    assert actuation_capacity(op, cool) == expected


def test_muscle_placement_canonical():
    a = muscle_placement((2, 7, 30.0))
    b = muscle_placement((7, 2, 30.0))
    assert a == b
    assert (a.start, a.end, a.bottom_side, a.top_side) == (2, 7, "left", "right")
    assert a.cut_length_mm == pytest.approx(31.5)


def test_limits_validation():
    with pytest.raises(ValueError):
        FabricationLimits(total_budget_mm=0)
    with pytest.raises(ValueError):
        FabricationLimits(max_shrink_ratio=1.0)
