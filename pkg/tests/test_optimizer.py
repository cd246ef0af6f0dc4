from dataclasses import replace

import numpy as np
import pytest
from conftest import design_sources

from morphforge.disk import embed_to_disk, init_coarse
from morphforge.energy import MAP_WEIGHTS, StageWeights, energy_terms, make_state, total_energy
from morphforge.mesh import CompatibleTriangulation
from morphforge.optimizer import (
    StageConfig,
    continuous_step,
    curvature_signs,
    design,
    discrete_step,
    eps2_schedule,
    fab_stage,
    map_stage,
    run_stage,
)
from morphforge.shapes import disk_mesh, dome_mesh, saddle_mesh

NOTHING = StageWeights(0.03, 0, 0, 0, 0, 0, 0, 0, False)


def _hexagon_state(weights, centre=(0.0, 0.0)):
    ang = np.deg2rad(np.arange(0, 360, 60))
    uv = np.vstack([np.column_stack([np.cos(ang), np.sin(ang)]), [[0.0, 0.0]]])
    faces = [[6, k, (k + 1) % 6] for k in range(6)]
    flat = uv.copy()
    flat[6] = centre
    srcs = [embed_to_disk(disk_mesh(2, 6)), embed_to_disk(disk_mesh(2, 6))]
    tri = CompatibleTriangulation(faces, [uv.copy(), uv.copy()], flat)
    return make_state(tri, srcs, weights)


def test_stage_config_rules():
    with pytest.raises(ValueError):
        StageConfig("fab", MAP_WEIGHTS, 10, True)
    with pytest.raises(ValueError):
        StageConfig("other", MAP_WEIGHTS, 10, True)
    assert map_stage().change_topology and not fab_stage().change_topology


def test_continuous_step_at_minimum_is_unchanged():
    s = _hexagon_state(NOTHING)
    out, info = continuous_step(s)
    assert out is s and not info.accepted


def test_continuous_step_recentres_displaced_vertex():
    s = _hexagon_state(replace(NOTHING, w_bij=1.0), centre=(0.2, 0.1))
    mask = np.zeros(len(s.variables()), bool)
    mask[-2:] = True  # only the interior flat vertex moves
    out, info = continuous_step(s, mask=mask)
    assert info.accepted and info.energy_after < info.energy_before
    assert total_energy(out) < total_energy(s)
    assert np.linalg.norm(out.tri.flat[6]) < np.linalg.norm(s.tri.flat[6])


def test_discrete_step_splits_coarse_state():
    srcs = design_sources()
    s = make_state(init_coarse(srcs), srcs, MAP_WEIGHTS)
    before = energy_terms(s)["approx"]
    out, info = discrete_step(s, np.random.default_rng(0))
    assert info.accepted and "split" in info.detail
    assert len(out.tri.faces) > 2
    assert energy_terms(out)["approx"] < before
    assert total_energy(out) < total_energy(s)


def test_discrete_step_frozen_topology():
    srcs = design_sources()
    s = make_state(init_coarse(srcs), srcs, replace(MAP_WEIGHTS, change_topology=False))
    out, info = discrete_step(s)
    assert out is s and not info.accepted


def test_discrete_step_no_improving_op():
    s = _hexagon_state(NOTHING)
    out, info = discrete_step(s)
    assert out is s and not info.accepted


def test_run_stage_zero_iterations():
    srcs = design_sources()
    s = make_state(init_coarse(srcs), srcs, MAP_WEIGHTS)
    out = run_stage(s, map_stage(0))
    assert np.array_equal(out.variables(), s.variables())
    assert np.array_equal(out.tri.faces, s.tri.faces)


def test_map_then_fab_stage():
    srcs = design_sources()
    s = make_state(init_coarse(srcs), srcs, MAP_WEIGHTS)
    e0 = total_energy(s)
    trace = []
    m = run_stage(s, map_stage(6), np.random.default_rng(0), trace)
    assert total_energy(m) < e0 and len(m.tri.faces) > 2
    assert all(t.energy_after <= t.energy_before for t in trace if t.accepted)
    f = run_stage(m, fab_stage(3), np.random.default_rng(0))
    assert np.array_equal(f.tri.faces, m.tri.faces)


def test_eps2_schedule():
    assert eps2_schedule(0, 100) == 0.25
    assert eps2_schedule(50, 100) == pytest.approx(0.125)
    assert 0 < eps2_schedule(99, 100) < 0.01


def test_curvature_signs_dome_and_flat():
    d = dome_mesh(4, 6)
    flat = d.vertices[:, :2]
    signs = curvature_signs(d.vertices, d.faces, flat)
    assert (signs == 1).sum() > (signs == -1).sum()
    assert np.all(curvature_signs(disk_mesh(4, 6).vertices, d.faces, flat) == 0)
    s = saddle_mesh(4, 6)
    ss = curvature_signs(s.vertices, s.faces, flat)
    assert (ss == 1).any() and (ss == -1).any()


@pytest.fixture(scope="module")
def identical_flat_design():
    return design([disk_mesh(3, 6), disk_mesh(3, 6)], iterations=(3, 3), seed=0)


def test_identical_flat_targets(identical_flat_design):
    res = identical_flat_design
    for mt in res.morph_targets:
        assert np.all(mt.curvature_sign == 0)
        r = 1 - mt.target_mm / res.graph.rest_lengths()
        # the flat layout is seeded just above the band floor, so ratios stay near zero
        assert np.all(np.abs(r) < 0.02)
    assert res.ok


def test_design_deterministic(identical_flat_design):
    again = design([disk_mesh(3, 6), disk_mesh(3, 6)], iterations=(3, 3), seed=0)
    assert np.array_equal(again.tri.flat, identical_flat_design.tri.flat)
    assert np.array_equal(again.graph.nodes, identical_flat_design.graph.nodes)
    for a, b in zip(again.morph_targets, identical_flat_design.morph_targets):
        assert np.array_equal(a.target_mm, b.target_mm)


def test_design_needs_two_targets():
    with pytest.raises(ValueError):
        design([dome_mesh(2, 6)])
