import numpy as np
import pytest

from morphforge.disk import embed_to_disk, init_coarse
from morphforge.mesh import normalize_unit_area, parse_mesh, signed_areas
from morphforge.shapes import disk_mesh, hemisphere_mesh, saddle_mesh


def _rotation_fit(a, b):
    """Best rotation angle taking 2D points a onto b and the residual."""
    za, zb = a[:, 0] + 1j * a[:, 1], b[:, 0] + 1j * b[:, 1]
    rot = np.vdot(za, zb)
    rot /= abs(rot)
    return np.abs(za * rot - zb).max()


def test_flat_disk_near_identity():
    m = disk_mesh(rings=4, per_ring=6)
    e = embed_to_disk(m)
    assert _rotation_fit(m.vertices[:, :2], e.uv) < 0.05


def test_hemisphere_inside_disk_without_flips():
    m = hemisphere_mesh()
    e = embed_to_disk(m)
    r = np.linalg.norm(e.uv, axis=1)
    assert np.allclose(r[m.boundary], 1.0, atol=1e-12)
    assert np.all(r[~m.boundary] < 1.0)
    assert np.all(signed_areas(e.uv, m.faces) > 0)


def test_single_triangle_on_circle():
    m = parse_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    e = embed_to_disk(m)
    assert np.allclose(np.linalg.norm(e.uv, axis=1), 1.0)
    assert signed_areas(e.uv, m.faces)[0] > 0


def test_lift_at_vertices_and_centroids():
    m = normalize_unit_area(saddle_mesh(rings=3, per_ring=6))
    e = embed_to_disk(m)
    assert np.allclose(e.lift(e.uv), m.vertices, atol=1e-12)
    cen_uv = e.uv[m.faces].mean(1)
    assert np.allclose(e.lift(cen_uv), m.vertices[m.faces].mean(1), atol=1e-12)


def test_lift_outside_is_projected_and_flagged():
    m = disk_mesh(rings=3, per_ring=6)
    e = embed_to_disk(m)
    b = int(np.where(m.boundary)[0][0])
    p = e.uv[b] * (1 + 1e-6)
    q, outside = e.lift(p, return_flags=True)
    assert outside
    assert np.linalg.norm(q - m.vertices[b]) < 1e-5
    _, inside = e.lift(0.5 * e.uv[b], return_flags=True)
    assert not inside


def test_init_coarse():
    srcs = [embed_to_disk(disk_mesh(2, 6)), embed_to_disk(saddle_mesh(2, 6))]
    tri = init_coarse(srcs)
    assert tri.n_vertices == 4 and len(tri.faces) == 2
    assert np.allclose(np.linalg.norm(tri.flat, axis=1), 1.0)
    assert signed_areas(tri.flat, tri.faces).sum() == pytest.approx(2.0)
    for u in tri.uv:
        assert np.allclose(u, tri.flat)


def test_init_coarse_needs_two():
    with pytest.raises(ValueError):
        init_coarse([embed_to_disk(disk_mesh(2, 6))])
