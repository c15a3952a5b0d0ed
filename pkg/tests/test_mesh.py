import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraccontrol.mesh import (Disc, Interval, Mesh, build_mesh, graded_points, load_mesh, mesh_stats,
                              save_mesh)


def _domain_measure_ok(mesh, target):
    return abs(mesh.cell_measures().sum() - target) <= 1e-12 * target


def test_uniform_interval_example():
    m = build_mesh(Interval(-1, 1), 0.5)
    assert np.allclose(m.vertices[:, 0], [-1, -0.5, 0, 0.5, 1])
    assert m.n_cells == 4
    st_ = mesh_stats(m)
    assert st_.h_max == st_.h_min == 0.5
    assert st_.n_interior_dofs == 3


def test_graded_interval_boundary_cells():
    m = build_mesh(Interval(-1, 1), 0.25, kappa=2.0)
    x = np.sort(m.vertices[:, 0])
    sizes = np.diff(x)
    assert 0.0625 / 2 <= sizes[0] <= 0.0625 * 2
    assert 0.0625 / 2 <= sizes[-1] <= 0.0625 * 2
    half = sizes[: len(sizes) // 2]
    assert np.all(np.diff(half) > 0)
    assert sizes == pytest.approx(sizes[::-1], abs=1e-14)


def test_disc_example():
    m = build_mesh(Disc(), 0.5)
    st_ = mesh_stats(m)
    assert st_.sigma <= 3.0
    area = m.cell_measures().sum()
    assert area < math.pi and area > 0.95 * math.pi


@pytest.mark.parametrize("kappa", [1.0, 1.5, 2.0])
@pytest.mark.parametrize("h", [0.5, 0.25, 0.125])
def test_disc_invariants(h, kappa):
    m = build_mesh(Disc(), h, kappa=kappa)
    assert np.all(m.cell_measures() > 0)
    r = np.hypot(*m.vertices[m.boundary].T)
    assert np.allclose(r, 1.0, atol=1e-10)
    poly = m.boundary_polygon()
    assert _domain_measure_ok(m, poly.measure)
    assert mesh_stats(m).sigma <= 10


def test_interval_covers_domain():
    for kappa in (1.0, 2.0):
        m = build_mesh(Interval(-1, 1), 0.1, kappa=kappa)
        assert _domain_measure_ok(m, 2.0)
        assert np.all(m.vertices[m.cells[:, 0], 0] < m.vertices[m.cells[:, 1], 0])


def test_single_equilateral_triangle_sigma():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    m = Mesh(v, np.array([[0, 1, 2]]), np.ones(3, dtype=bool))
    assert mesh_stats(m).sigma == pytest.approx(math.sqrt(3), rel=1e-12)


def test_empty_mesh_rejected():
    m = Mesh(np.zeros((0, 1)), np.zeros((0, 2), dtype=int), np.zeros(0, dtype=bool))
    with pytest.raises(ValueError):
        mesh_stats(m)


@pytest.mark.parametrize("bad", [dict(target_h=0.0), dict(target_h=-1.0), dict(target_h=0.5, kappa=0.5),
                                 dict(target_h=0.5, kappa=2.5)])
def test_build_rejects(bad):
    with pytest.raises(ValueError):
        build_mesh(Interval(-1, 1), **bad)


def test_degenerate_domains_rejected():
    with pytest.raises(ValueError):
        Interval(1.0, 1.0)
    with pytest.raises(ValueError):
        Disc(radius=0.0)


@pytest.mark.parametrize("domain", [Interval(-1, 1), Disc()])
def test_refinement_doubles_cells(domain):
    a = build_mesh(domain, 0.25)
    b = build_mesh(domain, 0.125)
    assert b.n_cells >= 2 * a.n_cells
    ratio = mesh_stats(a).h_max / mesh_stats(b).h_max
    assert 2 / 1.5 <= ratio <= 2 * 1.5


def test_quasi_uniform_ratio():
    for domain in (Interval(-1, 1), Disc()):
        st_ = mesh_stats(build_mesh(domain, 0.125))
        assert st_.h_max / st_.h_min <= 4


def test_graded_disc_cell_count_scaling():
    ratios = []
    for h in (0.25, 0.125, 0.0625):
        n = build_mesh(Disc(), h, kappa=2.0).n_dofs
        ratios.append(n / (h**-2 * abs(math.log(h))))
    assert max(ratios) / min(ratios) <= 3


def test_graded_disc_boundary_cells_small():
    h = 0.125
    m = build_mesh(Disc(), h, kappa=2.0)
    d = m.cell_diameters()[m.boundary_cells()]
    assert d.max() <= 4 * h**2 * 4


@given(st.floats(0.02, 1.0), st.sampled_from([1.0, 1.3, 2.0]))
@settings(max_examples=25, deadline=None)
def test_interval_mesh_property(h, kappa):
    m = build_mesh(Interval(-1, 1), h, kappa=kappa)
    assert _domain_measure_ok(m, 2.0)
    assert m.n_dofs == m.n_vertices - 2
    assert mesh_stats(m).h_max <= 2 * h


def test_graded_points_symmetric():
    p = graded_points(8, 2.0)
    assert p[0] == -1 and p[-1] == 1
    assert np.allclose(p, -p[::-1])


@pytest.mark.parametrize("domain", [Interval(-1, 1), Disc()])
def test_roundtrip_bit_exact(tmp_path, domain):
    m = build_mesh(domain, 0.3, kappa=1.5)
    path = tmp_path / "m.txt"
    save_mesh(m, path)
    m2 = load_mesh(path)
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.cells, m2.cells)
    assert np.array_equal(m.boundary, m2.boundary)
    assert path.read_text().startswith(f"DIM {m.dim}\nVERTICES")


def test_mesh_is_immutable():
    m = build_mesh(Interval(-1, 1), 0.5)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 3.0
