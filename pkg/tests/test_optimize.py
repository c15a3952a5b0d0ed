import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraccontrol.assembly import QuadConfig
from fraccontrol.checks import duality_gap, gradient_check
from fraccontrol.mesh import Interval, build_mesh
from fraccontrol.optimize import (ControlField, ControlProblem, OptimizeReport, ProblemSpec,
                                  box_project, optimality_residual, project_control,
                                  reduced_gradient, reduced_objective, solve_control_bfgs,
                                  solve_unconstrained_cg)
from fraccontrol.oracle import manufactured_1d
from fraccontrol.timestepping import TimeGrid, Trajectory


def _zero(t, x):
    return np.zeros(len(x))


@pytest.fixture(scope="module")
def small():
    spec, _ = manufactured_1d(0.5)
    mesh = build_mesh(Interval(-1, 1), 2 / 16)
    grid = TimeGrid(1.0, 8)
    return ControlProblem(spec, mesh, grid, solver="cholesky")


def test_spec_validation():
    for bad in (dict(s=1.0), dict(mu=0.0), dict(a=1.0, b=0.0), dict(T=-1.0)):
        kw = dict(s=0.5, mu=0.1, a=-1.0, b=1.0, T=1.0, f=_zero, u_d=_zero, u0=lambda x: 0 * x[:, 0])
        kw.update(bad)
        with pytest.raises(ValueError):
            ProblemSpec(**kw)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-5, 0), st.floats(0, 5))
@settings(max_examples=60, deadline=None)
def test_box_project(v, a, b):
    v = np.array(v)
    p = box_project(v, a, b)
    assert np.all((p >= a) & (p <= b))
    assert np.array_equal(box_project(p, a, b), p)
    inside = (v >= a) & (v <= b)
    assert np.array_equal(p[inside], v[inside])


def test_box_project_rejects_and_control_field():
    with pytest.raises(ValueError):
        box_project(np.zeros(2), 1.0, 0.0)
    m = build_mesh(Interval(-1, 1), 0.5)
    g = TimeGrid(1.0, 2)
    Z = ControlField.constant(m, g, 3.0)
    assert np.all(box_project(Z, -1, 1).values == 1)
    assert Z.norm() == pytest.approx(3 * np.sqrt(2.0))
    with pytest.raises(ValueError):
        ControlField(m, g, np.zeros((3, m.n_cells)))


def test_project_control_linear_example():
    m = build_mesh(Interval(-1, 1), 0.25)
    g = TimeGrid(1.0, 3)
    Z = project_control(lambda t, x: x[:, 0] * t, m, g)
    c = m.centroids()[:, 0]
    t = g.nodes
    for k in range(3):
        assert np.allclose(Z.values[k], c * (t[k] + t[k + 1]) / 2, atol=1e-14)
    # cell [0, h] averages x to h/2
    i = np.argmin(np.abs(c - 0.125))
    assert Z.values[0, i] / ((t[0] + t[1]) / 2) == pytest.approx(0.125)


def test_project_control_orthogonality(rng):
    m = build_mesh(Interval(-1, 1), 0.25)
    g = TimeGrid(1.0, 4)

    def w(t, x):
        return x[:, 0] ** 3 * t**2 + x[:, 0]

    Z = project_control(w, m, g)
    # residual w - Z is orthogonal to every piecewise constant: integrate with a fine rule
    Y = rng.standard_normal(Z.values.shape)
    from fraccontrol.assembly import LoadOperator
    L = LoadOperator(m, 8)
    nc = m.n_cells
    q = len(L.weights) // nc
    xg, wg = np.polynomial.legendre.leggauss(6)
    total = 0.0
    for k in range(4):
        for xi, wi in zip(xg, wg):
            tk = g.nodes[k] + (xi + 1) / 2 * g.tau
            r = (w(tk, L.points) - np.repeat(Z.values[k], q)) * np.repeat(Y[k], q)
            total += wi / 2 * g.tau * L.integral(r)
    assert abs(total) < 1e-12


def test_nodal_projection_requires_steps_one_to_k(small):
    U = small.state(np.zeros((8, small.mesh.n_cells)))
    with pytest.raises(ValueError):
        project_control(U, small.mesh, small.grid)


def test_mu_term_isolated(small):
    Z = np.full((8, small.mesh.n_cells), 0.3)
    t0, c0 = small.objective_parts(np.zeros_like(Z))
    _, c1 = small.objective_parts(Z)
    assert c0 == 0
    assert c1 == pytest.approx(0.5 * small.spec.mu * 0.09 * 2.0, rel=1e-13)


def test_objective_lower_bound(small, rng):
    for _ in range(5):
        Z = rng.uniform(-1, 1, (8, small.mesh.n_cells))
        J = small.objective(Z)
        assert J >= 0.5 * small.spec.mu * np.sum(small.weights * Z * Z) - 1e-14
        track, _ = small.objective_parts(Z)
        assert track >= -1e-14


def test_gradient_matches_finite_differences(small, rng):
    assert gradient_check(small, rng, n_pairs=5).max() <= 1e-6


def test_duality_identity(small, rng):
    assert duality_gap(small, rng) <= 1e-10


def test_gradient_with_zero_adjoint():
    # u_d tracks exactly the uncontrolled state only if everything is zero
    spec = ProblemSpec(0.5, 0.2, -1, 1, 1.0, _zero, _zero, lambda x: np.zeros(len(x)))
    mesh = build_mesh(Interval(-1, 1), 0.25)
    grid = TimeGrid(1.0, 4)
    prob = ControlProblem(spec, mesh, grid, solver="cholesky")
    Z0 = np.zeros((4, mesh.n_cells))
    _, g, _, P = prob.evaluate(Z0)
    assert np.all(P.values == 0) and np.all(g == 0)


def test_gradient_is_affine(small, rng):
    Z1, Z2 = rng.standard_normal((2, 8, small.mesh.n_cells))
    g1, g2 = small.gradient(Z1), small.gradient(Z2)
    gm = small.gradient(0.25 * Z1 + 0.75 * Z2)
    assert np.allclose(gm, 0.25 * g1 + 0.75 * g2, atol=1e-10)


def test_wrapper_functions(small):
    Z = ControlField.constant(small.mesh, small.grid, 0.1)
    assert reduced_objective(Z, small.spec, problem=small) == pytest.approx(small.objective(Z.values))
    assert np.allclose(reduced_gradient(Z, small.spec, problem=small).values, small.gradient(Z.values))
    PiP = small.adjoint_average(small.adjoint(small.state(Z.values)))
    assert optimality_residual(Z, PiP, small.spec) == pytest.approx(small.residual(Z.values))


def test_unconstrained_matches_cg_oracle():
    spec0, _ = manufactured_1d(0.5)
    spec = ProblemSpec(0.5, spec0.mu, -1e6, 1e6, 1.0, spec0.f, spec0.u_d, spec0.u0)
    mesh = build_mesh(Interval(-1, 1), 2 / 16)
    grid = TimeGrid(1.0, 8)
    prob = ControlProblem(spec, mesh, grid, solver="cholesky")
    Zc = solve_unconstrained_cg(prob)
    Z, _, _, rep = solve_control_bfgs(spec, mesh, grid, problem=prob, tol=1e-11)
    assert rep.converged
    assert np.sqrt(np.sum(prob.weights * (Z.values - Zc.values) ** 2)) <= 1e-6 * max(Zc.norm(), 1)


def test_saturated_box():
    # with a desired state far above anything reachable the control sits on b
    spec = ProblemSpec(0.5, 1e-3, 0.0, 0.2, 1.0, _zero, lambda t, x: 100 * np.ones(len(x)),
                       lambda x: np.zeros(len(x)))
    mesh = build_mesh(Interval(-1, 1), 0.25)
    grid = TimeGrid(1.0, 4)
    Z, _, _, rep = solve_control_bfgs(spec, mesh, grid, solver="cholesky")
    assert rep.converged
    assert np.all(Z.values[:-1] == 0.2)


def test_bfgs_history_and_box(small):
    Z, U, P, rep = solve_control_bfgs(small.spec, small.mesh, small.grid, problem=small)
    assert rep.converged and rep.residual <= 1e-8 * (1 + abs(rep.history[0]))
    assert all(b <= a + 1e-13 * (1 + abs(a)) for a, b in zip(rep.history[:-1], rep.history[1:]))
    assert np.all((Z.values >= small.spec.a) & (Z.values <= small.spec.b))
    assert small.residual(Z.values) <= 1e-8 * (1 + abs(rep.history[0]))


def test_bfgs_unique_from_two_starts(small, rng):
    Z1, *_ = solve_control_bfgs(small.spec, small.mesh, small.grid, problem=small, tol=1e-11)
    Z0 = rng.uniform(small.spec.a, small.spec.b, (8, small.mesh.n_cells))
    Z2, *_ = solve_control_bfgs(small.spec, small.mesh, small.grid, problem=small, tol=1e-11, Z0=Z0)
    assert np.sqrt(np.sum(small.weights * (Z1.values - Z2.values) ** 2)) <= 1e-6


def test_report_csv(tmp_path):
    rep = OptimizeReport(1, 0.5, 1e-9, True, [1.0, 0.5], [(0, np.float64(1.0), 1.0, 0.0),
                                                           (1, 0.5, 1e-9, 0.3)])
    p = tmp_path / "log.csv"
    rep.dump_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,J,residual,step_length"
    assert lines[1] == "0,1.0,1.0,0.0"


def test_grid_horizon_must_match():
    spec, _ = manufactured_1d(0.5)
    with pytest.raises(ValueError):
        ControlProblem(spec, build_mesh(Interval(-1, 1), 0.5), TimeGrid(2.0, 2),
                       quad=QuadConfig(2, 3))
