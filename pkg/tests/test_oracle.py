import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_jacobi, gamma

from fraccontrol.oracle import (JacobiIndex, TimeProfile, active_radius, build_manufactured,
                                exact_optimal_triple, exact_pair_1d, exact_pair_2d, gen_binom,
                                jacobi_eval, manufactured_1d, manufactured_2d_i, norm_sq_separable,
                                poisson_pair_1d, poisson_pair_2d, problem_2d_ii, rhs_constant_1d,
                                rhs_constant_2d, standard_profile)


def test_jacobi_degree_zero():
    assert np.all(jacobi_eval(JacobiIndex(0, 0.3, -0.5), np.linspace(-1, 1, 7)) == 1)


@pytest.mark.parametrize("alpha", [0.25, 0.5, 2.0])
def test_jacobi_endpoint_identity(alpha):
    assert jacobi_eval(JacobiIndex(1, alpha, 0.5), 1.0) == pytest.approx(alpha + 1)
    for k in range(6):
        ref = gamma(k + alpha + 1) / (gamma(alpha + 1) * math.factorial(k))
        assert jacobi_eval(JacobiIndex(k, alpha, -0.5), 1.0) == pytest.approx(ref, rel=1e-12)


def test_legendre_value():
    assert jacobi_eval(JacobiIndex(2, 0, 0), 0.0) == pytest.approx(-0.5)


@given(st.integers(0, 20), st.floats(-0.9, 3.0), st.floats(-0.9, 3.0), st.floats(-1, 1))
@settings(max_examples=80, deadline=None)
def test_jacobi_matches_scipy(k, a, b, x):
    ref = eval_jacobi(k, a, b, x)
    assert jacobi_eval(JacobiIndex(k, a, b), x) == pytest.approx(ref, rel=1e-11, abs=1e-11)


def test_jacobi_rejects_parameters():
    with pytest.raises(ValueError):
        JacobiIndex(1, -1.0, 0.0)
    with pytest.raises(ValueError):
        JacobiIndex(-1, 0.0, 0.0)


def test_gen_binom():
    assert gen_binom(5, 2) == pytest.approx(10)
    assert gen_binom(0.5, 0.5) == pytest.approx(1.0)


def test_pair_1d_half_example():
    x = np.linspace(-0.99, 0.99, 11)
    u, f = exact_pair_1d(0, 0, 0.5, x)
    assert np.allclose(f, 1.0, rtol=1e-14)
    assert np.allclose(u, np.sqrt(1 - x**2))


def test_pair_1d_boundary_and_parity():
    for k in range(4):
        for j in (0, 1):
            u, _ = exact_pair_1d(k, j, 0.3, np.array([-1.0, 1.0, 1.5]))
            assert np.all(u == 0)
        x = np.linspace(-0.9, 0.9, 9)
        u0, _ = exact_pair_1d(k, 0, 0.3, x)
        u1, _ = exact_pair_1d(k, 1, 0.3, x)
        assert np.allclose(u0, u0[::-1]) and np.allclose(u1, -u1[::-1])
        assert exact_pair_1d(k, 1, 0.3, np.array([0.0]))[0][0] == 0


def test_pair_2d_examples():
    r = np.linspace(0, 0.95, 6)
    u, _ = exact_pair_2d(0, 0, 0.4, r, 1.3)
    assert np.allclose(u, (1 - r**2) ** 0.4)
    th = np.linspace(0, 2 * np.pi, 5)
    u1, _ = exact_pair_2d(1, 3, 0.4, 0.5, th)
    u2, _ = exact_pair_2d(1, 3, 0.4, 0.5, th + 2 * np.pi / 3)
    assert np.allclose(u1, u2)
    assert np.all(exact_pair_2d(2, 1, 0.4, np.array([1.0, 1.2]), 0.0)[0] == 0)


def test_rhs_2d_half_center():
    ref = 2 * gamma(1.5) ** 2 * gen_binom(0.5, 0.5) ** 2
    assert rhs_constant_2d(0, 0, 0.5) == pytest.approx(ref, rel=1e-14)
    assert ref == pytest.approx(math.pi / 2, rel=1e-14)
    assert exact_pair_2d(0, 0, 0.5, 0.0, 0.0)[1] == pytest.approx(math.pi / 2)


def test_rhs_1d_known_value():
    assert rhs_constant_1d(0, 0, 0.5) == pytest.approx(1.0, rel=1e-14)


def test_active_radius_example():
    r = active_radius(0.0, 0.5)
    assert r == pytest.approx(math.sqrt(1 - (0.5 / math.sin(1)) ** 2), rel=1e-14)
    assert r == pytest.approx(0.804, abs=1e-3)
    assert active_radius(1.0, 0.5) == 0


def test_time_profile_checks():
    with pytest.raises(ValueError):
        TimeProfile(np.sin, np.cos, np.sin, np.cos, 1.0)
    p = standard_profile(2.0)
    assert p.phi(2.0) == 0 and p.psi(0.0) == 1


def test_manufactured_1d_triple(rng):
    spec, tri = manufactured_1d(0.5)
    x = rng.uniform(-1, 1, (100, 1))
    assert np.allclose(tri.state(0.0, x), spec.u0(x), atol=1e-12)
    assert np.allclose(tri.adjoint(1.0, x), 0.0, atol=1e-12)
    t = rng.uniform(0, 1, (100,))
    u, p, z = exact_optimal_triple(tri, t, x[:, 0:1].T.reshape(100, 1))
    assert np.all((z >= -0.5) & (z <= 0.5))
    assert np.allclose(z, np.clip(-p / 0.1, -0.5, 0.5), atol=1e-12)


def test_manufactured_1d_active_set(rng):
    spec, tri = manufactured_1d(0.5)
    t = 0.2
    r = active_radius(t, 0.5)
    x = np.array([[0.5 * r], [min(0.99, r + 0.5 * (1 - r))]])
    z = tri.control(t, x)
    assert z[0] == 0.5
    assert z[1] == pytest.approx(math.sin(0.8) * (1 - x[1, 0] ** 2) ** 0.5)
    assert np.all(tri.control(1.0, x) == 0)


def test_manufactured_satisfies_state_equation():
    # time derivative of u plus f_u equals f plus the control
    spec, tri = manufactured_2d_i(0.75)
    x = np.array([[0.3, -0.2], [0.1, 0.5]])
    t, e = 0.4, 1e-6
    dudt = (tri.state(t + e, x) - tri.state(t - e, x)) / (2 * e)
    lhs = dudt + np.cos(t) * tri.u.f(x)
    assert np.allclose(lhs, spec.f(t, x) + tri.control(t, x), atol=1e-8)


def test_manufactured_satisfies_adjoint_equation():
    # -dp/dt + (-Δ)^s p = u - u_d with p = -μ φ v, (-Δ)^s v = g
    spec, tri = manufactured_1d(0.4)
    x = np.array([[0.3], [-0.6]])
    t, e = 0.3, 1e-6
    dpdt = (tri.adjoint(t + e, x) - tri.adjoint(t - e, x)) / (2 * e)
    frac = -0.1 * math.sin(1 - t) * tri.v.f(x)
    assert np.allclose(-dpdt + frac, tri.state(t, x) - spec.u_d(t, x), atol=1e-8)


def test_build_rejects_mismatched_s():
    with pytest.raises(ValueError):
        build_manufactured(0.5, 0.1, -0.5, 0.5, 1.0, poisson_pair_1d(0, 0, 0.5), poisson_pair_1d(0, 0, 0.4))
    with pytest.raises(ValueError):
        build_manufactured(0.5, 0.1, -0.5, 0.5, 1.0, poisson_pair_1d(0, 0, 0.5), poisson_pair_2d(0, 0, 0.5))


def test_problem_ii_data():
    spec = problem_2d_ii(0.25)
    x = np.array([[0.0, 0.0], [0.6, 0.0], [1.0, 0.5]])
    assert np.allclose(spec.u0(x), [1.0, 0.64, 0.0])
    assert np.allclose(spec.f(0.5, x), math.cos(0.5))
    assert np.allclose(spec.u_d(0.5, x), math.cos(0.5) * np.array([1.0, 0.64, 0.0]))


def test_norm_sq_separable():
    val = norm_sq_separable(lambda t: 1.0, lambda x: np.ones(len(x)), 1.0, 1)
    assert val == pytest.approx(2.0)
    val = norm_sq_separable(np.cos, lambda x: np.ones(len(x)), 1.0, 2)
    assert val == pytest.approx((0.5 + math.sin(2) / 4) * math.pi, rel=1e-10)
