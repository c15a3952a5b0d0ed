"""Closed-form fractional Poisson solutions and manufactured control problems.

Spatial functions take points of shape ``(..., dim)``; space-time functions
take ``(t, x)`` with ``t`` broadcastable against ``x[..., 0]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

from .mesh import Disc, Interval
from .optimize import ProblemSpec


@dataclass(frozen=True)
class JacobiIndex:
    """Degree and parameters of a Jacobi polynomial (plus 2D angular index)."""

    k: int
    alpha: float
    beta: float
    ell: int = 0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0 or int(self.ell) != self.ell or self.ell < 0:
            raise ValueError("k and ell must be nonnegative integers")
        if not (self.alpha > -1 and self.beta > -1):
            raise ValueError(f"Jacobi parameters must exceed -1, got ({self.alpha}, {self.beta})")


def jacobi_eval(idx, x):
    """``P_k^{(alpha, beta)}(x)`` by the three-term recurrence."""
    a, b = float(idx.alpha), float(idx.beta)
    if not (a > -1 and b > -1):
        raise ValueError(f"Jacobi parameters must exceed -1, got ({a}, {b})")
    x = np.asarray(x, dtype=float)
    p0 = np.ones_like(x)
    if idx.k == 0:
        return p0
    p1 = 0.5 * (a - b) + 0.5 * (a + b + 2) * x
    for n in range(2, idx.k + 1):
        c = 2 * n + a + b
        a1 = 2 * n * (n + a + b) * (c - 2)
        a2 = (c - 1) * (a * a - b * b)
        a3 = (c - 2) * (c - 1) * c
        a4 = 2 * (n + a - 1) * (n + b - 1) * c
        p0, p1 = p1, ((a2 + a3 * x) * p1 - a4 * p0) / a1
    return p1


def gen_binom(x, y):
    """Generalized binomial ``Γ(x+1) / (Γ(y+1) Γ(x-y+1))`` via log-gamma."""
    return math.exp(gammaln(x + 1) - gammaln(y + 1) - gammaln(x - y + 1))


def _plus_power(base, s):
    base = np.asarray(base, dtype=float)
    out = np.zeros_like(base)
    pos = base > 0
    out[pos] = base[pos] ** s
    return out


def rhs_constant_1d(k, j, s):
    shift = -0.5 if j == 0 else 0.5
    return 2 ** (2 * s) * math.gamma(1 + s) ** 2 * gen_binom(s + k + shift, s) * gen_binom(s + k, s)


def rhs_constant_2d(k, ell, s):
    return 2 ** (2 * s) * math.gamma(1 + s) ** 2 * gen_binom(s + k + ell, s) * gen_binom(s + k, s)


def exact_pair_1d(k, j, s, x):
    """Solution ``u_{k,j}`` and right-hand side ``f_{k,j}`` on (-1, 1)."""
    if j not in (0, 1):
        raise ValueError(f"parity must be 0 or 1, got {j}")
    x = np.asarray(x, dtype=float)
    P = jacobi_eval(JacobiIndex(k, s, -0.5 if j == 0 else 0.5), 2 * x * x - 1)
    if j == 1:
        P = x * P
    return P * _plus_power(1 - x * x, s), rhs_constant_1d(k, j, s) * P


def exact_pair_2d(k, ell, s, r, theta):
    """Solution ``u_{k,ell}`` and right-hand side on the unit disc (polar)."""
    r = np.asarray(r, dtype=float)
    ang = r**ell * np.cos(ell * np.asarray(theta, dtype=float))
    P = ang * jacobi_eval(JacobiIndex(k, s, ell), 2 * r * r - 1)
    return P * _plus_power(1 - r * r, s), rhs_constant_2d(k, ell, s) * P


@dataclass(frozen=True)
class PoissonPair:
    """Exact pair ``(u, f)`` with ``(-Δ)^s u = f`` on the domain, as
    functions of Cartesian points."""

    s: float
    dim: int
    u: Callable
    f: Callable
    label: str = ""


def poisson_pair_1d(k, j, s):
    return PoissonPair(s, 1, lambda x: exact_pair_1d(k, j, s, np.asarray(x)[..., 0])[0],
                       lambda x: exact_pair_1d(k, j, s, np.asarray(x)[..., 0])[1],
                       f"u1d(k={k},j={j})")


def poisson_pair_2d(k, ell, s):
    def polar(x):
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0], x[..., 1]), np.arctan2(x[..., 1], x[..., 0])

    return PoissonPair(s, 2, lambda x: exact_pair_2d(k, ell, s, *polar(x))[0],
                       lambda x: exact_pair_2d(k, ell, s, *polar(x))[1],
                       f"u2d(k={k},l={ell})")


@dataclass(frozen=True)
class TimeProfile:
    """Time factors ``psi`` (``psi(0) = 1``) and ``phi`` (``phi(T) = 0``)."""

    psi: Callable
    dpsi: Callable
    phi: Callable
    dphi: Callable
    T: float

    def __post_init__(self):
        if abs(self.psi(0.0) - 1.0) > 1e-12:
            raise ValueError("psi(0) must equal 1")
        if abs(self.phi(self.T)) > 1e-12:
            raise ValueError("phi(T) must vanish")


def standard_profile(T=1.0):
    """``psi = cos t``, ``phi = sin(T - t)``."""
    return TimeProfile(np.cos, lambda t: -np.sin(t), lambda t: np.sin(T - t),
                       lambda t: -np.cos(T - t), T)


def _clip(v, a, b):
    return np.minimum(b, np.maximum(a, v))


@dataclass(frozen=True)
class ExactTriple:
    """Exact optimal state, adjoint and control with the manufactured data."""

    u: PoissonPair
    v: PoissonPair
    profile: TimeProfile
    mu: float
    a: float
    b: float

    def state(self, t, x):
        return self.profile.psi(t) * self.u.u(x)

    def adjoint(self, t, x):
        return -self.mu * self.profile.phi(t) * self.v.u(x)

    def control(self, t, x):
        return _clip(self.profile.phi(t) * self.v.u(x), self.a, self.b)

    def f(self, t, x):
        pr = self.profile
        return pr.dpsi(t) * self.u.u(x) + pr.psi(t) * self.u.f(x) - self.control(t, x)

    def u_d(self, t, x):
        pr = self.profile
        vx = self.v.u(x)
        return pr.psi(t) * self.u.u(x) - self.mu * pr.dphi(t) * vx + self.mu * pr.phi(t) * self.v.f(x)

    def u0(self, x):
        return self.u.u(x)


def build_manufactured(s, mu, a, b, T, u_pair, v_pair, profile=None, domain=None):
    """Manufactured control problem with a known optimal triple.

    With ``u``, ``v`` exact fractional Poisson solutions (right-hand sides
    ``f_u``, ``g``):

        f   = psi' u + psi f_u - proj(phi v)
        u_d = psi u - mu phi' v + mu phi g
        u_0 = u

    so that ``(psi u, -mu phi v, proj(phi v))`` is optimal.  The sign of the
    ``phi'`` term follows from the adjoint equation
    ``-∂_t p + (-Δ)^s p = u - u_d``.
    """
    if abs(u_pair.s - s) > 0 or abs(v_pair.s - s) > 0:
        raise ValueError("both Poisson pairs must use the problem's s")
    if u_pair.dim != v_pair.dim:
        raise ValueError("Poisson pairs live in different dimensions")
    if profile is None:
        profile = standard_profile(T)
    if abs(profile.T - T) > 0:
        raise ValueError("time profile horizon differs from T")
    if domain is None:
        domain = Interval(-1.0, 1.0) if u_pair.dim == 1 else Disc()
    triple = ExactTriple(u_pair, v_pair, profile, mu, a, b)
    spec = ProblemSpec(s=s, mu=mu, a=a, b=b, T=T, f=triple.f, u_d=triple.u_d, u0=triple.u0,
                       domain=domain)
    return spec, triple


def exact_optimal_triple(triple, t, x):
    """``(u, p, z)`` of the exact optimal triple at ``(t, x)``."""
    return triple.state(t, x), triple.adjoint(t, x), triple.control(t, x)


def manufactured_1d(s, mu=0.1, a=-0.5, b=0.5, T=1.0):
    """The 1D test problem: ``u = v = (1 - x^2)^s``, ``psi = cos``,
    ``phi = sin(T - .)``."""
    pair = poisson_pair_1d(0, 0, s)
    return build_manufactured(s, mu, a, b, T, pair, pair)


def manufactured_2d_i(s, mu=0.1, a=-0.5, b=0.5, T=1.0):
    """Disc problem (I): ``u = u_{0,1}``, ``v = u_{0,0}``."""
    return build_manufactured(s, mu, a, b, T, poisson_pair_2d(0, 1, s), poisson_pair_2d(0, 0, s))


def problem_2d_ii(s, mu=0.1, a=-0.5, b=0.5, T=1.0):
    """Disc problem (II): ``f = cos t``, ``u_d = cos t (1 - |x|^2)``,
    ``u_0 = 1 - |x|^2``; no closed-form solution."""
    def sq(x):
        x = np.asarray(x, dtype=float)
        return np.maximum(0.0, 1.0 - x[..., 0] ** 2 - x[..., 1] ** 2)

    return ProblemSpec(s=s, mu=mu, a=a, b=b, T=T,
                       f=lambda t, x: np.cos(t) * np.ones(np.shape(x)[:-1]),
                       u_d=lambda t, x: np.cos(t) * sq(x), u0=sq, domain=Disc())


def active_radius(t, s, b=0.5, T=1.0):
    """Radius ``r_o(t)`` of the upper active set of the 1D exact control."""
    ph = np.sin(T - np.asarray(t, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(np.clip(1.0 - (b / ph) ** (1.0 / s), 0.0, None))
    return np.where(ph >= b, r, 0.0)


# ---------------------------------------------------------------------------
# squared L2(Q) norms of the exact variables
# ---------------------------------------------------------------------------

def norm_sq_separable(time_fun, space_fun, T, dim):
    """``∫_0^T time_fun^2 · ∫_Ω space_fun^2`` on (-1, 1) or the unit disc."""
    tt = quad(lambda t: float(time_fun(t)) ** 2, 0.0, T, epsabs=1e-14, epsrel=1e-12)[0]
    if dim == 1:
        xx = quad(lambda x: float(space_fun(np.array([[x]]))[0]) ** 2, -1.0, 1.0,
                  epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    else:
        def ring(r):
            th = np.linspace(0.0, 2 * np.pi, 65)[:-1]
            pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
            return 2 * np.pi * r * np.mean(space_fun(pts) ** 2)
        xx = quad(ring, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return tt * xx
