"""Independent reference computations of the fractional stiffness matrix.

* ``brute_force_stiffness_1d``: adaptive quadrature of the explicit double
  integral over the domain plus the closed-form complement weight.
* ``exact_stiffness_1d``: closed form through second derivatives of the
  hat functions.
* ``line_stiffness_2d``: the 2D form reduced to integrals over lines of the
  1D closed form, with the exterior included exactly (lines extend to
  infinity and discrete functions vanish outside the mesh domain).
"""

from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
from scipy.integrate import IntegrationWarning, dblquad, quad

from .assembly import c_ns
from .quadrature import gauss_legendre


def _h_kernel(z, s):
    """Fourth antiderivative of ``|z|^{-1-2s}`` (even, up to cubics)."""
    z = np.abs(z)
    if abs(s - 0.5) < 1e-14:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(z > 0, -0.5 * z**2 * np.log(np.where(z > 0, z, 1.0)), 0.0)
    return z ** (3 - 2 * s) / ((-2 * s) * (1 - 2 * s) * (2 - 2 * s) * (3 - 2 * s))


def pair_form_1d(pk, ck, ql, dl, s):
    """``∬ (f(x)-f(y)) (g(x)-g(y)) |x-y|^{-1-2s}`` over R x R for compactly
    supported piecewise linear ``f``, ``g`` with ``f'' = Σ c_k δ_{p_k}``.

    Arrays broadcast over leading dimensions; the last axis indexes nodes.
    """
    Hm = _h_kernel(pk[..., :, None] - ql[..., None, :], s)
    return -2.0 * np.einsum("...k,...kl,...l->...", ck, Hm, dl)


def _hat_jumps(x, i):
    hl = x[i] - x[i - 1]
    hr = x[i + 1] - x[i]
    return np.array([x[i - 1], x[i], x[i + 1]]), np.array([1 / hl, -1 / hl - 1 / hr, 1 / hr])


def exact_stiffness_1d(mesh, s):
    """Closed-form stiffness matrix of a 1D mesh with vertices sorted."""
    x = mesh.vertices[:, 0]
    if np.any(np.diff(x) <= 0):
        raise ValueError("vertices must be sorted")
    idx = mesh.interior
    K = np.zeros((len(idx), len(idx)))
    jumps = [_hat_jumps(x, i) for i in idx]
    for a, (p, c) in enumerate(jumps):
        for b, (q, d) in enumerate(jumps):
            K[a, b] = pair_form_1d(p, c, q, d, s)
    return 0.5 * c_ns(1, s) * K


def brute_force_stiffness_1d(mesh, s, epsrel=1e-11):
    """Adaptive quadrature of the double integral on the interval plus
    ``C ∫ φ_i φ_j rho`` with the closed-form complement weight."""
    x = mesh.vertices[:, 0]
    a, b = x[0], x[-1]
    idx = mesh.interior
    eye = np.eye(len(x))
    C = c_ns(1, s)

    def hat(i):
        return lambda t: np.interp(t, x, eye[i])

    def rho(t):
        return ((t - a) ** (-2 * s) + (b - t) ** (-2 * s)) / (2 * s)

    n = len(idx)
    K = np.zeros((n, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        for ia, ib in itertools.combinations_with_replacement(range(n), 2):
            fi, fj = hat(idx[ia]), hat(idx[ib])

            def kern(y, xx):
                return (fi(xx) - fi(y)) * (fj(xx) - fj(y)) * abs(xx - y) ** (-1 - 2 * s)

            tot = 0.0
            for p in range(len(x) - 1):
                a0, a1 = x[p], x[p + 1]
                for q in range(len(x) - 1):
                    b0, b1 = x[q], x[q + 1]
                    if p == q:
                        tot += dblquad(kern, a0, a1, lambda t: a0, lambda t: t,
                                       epsabs=1e-14, epsrel=epsrel)[0]
                        tot += dblquad(kern, a0, a1, lambda t: t, lambda t: a1,
                                       epsabs=1e-14, epsrel=epsrel)[0]
                    else:
                        tot += dblquad(kern, a0, a1, b0, b1, epsabs=1e-14, epsrel=epsrel)[0]
            comp = sum(quad(lambda t: fi(t) * fj(t) * rho(t), x[p], x[p + 1],
                            epsabs=1e-14, epsrel=epsrel)[0] for p in range(len(x) - 1))
            K[ia, ib] = K[ib, ia] = 0.5 * C * tot + C * comp
    return K


# ---------------------------------------------------------------------------
# 2D line reduction
# ---------------------------------------------------------------------------

def _mesh_edges(mesh):
    e = np.sort(np.vstack([mesh.cells[:, [0, 1]], mesh.cells[:, [1, 2]], mesh.cells[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0)


def _line_form(mesh, edges, dofvals, theta, p, s):
    """``D(φ_i|ℓ, φ_j|ℓ)`` for lines ``{x·n = p}`` at one angle, all ``p``
    sharing the same set of crossed edges.  Returns shape (len(p), nd, nd)."""
    e = np.array([math.cos(theta), math.sin(theta)])
    nrm = np.array([-math.sin(theta), math.cos(theta)])
    V = mesh.vertices
    pa = V[edges[:, 0]] @ nrm
    pb = V[edges[:, 1]] @ nrm
    mid = p.mean()
    crossed = (np.minimum(pa, pb) < mid) & (np.maximum(pa, pb) > mid)
    ed = edges[crossed]
    pa, pb = pa[crossed], pb[crossed]
    lam = (p[:, None] - pa[None, :]) / (pb - pa)[None, :]
    sa = V[ed[:, 0]] @ e
    sb = V[ed[:, 1]] @ e
    sig = sa[None, :] + lam * (sb - sa)[None, :]
    vals = ((1 - lam)[:, :, None] * dofvals[ed[:, 0]][None] + lam[:, :, None] * dofvals[ed[:, 1]][None])
    order = np.argsort(sig, axis=1)
    sig = np.take_along_axis(sig, order, axis=1)
    vals = np.take_along_axis(vals, order[:, :, None], axis=1)
    slope = np.diff(vals, axis=1) / np.diff(sig, axis=1)[:, :, None]
    zero = np.zeros((len(p), 1, vals.shape[2]))
    slope = np.concatenate([zero, slope, zero], axis=1)
    jump = np.diff(slope, axis=1)
    Hm = _h_kernel(sig[:, :, None] - sig[:, None, :], s)
    return -2.0 * np.einsum("pki,pkl,plj->pij", jump, Hm, jump)


def line_stiffness_2d(mesh, s, order=12):
    """Stiffness matrix of a 2D mesh through the line reduction

        A(u, v) = C/2 ∫_0^π ∫_R D(u|ℓ(θ,p), v|ℓ(θ,p)) dp dθ,

    with ``D`` the 1D form of the restrictions.  Integration is piecewise
    Gauss between all critical angles (directions of vertex pairs) and all
    projected vertices.
    """
    V = mesh.vertices
    edges = _mesh_edges(mesh)
    dofvals = np.zeros((mesh.n_vertices, mesh.n_dofs))
    dofvals[mesh.interior, np.arange(mesh.n_dofs)] = 1.0
    crit = []
    for i, j in itertools.combinations(range(mesh.n_vertices), 2):
        d = V[j] - V[i]
        crit.append(math.atan2(d[1], d[0]) % math.pi)
    crit = np.unique(np.round(np.concatenate([crit, [0.0, math.pi]]), 14))
    tg, wg = gauss_legendre(order)
    nd = mesh.n_dofs
    total = np.zeros((nd, nd))
    for t0, t1 in zip(crit[:-1], crit[1:]):
        if t1 - t0 < 1e-13:
            continue
        for th, wt in zip(t0 + (t1 - t0) * tg, (t1 - t0) * wg):
            nrm = np.array([-math.sin(th), math.cos(th)])
            proj = np.unique(V @ nrm)
            acc = np.zeros((nd, nd))
            for p0, p1 in zip(proj[:-1], proj[1:]):
                pts = p0 + (p1 - p0) * tg
                D = _line_form(mesh, edges, dofvals, th, pts, s)
                acc += np.einsum("p,pij->ij", (p1 - p0) * wg, D)
            total += wt * acc
    K = 0.5 * c_ns(2, s) * total
    return 0.5 * (K + K.T)


# ---------------------------------------------------------------------------
# optimization and time-stepping checks
# ---------------------------------------------------------------------------

def gradient_check(problem, rng, n_pairs=10, step=1e-4, scale=1.0):
    """Relative gaps between central differences of the reduced objective
    and the L2(Q) pairing with the reduced gradient, for random controls
    and directions."""
    shape = (problem.grid.K_steps, problem.mesh.n_cells)
    gaps = []
    for _ in range(n_pairs):
        Z = scale * rng.uniform(-1.0, 1.0, shape)
        D = rng.standard_normal(shape)
        _, g, _, _ = problem.evaluate(Z)
        exact = float(np.sum(problem.weights * g * D))
        fd = (problem.objective(Z + step * D) - problem.objective(Z - step * D)) / (2 * step)
        gaps.append(abs(fd - exact) / max(abs(exact), 1e-300))
    return np.array(gaps)


def duality_gap(problem, rng):
    """Relative gap in the summation-by-parts identity

        Σ_k τ (B Z^{k+1})·P^k = Σ_k τ U_Z^{k+1}·(M U^{k+1} - G^{k+1})

    with ``U_Z`` driven by a random control alone and ``P`` the adjoint of
    a random state trajectory."""
    from .timestepping import Trajectory

    grid = problem.grid
    shape = (grid.K_steps, problem.mesh.n_cells)
    Z = rng.standard_normal(shape)
    UZ = problem.state(Z, homogeneous=True)
    U = Trajectory(grid, rng.standard_normal((grid.K_steps + 1, problem.mesh.n_dofs)))
    P = problem.adjoint(U)
    tau = grid.tau
    lhs = sum(tau * (problem.B @ Z[k]) @ P[k] for k in range(grid.K_steps))
    rhs = sum(tau * UZ[k + 1] @ (problem.M @ U[k + 1] - problem.G[k + 1]) for k in range(grid.K_steps))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def stability_ratios(s, cells_list, tau_factor, rng, T=1.0, modes=5, fixed_tau=True):
    """Stability ratio of forward solves on uniform 1D meshes.

    With ``fixed_tau`` the step is ``tau_factor`` times the coarsest mesh
    size on every level, so ``τ/h`` grows under refinement; otherwise
    ``τ = tau_factor · h`` per level.

    The data are random smooth functions drawn once (sine modes in space,
    cosines in time) so every level discretizes the same problem.
    """
    from .assembly import KernelParams, fractional_stiffness, mass_matrix
    from .mesh import Interval, build_mesh
    from .timestepping import TimeGrid, l2_project_initial, solve_state_forward, stability_ratio, \
        time_averaged_load

    a = rng.standard_normal(modes)
    b = rng.standard_normal((modes, 3))
    j = np.arange(1, modes + 1)

    def u0(x):
        return np.sin(np.pi * j * (x[..., :1] + 1) / 2) @ a

    def f(t, x):
        return np.sin(np.pi * j * (x[..., :1] + 1) / 2) @ (b @ np.cos(np.arange(3) * t))

    out = []
    for n in cells_list:
        mesh = build_mesh(Interval(-1.0, 1.0), 2.0 / n)
        K = fractional_stiffness(mesh, KernelParams(1, s))
        M = mass_matrix(mesh)
        h = 2.0 / (cells_list[0] if fixed_tau else n)
        grid = TimeGrid.from_tau(T, tau_factor * h)
        F = time_averaged_load(f, mesh, grid)
        U = solve_state_forward(K, M, F, None, l2_project_initial(mesh, M, u0), grid)
        out.append(stability_ratio(K, M, U, F, grid))
    return np.array(out)
