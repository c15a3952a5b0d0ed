"""Reduced discrete control problem and a projected L-BFGS solver.

Controls are piecewise constant per cell and time step.  All inner products
and norms of controls are those of L2(Q): ``(Y, Z) = Σ_k Σ_c τ |c| Y Z``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import KernelParams, LoadOperator, QuadConfig, control_matrix, fractional_stiffness, mass_matrix


@dataclass(frozen=True)
class ProblemSpec:
    """Continuous problem data: fractional order, cost weight, box bounds,
    horizon and the functions ``f(t, x)``, ``u_d(t, x)``, ``u0(x)``."""

    s: float
    mu: float
    a: float
    b: float
    T: float
    f: Callable
    u_d: Callable
    u0: Callable
    domain: object = None

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.a <= self.b:
            raise ValueError(f"box bounds require a <= b, got [{self.a}, {self.b}]")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")


class ControlField:
    """Cellwise constant control, one value per cell and step (steps 1..K)."""

    def __init__(self, mesh, grid, values):
        values = np.array(values, dtype=float)
        if values.shape != (grid.K_steps, mesh.n_cells):
            raise ValueError(f"expected shape {(grid.K_steps, mesh.n_cells)}, got {values.shape}")
        values.setflags(write=False)
        self.mesh = mesh
        self.grid = grid
        self.values = values

    @classmethod
    def constant(cls, mesh, grid, c):
        return cls(mesh, grid, np.full((grid.K_steps, mesh.n_cells), float(c)))

    def weights(self):
        """``τ |c|`` for every entry."""
        return self.grid.tau * np.broadcast_to(self.mesh.cell_measures(), self.values.shape)

    def inner(self, other):
        other = other.values if isinstance(other, ControlField) else np.asarray(other)
        return float(np.sum(self.weights() * self.values * other))

    def norm(self):
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def with_values(self, values):
        return ControlField(self.mesh, self.grid, values)

    def dump_csv(self, path):
        """Write rows "k,cell,value" for steps 1..K."""
        with Path(path).open("w") as fh:
            fh.write("k,cell,value\n")
            for k, row in enumerate(self.values, start=1):
                for c, v in enumerate(row):
                    fh.write(f"{k},{c},{float(v)!r}\n")


def box_project(v, a, b):
    """Componentwise ``min(b, max(a, v))``."""
    if a > b:
        raise ValueError(f"box bounds require a <= b, got [{a}, {b}]")
    if isinstance(v, ControlField):
        return v.with_values(np.clip(v.values, a, b))
    return np.minimum(b, np.maximum(a, v))


def cell_average_matrix(mesh):
    """Cell means of P1 functions given by interior coefficients."""
    B = control_matrix(mesh)
    return (B.T / mesh.cell_measures()[:, None]).tocsr()


_GAUSS3 = (np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10]),
           np.array([5 / 18, 8 / 18, 5 / 18]))


def project_control(w, mesh, grid, order=5):
    """L2(Q) projection onto cellwise and stepwise constants.

    ``w`` is a space-time callable (averaged with Gauss rules: 3 points per
    step, ``order`` in space), a Trajectory indexed 1..K, or an array of
    nodal coefficients of shape (K, n_dofs); nodal input is averaged exactly.
    """
    if callable(w):
        load = LoadOperator(mesh, order)
        nc = mesh.n_cells
        q = len(load.weights) // nc
        wts = load.weights.reshape(nc, q)
        meas = mesh.cell_measures()
        t = grid.nodes
        out = np.zeros((grid.K_steps, nc))
        for k in range(grid.K_steps):
            for xi, wi in zip(*_GAUSS3):
                tk = t[k] + xi * (t[k + 1] - t[k])
                vals = np.asarray(w(tk, load.points), dtype=float).reshape(nc, q)
                out[k] += wi * (vals * wts).sum(axis=1) / meas
        return ControlField(mesh, grid, out)
    vals = w.values if hasattr(w, "values") else np.asarray(w, dtype=float)
    if getattr(w, "start", 1) != 1:
        raise ValueError("nodal input must be indexed by steps 1..K")
    return ControlField(mesh, grid, (cell_average_matrix(mesh) @ vals.T).T)


@dataclass
class OptimizeReport:
    iterations: int
    objective: float
    residual: float
    converged: bool
    history: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def dump_csv(self, path):
        """Iteration log "iter,J,residual,step_length"."""
        with Path(path).open("w") as fh:
            fh.write("iter,J,residual,step_length\n")
            for it, J, r, st in self.log:
                fh.write(f"{it},{float(J)!r},{float(r)!r},{float(st)!r}\n")


class ControlProblem:
    """Discrete reduced problem on a fixed mesh and time grid.

    Holds the assembled matrices, data loads and a step solver so that
    objective and gradient evaluations cost one forward and one backward
    sweep.

    Parameters
    ----------
    spec : ProblemSpec
    mesh : Mesh
    grid : TimeGrid
    K : SparseSymMatrix, optional
        Stiffness matrix; assembled if omitted.
    M : SparseSymMatrix, optional
    quad : QuadConfig, optional
    solver : {"cg", "cholesky"}
    tol : float
        Relative residual for CG step solves.
    ud_rule : {"endpoint", "average"}
        Sampling of ``u_d`` per step.
    load_order : int
        Spatial Gauss order for loads.
    """

    def __init__(self, spec, mesh, grid, K=None, M=None, quad=None, solver="cg", tol=1e-10,
                 ud_rule="endpoint", load_order=5):
        from .timestepping import StepSolver, l2_project_initial, sampled_load, time_averaged_load

        if abs(grid.T - spec.T) > 1e-12 * spec.T:
            raise ValueError("time grid horizon differs from the problem horizon")
        self.spec, self.mesh, self.grid = spec, mesh, grid
        self.K = K if K is not None else fractional_stiffness(mesh, KernelParams(mesh.dim, spec.s),
                                                              quad or QuadConfig())
        self.M = M if M is not None else mass_matrix(mesh)
        self.B = control_matrix(mesh)
        self.avg = cell_average_matrix(mesh)
        self.load = LoadOperator(mesh, load_order)
        self.F = time_averaged_load(spec.f, mesh, grid, load=self.load)
        self.G = sampled_load(spec.u_d, mesh, grid, load=self.load, rule=ud_rule)
        self.U0 = l2_project_initial(mesh, self.M, spec.u0, order=load_order)
        self.method, self.tol = solver, tol
        self.step = StepSolver(self.M + grid.tau * self.K, method=solver, tol=tol)
        # |u_d^k|^2 per step, consistent with the load sampling
        t = grid.nodes
        if ud_rule == "endpoint":
            self.ud_sq = np.array([self.load.integral(spec.u_d(tk, self.load.points) ** 2) for tk in t[1:]])
        else:
            self.ud_sq = np.zeros(grid.K_steps)
            for k in range(grid.K_steps):
                for xi, wi in zip(*_GAUSS3):
                    tk = t[k] + xi * (t[k + 1] - t[k])
                    self.ud_sq[k] += wi * self.load.integral(spec.u_d(tk, self.load.points) ** 2)
        self.weights = grid.tau * np.broadcast_to(mesh.cell_measures(), (grid.K_steps, mesh.n_cells))
        self.n_evals = 0

    # -- solves --------------------------------------------------------------
    def state(self, Z, homogeneous=False):
        from .timestepping import solve_state_forward

        vals = Z.values if isinstance(Z, ControlField) else np.asarray(Z)
        U0 = np.zeros_like(self.U0) if homogeneous else self.U0
        F = None if homogeneous else self.F
        return solve_state_forward(self.K, self.M, F, vals, U0, self.grid, B=self.B, solver=self.step)

    def adjoint(self, U, homogeneous=False):
        from .timestepping import solve_adjoint_backward

        G = None if homogeneous else self.G
        return solve_adjoint_backward(self.K, self.M, U, G, self.grid, solver=self.step)

    # -- functional ----------------------------------------------------------
    def objective_parts(self, Z, U=None):
        """Tracking term ``½ Σ τ |U^k - u_d^k|^2`` and control term
        ``(μ/2) |Z|^2_{L2(Q)}``."""
        vals = Z.values if isinstance(Z, ControlField) else np.asarray(Z)
        if U is None:
            U = self.state(vals)
        V = U.values[1:]
        MV = (self.M @ V.T).T
        track = 0.5 * self.grid.tau * float(np.sum(np.einsum("ki,ki->k", V, MV)
                                                   - 2 * np.einsum("ki,ki->k", V, self.G.values)
                                                   + self.ud_sq))
        ctrl = 0.5 * self.spec.mu * float(np.sum(self.weights * vals * vals))
        return track, ctrl

    def objective(self, Z):
        return sum(self.objective_parts(Z))

    def adjoint_average(self, P):
        """Cell averages of ``P^{k-1}`` for steps ``k = 1..K``."""
        return (self.avg @ P.values[:-1].T).T

    def evaluate(self, Z):
        """Objective, L2(Q) gradient, state and adjoint at ``Z``."""
        vals = Z.values if isinstance(Z, ControlField) else np.asarray(Z)
        U = self.state(vals)
        P = self.adjoint(U)
        J = sum(self.objective_parts(vals, U))
        grad = self.spec.mu * vals + self.adjoint_average(P)
        self.n_evals += 1
        return J, grad, U, P

    def gradient(self, Z):
        return self.evaluate(Z)[1]

    def residual(self, Z, PiP=None):
        """``|Z - proj(-ΠP/μ)|_{L2(Q)}`` with ``P`` the adjoint of ``Z``."""
        vals = Z.values if isinstance(Z, ControlField) else np.asarray(Z)
        if PiP is None:
            PiP = self.adjoint_average(self.adjoint(self.state(vals)))
        d = vals - np.clip(-PiP / self.spec.mu, self.spec.a, self.spec.b)
        return float(np.sqrt(np.sum(self.weights * d * d)))

    def hessian_apply(self, V):
        """Reduced Hessian ``μ V + Π S* S V`` (L2(Q) Riesz form)."""
        U = self.state(V, homogeneous=True)
        P = self.adjoint(U, homogeneous=True)
        return self.spec.mu * V + self.adjoint_average(P)


def reduced_objective(Z, spec, K=None, M=None, problem=None, **kw):
    prob = problem or ControlProblem(spec, Z.mesh, Z.grid, K=K, M=M, **kw)
    return prob.objective(Z)


def reduced_gradient(Z, spec, K=None, M=None, problem=None, **kw):
    prob = problem or ControlProblem(spec, Z.mesh, Z.grid, K=K, M=M, **kw)
    return Z.with_values(prob.gradient(Z))


def optimality_residual(Z, P_projected, spec):
    """``|Z - proj_{[a,b]}(-ΠP/μ)|_{L2(Q)}``; ``P_projected`` is ``ΠP`` as a
    ControlField or an array matching ``Z``."""
    pp = P_projected.values if isinstance(P_projected, ControlField) else np.asarray(P_projected)
    d = Z.values - np.clip(-pp / spec.mu, spec.a, spec.b)
    return float(np.sqrt(np.sum(Z.weights() * d * d)))


def _two_loop(g, pairs, free):
    """L-BFGS inverse-Hessian product restricted to the free variables."""
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        sf = np.where(free, s, 0.0)
        yf = np.where(free, y, 0.0)
        a = rho * (sf @ q)
        q = q - a * yf
        alphas.append((a, sf, yf, rho))
    if pairs:
        s, y, _ = pairs[-1]
        yf = np.where(free, y, 0.0)
        sf = np.where(free, s, 0.0)
        yy = yf @ yf
        gamma = (sf @ yf) / yy if yy > 0 and sf @ yf > 0 else 1.0
    else:
        gamma = 1.0
    r = gamma * q
    for a, sf, yf, rho in reversed(alphas):
        b = rho * (yf @ r)
        r = r + (a - b) * sf
    return np.where(free, r, 0.0)


def _sufficient_decrease(g, g_new, dy, c1=1e-4):
    """Armijo test on a quadratic functional.

    The reduced functional is quadratic, so ``J(y + dy) - J(y)`` equals
    ``½ (g + g_new)·dy`` exactly; using it avoids the cancellation in the
    difference of two nearly equal objective values.
    """
    slope = g @ dy
    return slope < 0 and 0.5 * ((g + g_new) @ dy) <= c1 * slope


def solve_control_bfgs(spec, mesh, grid, tol=None, max_iter=500, Z0=None, memory=10,
                       problem=None, callback=None, **problem_kw):
    """Projected L-BFGS on the reduced problem.

    Works in scaled variables ``y = sqrt(τ|c|) z`` so that the Euclidean
    product is the L2(Q) product.  Directions use an epsilon-active set;
    steps follow the projected path with Armijo backtracking (constant
    1e-4, factor 1/2, at most 40 halvings), the decrease measured by
    :func:`_sufficient_decrease`.  A step that no longer moves the iterate
    ends the run unconverged.  Iteration stops when the
    optimality residual drops to ``tol`` (default ``1e-8 (1 + |J(Z0)|)``).

    Returns
    -------
    Z : ControlField
    U, P : Trajectory
        State and adjoint at ``Z``.
    report : OptimizeReport
    """
    prob = problem or ControlProblem(spec, mesh, grid, **problem_kw)
    a, b, mu = spec.a, spec.b, spec.mu
    shape = (grid.K_steps, mesh.n_cells)
    sw = np.sqrt(prob.weights).ravel()
    lo, hi = a * sw, b * sw

    def fg(y):
        J, g, U, P = prob.evaluate((y / sw).reshape(shape))
        return J, g.ravel() * sw, U, P

    z0 = np.zeros(shape) if Z0 is None else np.asarray(getattr(Z0, "values", Z0), dtype=float)
    y = np.clip(z0.ravel() * sw, lo, hi)
    J, g, U, P = fg(y)
    if tol is None:
        tol = 1e-8 * (1.0 + abs(J))

    def resid(y, g):
        return float(np.linalg.norm(y - np.clip(y - g / mu, lo, hi)))

    r = resid(y, g)
    history = [J]
    log = [(0, J, r, 0.0)]
    pairs = deque(maxlen=memory)
    it = 0
    converged = r <= tol
    while not converged and it < max_iter:
        it += 1
        eps = min(1e-3 * np.max(sw) * (b - a) if np.isfinite(b - a) else 1e-3, r)
        active = ((y <= lo + eps) & (g > 0)) | ((y >= hi - eps) & (g < 0))
        free = ~active
        d = -_two_loop(g, list(pairs), free)
        d[active] = -g[active] / mu
        if not np.isfinite(d).all() or g @ d >= 0:
            pairs.clear()
            d = -g / mu
        # Armijo on the projected path
        step = 1.0
        accepted = False
        for _ in range(41):
            y_new = np.clip(y + step * d, lo, hi)
            J_new, g_new, U_new, P_new = fg(y_new)
            if _sufficient_decrease(g, g_new, y_new - y):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # projected gradient fallback
            pairs.clear()
            step = 1.0
            for _ in range(41):
                y_new = np.clip(y - step * g / mu, lo, hi)
                J_new, g_new, U_new, P_new = fg(y_new)
                if _sufficient_decrease(g, g_new, y_new - y):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
        sv, yv = y_new - y, g_new - g
        if not np.any(sv):
            break
        sy = sv @ yv
        if sy > 1e-12 * (sv @ sv):
            pairs.append((sv, yv, 1.0 / sy))
        y, J, g, U, P = y_new, J_new, g_new, U_new, P_new
        r = resid(y, g)
        history.append(J)
        log.append((it, J, r, float(np.linalg.norm(sv))))
        if callback is not None:
            callback(it, J, r)
        converged = r <= tol
    Z = ControlField(mesh, grid, np.clip((y / sw).reshape(shape), a, b))
    report = OptimizeReport(it, J, r, converged, history, log)
    return Z, U, P, report


def solve_unconstrained_cg(problem, tol=1e-12):
    """Minimizer of the reduced functional without bounds, from the linear
    optimality system ``μ Z + Π P(Z) = 0`` solved by CG on the reduced
    Hessian (used as an oracle)."""
    grid, mesh = problem.grid, problem.mesh
    shape = (grid.K_steps, mesh.n_cells)
    sw = np.sqrt(problem.weights).ravel()
    _, g0, _, _ = problem.evaluate(np.zeros(shape))

    def mv(v):
        return problem.hessian_apply((v / sw).reshape(shape)).ravel() * sw

    op = spla.LinearOperator((sw.size, sw.size), matvec=mv, dtype=float)
    y, info = spla.cg(op, -g0.ravel() * sw, rtol=tol, maxiter=10 * sw.size)
    if info != 0:
        raise RuntimeError(f"reduced Hessian CG did not converge (info={info})")
    return ControlField(mesh, grid, (y / sw).reshape(shape))
