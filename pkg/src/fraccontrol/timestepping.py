"""Backward Euler for the fractional heat equation and its discrete adjoint.

State:    (M + τK) U^{k+1} = M U^k + τ (F^{k+1} + B Z^{k+1}),  U^0 given
Adjoint:  (M + τK) P^k = M P^{k+1} + τ (M U^{k+1} - G^{k+1}),   P^K = 0

``F^{k+1}`` is the load of the time average of ``f`` over the step and
``G^{k+1}`` the load of ``u_d`` (sampled at ``t_{k+1}`` by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import LoadOperator, control_matrix
from .linalg import SolverError, StepSolver, cg_solve


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / K`` on ``[0, T]``."""

    T: float
    K_steps: int

    def __post_init__(self):
        if int(self.K_steps) != self.K_steps or self.K_steps < 1:
            raise ValueError(f"K_steps must be a positive integer, got {self.K_steps}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        # pick the float tau closest to T/K with tau * K == T if one exists
        tau = self.T / self.K_steps
        for cand in (tau, math.nextafter(tau, math.inf), math.nextafter(tau, 0.0)):
            if cand * self.K_steps == self.T:
                tau = cand
                break
        object.__setattr__(self, "_tau", tau)

    @property
    def tau(self):
        return self._tau

    @property
    def nodes(self):
        t = np.arange(self.K_steps + 1) * (self.T / self.K_steps)
        t[-1] = self.T
        return t

    @classmethod
    def from_tau(cls, T, tau):
        """Grid with ``K = ceil(T / tau)`` steps."""
        return cls(T, max(1, math.ceil(round(T / tau, 9))))


class Trajectory:
    """Sequence of coefficient vectors on a time grid.

    ``start = 0``: entries for ``k = 0..K`` (states, adjoints);
    ``start = 1``: entries for ``k = 1..K`` (piecewise constant data).
    """

    def __init__(self, grid, values, start=0):
        values = np.asarray(values, dtype=float)
        if start not in (0, 1):
            raise ValueError("start must be 0 or 1")
        if values.ndim != 2 or values.shape[0] != grid.K_steps + 1 - start:
            raise ValueError(f"expected {grid.K_steps + 1 - start} steps, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("trajectory contains non-finite values")
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self.start = start

    def __getitem__(self, k):
        return self.values[k - self.start]

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_dofs(self):
        return self.values.shape[1]

    def times(self):
        return self.grid.nodes[self.start:]

    def dump_csv(self, path):
        """Write rows "k,t,coeff_0,...,coeff_{d-1}"."""
        header = "k,t," + ",".join(f"coeff_{i}" for i in range(self.n_dofs))
        with Path(path).open("w") as fh:
            fh.write(header + "\n")
            for k, (t, row) in enumerate(zip(self.times(), self.values), start=self.start):
                fh.write(f"{k},{float(t)!r}," + ",".join(repr(float(v)) for v in row) + "\n")


def l2_project_initial(mesh, M, u0, order=5, tol=1e-12):
    """Coefficients of the L2 projection of ``u0`` onto the P1 space."""
    b = LoadOperator(mesh, order).of(u0)
    x, rep = cg_solve(M, b, tol=tol)
    if not rep.converged:
        raise SolverError(f"L2 projection did not converge (residual {rep.residual:.2e})")
    return x


_GAUSS3 = (np.array([0.5 - math.sqrt(15) / 10, 0.5, 0.5 + math.sqrt(15) / 10]),
           np.array([5 / 18, 8 / 18, 5 / 18]))


def time_averaged_load(g, mesh, grid, order=5, load=None):
    """Loads of ``τ^{-1} ∫_{t_k}^{t_{k+1}} g dt`` (3-point Gauss in time),
    as a Trajectory indexed 1..K."""
    load = load or LoadOperator(mesh, order)
    t = grid.nodes
    out = np.zeros((grid.K_steps, mesh.n_dofs))
    for k in range(grid.K_steps):
        for xi, wi in zip(*_GAUSS3):
            tk = t[k] + xi * (t[k + 1] - t[k])
            out[k] += wi * load.of(lambda x: g(tk, x))
    return Trajectory(grid, out, start=1)


def sampled_load(g, mesh, grid, order=5, load=None, rule="endpoint"):
    """Loads of ``g(t_{k+1})`` (``rule="endpoint"``) or of the step average
    (``rule="average"``), indexed 1..K."""
    if rule == "average":
        return time_averaged_load(g, mesh, grid, order, load)
    if rule != "endpoint":
        raise ValueError(f"unknown sampling rule {rule!r}")
    load = load or LoadOperator(mesh, order)
    t = grid.nodes
    out = np.array([load.of(lambda x, tk=tk: g(tk, x)) for tk in t[1:]])
    return Trajectory(grid, out.reshape(grid.K_steps, mesh.n_dofs), start=1)


def _step_solver(K, M, grid, method, tol):
    A = M + grid.tau * K
    return StepSolver(A, method=method, tol=tol)


def _control_loads(Z, B, n_steps):
    if Z is None:
        return None
    vals = Z.values if hasattr(Z, "values") else np.asarray(Z)
    if vals.shape[0] != n_steps:
        raise ValueError("control has the wrong number of steps")
    if B is None:
        B = control_matrix(Z.mesh)
    return (B @ vals.T).T


def solve_state_forward(K, M, f_traj, Z, U0, grid, B=None, method="cg", tol=1e-10, solver=None):
    """Backward Euler state trajectory indexed 0..K.

    ``Z`` is a ControlField, an array of shape (K, n_cells), or None.
    """
    solver = solver or _step_solver(K, M, grid, method, tol)
    tau = grid.tau
    ZB = _control_loads(Z, B, grid.K_steps)
    U = np.zeros((grid.K_steps + 1, len(U0)))
    U[0] = U0
    for k in range(grid.K_steps):
        rhs = M @ U[k]
        if f_traj is not None:
            rhs = rhs + tau * f_traj[k + 1]
        if ZB is not None:
            rhs = rhs + tau * ZB[k]
        try:
            U[k + 1] = solver.solve(rhs, x0=U[k])
        except SolverError as err:
            raise SolverError(f"forward solve failed at step {k + 1}: {err}") from err
    return Trajectory(grid, U, start=0)


def solve_adjoint_backward(K, M, U, ud_traj, grid, method="cg", tol=1e-10, solver=None):
    """Discrete adjoint indexed 0..K with ``P^K = 0``."""
    solver = solver or _step_solver(K, M, grid, method, tol)
    tau = grid.tau
    nd = U.n_dofs
    P = np.zeros((grid.K_steps + 1, nd))
    for k in range(grid.K_steps - 1, -1, -1):
        rhs = M @ P[k + 1] + tau * (M @ U[k + 1])
        if ud_traj is not None:
            rhs = rhs - tau * ud_traj[k + 1]
        try:
            P[k] = solver.solve(rhs, x0=P[k + 1])
        except SolverError as err:
            raise SolverError(f"adjoint solve failed at step {k}: {err}") from err
    return Trajectory(grid, P, start=0)


def stability_ratio(K, M, U, f_traj, grid):
    """``[max_k |U^k|_M^2 + Σ τ |U^k|_K^2] / [|U^0|_M^2 + Σ τ F^k·K^{-1}F^k]``."""
    Kd = K.toarray() if hasattr(K, "toarray") else np.asarray(K)
    Md = M.toarray() if hasattr(M, "toarray") else np.asarray(M)
    V = U.values
    l2 = np.einsum("ki,ij,kj->k", V, Md, V)
    en = np.einsum("ki,ij,kj->k", V[1:], Kd, V[1:])
    lhs = l2.max() + grid.tau * en.sum()
    F = f_traj.values
    dual = np.einsum("ki,ki->k", F, np.linalg.solve(Kd, F.T).T)
    rhs = l2[0] + grid.tau * dual.sum()
    return lhs / rhs
