"""Symmetric CSR storage and preconditioned conjugate gradients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp


class SparseSymMatrix:
    """Symmetric matrix in CSR format storing both triangles.

    Column indices are sorted within rows and every diagonal entry is
    stored (explicit zeros included), so the pattern is symmetric.
    """

    def __init__(self, matrix, check=True):
        A = sp.csr_array(matrix, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"matrix must be square, got shape {A.shape}")
        # make every diagonal entry structurally present
        C = A.tocoo()
        idx = np.arange(n)
        # coo -> csr sums duplicates but keeps explicit zeros
        A = sp.csr_array((np.concatenate([C.data, np.zeros(n)]),
                          (np.concatenate([C.row, idx]), np.concatenate([C.col, idx]))), shape=(n, n))
        A.sum_duplicates()
        A.sort_indices()
        if check:
            asym = A - A.T
            if asym.nnz and np.max(np.abs(asym.data)) > 0:
                raise ValueError("matrix is not exactly symmetric")
        self._A = A

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=float)
        return cls(sp.csr_array(dense))

    @property
    def n(self):
        return self._A.shape[0]

    @property
    def shape(self):
        return self._A.shape

    @property
    def indptr(self):
        return self._A.indptr

    @property
    def indices(self):
        return self._A.indices

    @property
    def data(self):
        return self._A.data

    @property
    def nnz(self):
        return self._A.nnz

    def diagonal(self):
        return self._A.diagonal()

    def toarray(self):
        return self._A.toarray()

    def tocsr(self):
        return self._A

    def __matmul__(self, x):
        return self._A @ x

    def __add__(self, other):
        return SparseSymMatrix(self._A + _csr(other), check=False)

    def __mul__(self, c):
        return SparseSymMatrix(self._A * float(c), check=False)

    __rmul__ = __mul__

    def dump(self, path):
        """Write "i j value" lines, 0-based, sorted by (i, j)."""
        A = self._A.tocoo()
        order = np.lexsort((A.col, A.row))
        with Path(path).open("w") as fh:
            for i, j, v in zip(A.row[order], A.col[order], A.data[order]):
                fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")


def _csr(m):
    return m.tocsr() if isinstance(m, SparseSymMatrix) else sp.csr_array(m)


def load_matrix(path, n):
    """Read a matrix written by :meth:`SparseSymMatrix.dump`."""
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return SparseSymMatrix(sp.csr_array((n, n)))
    rows = data[:, 0].astype(int)
    cols = data[:, 1].astype(int)
    return SparseSymMatrix(sp.csr_array((data[:, 2], (rows, cols)), shape=(n, n)))


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    residual: float
    converged: bool


class SolverError(RuntimeError):
    """Raised on NaN breakdown in an iterative solve."""


def cg_solve(A, b, tol=1e-10, max_iter=None, precond="jacobi", x0=None):
    """Preconditioned conjugate gradients for SPD ``A``.

    Parameters
    ----------
    A : SparseSymMatrix, sparse or dense array
    b : ndarray
    tol : float
        Relative residual target ``||A x - b|| / ||b||``.
    max_iter : int, optional
        Defaults to ``10 * n``.
    precond : {"none", "jacobi"}
    x0 : ndarray, optional
        Initial guess (warm start).

    Returns
    -------
    x : ndarray
    report : SolverReport
        If ``converged`` is False, ``x`` is the iterate with the smallest
        residual seen.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side contains non-finite values")
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    if precond not in ("none", "jacobi"):
        raise ValueError(f"unknown preconditioner {precond!r}")
    matvec = A.__matmul__
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, True)
    if precond == "jacobi":
        d = A.diagonal() if hasattr(A, "diagonal") else np.diag(A)
        dinv = 1.0 / np.asarray(d, dtype=float)
    else:
        dinv = None

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    res = np.linalg.norm(r) / bnorm
    best_x, best_res = x.copy(), res
    if res <= tol:
        return x, SolverReport(0, float(res), True)
    z = r * dinv if dinv is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise SolverError(f"NaN encountered in CG at iteration {it}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return x, SolverReport(it, float(res), True)
        z = r * dinv if dinv is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best_x, SolverReport(max_iter, float(best_res), False)


class StepSolver:
    """Repeated solves with a fixed SPD matrix ``M + tau * K``.

    ``method="cg"`` uses Jacobi-preconditioned CG warm-started from the
    previous solution; ``method="cholesky"`` factors the dense matrix once.
    """

    def __init__(self, A, method="cg", tol=1e-10, max_iter=None):
        self.A = A
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.last_report = None
        if method == "cholesky":
            dense = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
            self._factor = scipy.linalg.cho_factor(dense)
        elif method != "cg":
            raise ValueError(f"unknown step solver {method!r}")

    def solve(self, b, x0=None):
        if self.method == "cholesky":
            x = scipy.linalg.cho_solve(self._factor, b)
            if not np.all(np.isfinite(x)):
                raise SolverError("non-finite values in Cholesky solve")
            self.last_report = SolverReport(1, 0.0, True)
            return x
        x, rep = cg_solve(self.A, b, tol=self.tol, max_iter=self.max_iter, x0=x0)
        self.last_report = rep
        if not rep.converged:
            raise SolverError(f"CG did not converge (residual {rep.residual:.2e})")
        return x
