"""Quadrature rules on intervals and triangles.

Reference cells are ``[0, 1]`` and the unit triangle with vertices
``(0, 0), (1, 0), (0, 1)``.  Weights sum to the reference measure.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

MAX_ORDER = 30


def _check_order(order):
    if int(order) != order or order < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {order}")
    if order > MAX_ORDER:
        raise ValueError(f"quadrature order underflow: order {order} exceeds the "
                         f"largest available rule ({MAX_ORDER})")


@lru_cache(maxsize=None)
def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_legendre(n, a=0.0, b=1.0):
    """``n``-point Gauss-Legendre rule on ``[a, b]``."""
    _check_order(n)
    x, w = _gauss01(n)
    return a + (b - a) * x, (b - a) * w


@lru_cache(maxsize=None)
def _gauss_jacobi01(n, beta):
    x, w = roots_jacobi(n, 0.0, beta)
    return 0.5 * (x + 1.0), w * 0.5 ** (1.0 + beta)


def gauss_jacobi(n, beta):
    """Rule on ``[0, 1]`` for the weight ``t**beta`` (``beta > -1``).

    Exact for ``p(t) * t**beta`` with ``p`` of degree ``2n - 1``.
    """
    _check_order(n)
    if not beta > -1.0:
        raise ValueError(f"Jacobi weight exponent must exceed -1, got {beta}")
    x, w = _gauss_jacobi01(n, float(beta))
    return x.copy(), w.copy()


# Symmetric triangle rules: (degree, [(multiplicity-orbit, a, weight), ...])
# orbit "c": centroid; "s3": (a, a, 1 - 2a) and permutations.
_DUNAVANT = {
    1: [("c", None, 1.0)],
    2: [("s3", 1.0 / 6.0, 1.0 / 3.0)],
    4: [("s3", 0.445948490915965, 0.223381589678011),
        ("s3", 0.091576213509771, 0.109951743655322)],
    5: [("c", None, 9.0 / 40.0),
        ("s3", (6.0 - np.sqrt(15.0)) / 21.0, (155.0 - np.sqrt(15.0)) / 1200.0),
        ("s3", (6.0 + np.sqrt(15.0)) / 21.0, (155.0 + np.sqrt(15.0)) / 1200.0)],
}


def _symmetric_rule(degree):
    pts, wts = [], []
    for kind, a, w in _DUNAVANT[degree]:
        if kind == "c":
            pts.append((1.0 / 3.0, 1.0 / 3.0))
            wts.append(w)
        else:
            b = 1.0 - 2.0 * a
            for p in ((a, a), (b, a), (a, b)):
                pts.append(p)
                wts.append(w)
    pts = np.array(pts)
    wts = np.array(wts)
    return pts, 0.5 * wts / wts.sum()


def collapsed_triangle(n):
    """Conical product (collapsed Gauss) rule with ``n * n`` points,
    exact for polynomials of degree ``2n - 1``."""
    _check_order(n)
    x, wx = _gauss01(n)
    # weight (1 - y) absorbed through Gauss-Jacobi in the collapsed direction
    y, wy = _gauss_jacobi_one_minus(n)
    X = (x[:, None] * (1.0 - y[None, :])).ravel()
    Y = np.broadcast_to(y[None, :], (n, n)).ravel()
    W = (wx[:, None] * wy[None, :]).ravel()
    return np.column_stack([X, Y]), W


@lru_cache(maxsize=None)
def _gauss_jacobi_one_minus(n):
    x, w = roots_jacobi(n, 1.0, 0.0)
    return 0.5 * (x + 1.0), 0.25 * w


@lru_cache(maxsize=None)
def _triangle_rule(order):
    degree = 2 * order - 1
    for d in sorted(_DUNAVANT):
        if d >= degree:
            return _symmetric_rule(d)
    return collapsed_triangle(order)


def triangle_rule(order):
    """Rule on the unit triangle exact to degree ``2 * order - 1``.

    Tabulated symmetric rules are used up to degree 5, collapsed Gauss rules
    above.  Returns ``(points, weights)`` with weights summing to 1/2.
    """
    _check_order(order)
    p, w = _triangle_rule(int(order))
    return p.copy(), w.copy()


def cell_rule(dim, order):
    """Reference rule for an interval (``dim = 1``) or triangle (``dim = 2``).

    Points are returned as barycentric coordinates, shape ``(q, dim + 1)``,
    with weights normalized to sum to one (multiply by the cell measure).
    """
    if dim == 1:
        x, w = gauss_legendre(order)
        return np.column_stack([1.0 - x, x]), w
    p, w = triangle_rule(order)
    return np.column_stack([1.0 - p[:, 0] - p[:, 1], p[:, 0], p[:, 1]]), 2.0 * w


def map_points(cell_vertices, bary):
    """Physical points of a barycentric rule on every cell.

    ``cell_vertices`` has shape ``(n_cells, dim + 1, dim)``; result has shape
    ``(n_cells, q, dim)``.
    """
    return np.einsum("qa,cad->cqd", bary, cell_vertices)
