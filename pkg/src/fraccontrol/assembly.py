"""Stiffness, mass and load assembly for the integral fractional Laplacian.

The bilinear form of zero-extended functions on a mesh domain ``D`` is

    A(u, v) = C/2 ∬_{D×D} (u(x)-u(y)) (v(x)-v(y)) |x-y|^{-n-2s}
              + C ∫_D u v rho,        rho(x) = ∫_{R^n \\ D} |x-y|^{-n-2s} dy.

The double integral is split over ordered element pairs.  Identical and
touching pairs use coordinate transforms that integrate the radial part of
the singularity in closed form.  For disjoint pairs the integrand is split
into a "diagonal" part ``u v (x)`` and a cross part ``u(x) v(y)``; the
diagonal part summed over all disjoint partners of a cell, together with
``rho``, equals the kernel integral over the complement of the cell's
vertex patch, which has a closed form on polygons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.spatial import cKDTree
from scipy.special import beta as beta_fn
from scipy.special import betainc, gammaln

from .linalg import SparseSymMatrix
from .mesh import Disc, Interval
from .quadrature import (cell_rule, gauss_jacobi, gauss_legendre,
                         map_points, triangle_rule, _check_order)


def c_ns(n, s):
    """Normalization constant of the integral fractional Laplacian."""
    return float(np.exp(2 * s * np.log(2.0) + np.log(s) + gammaln(s + n / 2)
                        - (n / 2) * np.log(np.pi) - gammaln(1 - s)))


@dataclass(frozen=True)
class KernelParams:
    """Dimension, fractional order and the constant ``C(n, s)``."""

    n: int
    s: float
    c_ns: float = field(default=None)

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.n}")
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")
        c = c_ns(self.n, self.s)
        if self.c_ns is None:
            object.__setattr__(self, "c_ns", c)
        elif abs(self.c_ns - c) > 1e-14 * c:
            raise ValueError(f"c_ns={self.c_ns} inconsistent with C({self.n},{self.s})={c}")


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature orders for stiffness assembly.

    Attributes
    ----------
    gauss_order_regular : int
        Gauss points per dimension for well-separated element pairs.
    gauss_order_singular : int
        Points per dimension inside the regularizing transforms and for
        near-field pairs.
    near_field_threshold : float
        Disjoint pairs whose gap (centroid distance minus mean diameter) is
        at most ``threshold * max(h1, h2)`` use the singular order.
    """

    gauss_order_regular: int = 3
    gauss_order_singular: int = 5
    near_field_threshold: float = 1.0

    def __post_init__(self):
        _check_order(self.gauss_order_regular)
        _check_order(self.gauss_order_singular)
        if not self.near_field_threshold > 0:
            raise ValueError("near_field_threshold must be positive")


# ---------------------------------------------------------------------------
# complement weight
# ---------------------------------------------------------------------------

def complement_weight(x, domain, kp, epsrel=1e-10):
    """``rho(x) = ∫_{Ω^c} |x - y|^{-n-2s} dy`` for the exact domain.

    Closed form on intervals; on the disc an angular integral of the exact
    radial antiderivative ``R(θ)^{-2s} / (2s)``, evaluated by adaptive
    quadrature.
    """
    s = kp.s
    if isinstance(domain, Interval):
        x = float(np.asarray(x).reshape(-1)[0])
        if not domain.left < x < domain.right:
            raise ValueError(f"x={x} is not inside {domain}")
        return ((x - domain.left) ** (-2 * s) + (domain.right - x) ** (-2 * s)) / (2 * s)
    if isinstance(domain, Disc):
        p = np.asarray(x, dtype=float).reshape(2) - np.asarray(domain.center)
        R = domain.radius
        r2 = p @ p
        if not r2 < R * R:
            raise ValueError(f"x={x} is not inside the open disc")

        def dist(th):
            e = np.array([math.cos(th), math.sin(th)])
            pe = p @ e
            return -pe + math.sqrt(R * R - r2 + pe * pe)

        val, _ = quad(lambda th: dist(th) ** (-2 * s), 0.0, 2 * math.pi,
                      epsabs=0.0, epsrel=epsrel, limit=200)
        return val / (2 * s)
    raise TypeError(f"unsupported domain {domain!r}")


def _edge_primitive(alpha, s):
    """``∫_0^alpha cos(t)^(2s) dt`` for ``|alpha| < pi/2``."""
    sn2 = np.sin(alpha) ** 2
    return np.sign(alpha) * 0.5 * betainc(0.5, s + 0.5, sn2) * beta_fn(0.5, s + 0.5)


def polygon_complement_weight(points, edges_a, edges_b, s):
    """Kernel integral over the complement of a polygon, for points inside it.

    ``edges_a``, ``edges_b`` are the start and end points of the polygon
    boundary edges, oriented with the interior on the left.  Holes and
    non-convex polygons are handled since every edge is integrated with its
    sign.

    Parameters
    ----------
    points : ndarray, shape (m, 2)
    edges_a, edges_b : ndarray, shape (e, 2)

    Returns
    -------
    ndarray, shape (m,)
    """
    t = edges_b - edges_a
    length = np.linalg.norm(t, axis=1)
    t = t / length[:, None]
    nrm = np.column_stack([t[:, 1], -t[:, 0]])
    rel = edges_a[None, :, :] - points[:, None, :]
    q = np.einsum("med,ed->me", rel, nrm)
    ua = np.einsum("med,ed->me", rel, t)
    ub = ua + length[None, :]
    aq = np.abs(q)
    ok = aq > 0
    aq = np.where(ok, aq, 1.0)
    val = np.sign(q) * aq ** (-2 * s) * (_edge_primitive(np.arctan(ub / aq), s)
                                        - _edge_primitive(np.arctan(ua / aq), s))
    return np.where(ok, val, 0.0).sum(axis=1) / (2 * s)


# ---------------------------------------------------------------------------
# mass, load and control maps
# ---------------------------------------------------------------------------

def _local_mass(dim):
    m = np.ones((dim + 1, dim + 1)) + np.eye(dim + 1)
    return m / ((dim + 1) * (dim + 2))


def _scatter_dofs(mesh, local, rows_per_cell=None):
    """Sum ``local[c, a, b]`` into a dof x dof sparse matrix."""
    dm = mesh.dof_map()
    cd = dm[mesh.cells]
    nl = cd.shape[1]
    I = np.repeat(cd, nl, axis=1).ravel()
    J = np.tile(cd, (1, nl)).ravel()
    V = local.reshape(len(cd), -1).ravel()
    keep = (I >= 0) & (J >= 0)
    n = mesh.n_dofs
    return sp.coo_array((V[keep], (I[keep], J[keep])), shape=(n, n)).tocsr()


def mass_matrix(mesh, all_vertices=False):
    """Exact P1 mass matrix on interior dofs (or on all vertices)."""
    meas = mesh.cell_measures()
    local = meas[:, None, None] * _local_mass(mesh.dim)[None]
    if all_vertices:
        nl = mesh.dim + 1
        I = np.repeat(mesh.cells, nl, axis=1).ravel()
        J = np.tile(mesh.cells, (1, nl)).ravel()
        n = mesh.n_vertices
        A = sp.coo_array((local.ravel(), (I, J)), shape=(n, n)).tocsr()
    else:
        A = _scatter_dofs(mesh, local)
    A = 0.5 * (A + A.T)
    return SparseSymMatrix(A)


def quadrature_points(mesh, order):
    """Physical quadrature points, weights and barycentric coordinates.

    Returns ``(x, w, bary)`` with ``x`` of shape ``(n_cells, q, dim)`` and
    ``w`` of shape ``(n_cells, q)`` (weights include the cell measure).
    """
    bary, w = cell_rule(mesh.dim, order)
    x = map_points(mesh.cell_vertices(), bary)
    return x, mesh.cell_measures()[:, None] * w[None, :], bary


class LoadOperator:
    """Maps values at fixed quadrature points to the load vector
    ``F_i = Σ_q w_q g(x_q) φ_i(x_q)``.

    Attributes
    ----------
    points : ndarray, shape (n_points, dim)
    """

    def __init__(self, mesh, order=5):
        x, w, bary = quadrature_points(mesh, order)
        nc, q = w.shape
        self.points = x.reshape(-1, mesh.dim)
        self.weights = w.ravel()
        dm = mesh.dof_map()
        rows = np.repeat(dm[mesh.cells], q, axis=0).ravel()
        cols = np.repeat(np.arange(nc * q), mesh.dim + 1)
        vals = (w.ravel()[:, None] * np.tile(bary, (nc, 1))).ravel()
        keep = rows >= 0
        self.matrix = sp.csr_array((vals[keep], (rows[keep], cols[keep])),
                                   shape=(mesh.n_dofs, nc * q))

    def __call__(self, values):
        return self.matrix @ np.asarray(values, dtype=float)

    def of(self, g):
        return self(np.asarray(g(self.points), dtype=float).reshape(-1))

    def integral(self, values):
        """``∫_Ω g`` from point values."""
        return float(self.weights @ values)


def load_vector(mesh, g, order=5):
    """``F_i = ∫ g φ_i`` over interior hat functions by Gauss quadrature.

    ``g`` receives points of shape ``(m, dim)`` and returns ``m`` values.
    """
    return LoadOperator(mesh, order).of(g)


def _gather(mesh, loc):
    dm = mesh.dof_map()
    cd = dm[mesh.cells].ravel()
    keep = cd >= 0
    return np.bincount(cd[keep], weights=loc.ravel()[keep], minlength=mesh.n_dofs)


def control_matrix(mesh):
    """``B[i, c] = ∫_c φ_i``: maps cellwise constants to nodal loads."""
    dm = mesh.dof_map()
    cd = dm[mesh.cells]
    meas = mesh.cell_measures() / (mesh.dim + 1)
    cells = np.repeat(np.arange(mesh.n_cells), mesh.dim + 1)
    rows = cd.ravel()
    vals = np.repeat(meas, mesh.dim + 1)
    keep = rows >= 0
    return sp.csr_array((vals[keep], (rows[keep], cells[keep])), shape=(mesh.n_dofs, mesh.n_cells))


# ---------------------------------------------------------------------------
# stiffness
# ---------------------------------------------------------------------------

def fractional_stiffness(mesh, kp, qc=None):
    """Galerkin matrix ``K_ij = A(φ_i, φ_j)`` on interior hat functions.

    The returned matrix is exactly symmetric.
    """
    K = _assemble(mesh, kp, qc, kp.c_ns, split=False)
    return SparseSymMatrix(0.5 * (K + K.T))


def stiffness_parts(mesh, kp, qc=None, scale=None):
    """The Ω×Ω double-integral part and the complement part, both dense.

    ``scale`` overrides the kernel constant (used to check linearity).
    """
    C = kp.c_ns if scale is None else float(scale)
    return _assemble(mesh, kp, qc, C, split=True)


def _assemble(mesh, kp, qc, C, split):
    if qc is None:
        qc = QuadConfig()
    if not 0.0 < kp.s < 1.0:
        raise ValueError(f"s must lie in (0, 1), got {kp.s}")
    if kp.n != mesh.dim:
        raise ValueError("kernel dimension does not match the mesh")
    geo = _PairGeometry(mesh, qc)
    if mesh.dim == 1:
        full_diag, comp_diag = _diag_1d(mesh, kp.s)
        touch = _touching_1d(mesh, geo, kp.s, qc)
    else:
        full_diag, comp_diag = _diag_2d(mesh, geo, kp.s, qc, with_comp=split)
        touch = _touching_2d(mesh, geo, kp.s, qc)
    X = _disjoint_cross(mesh, geo, kp.s, qc)
    if not split:
        return C * (touch + _scatter_dofs(mesh, full_diag).toarray() - X)
    pair = C * (touch + _scatter_dofs(mesh, full_diag - comp_diag).toarray() - X)
    comp = C * _scatter_dofs(mesh, comp_diag).toarray()
    return pair, comp


class _PairGeometry:
    """Classification of element pairs: touching (by shared vertices),
    near-field and far-field disjoint pairs."""

    def __init__(self, mesh, qc):
        nc = mesh.n_cells
        nl = mesh.dim + 1
        inc = sp.csr_array((np.ones(nc * nl), (np.repeat(np.arange(nc), nl), mesh.cells.ravel())),
                           shape=(nc, mesh.n_vertices))
        shared = (inc @ inc.T).tocoo()
        upper = shared.row < shared.col
        self.touch_pairs = np.column_stack([shared.row[upper], shared.col[upper]])
        self.touch_shared = shared.data[upper].astype(int)
        self.patch = shared.tocsr()

        cen = mesh.centroids()
        diam = mesh.cell_diameters()
        tree = cKDTree(cen)
        cand = tree.query_pairs((1.0 + qc.near_field_threshold) * diam.max() + 1e-12,
                                output_type="ndarray")
        if len(cand):
            i, j = cand[:, 0], cand[:, 1]
            i, j = np.minimum(i, j), np.maximum(i, j)
            gap = np.linalg.norm(cen[i] - cen[j], axis=1) - 0.5 * (diam[i] + diam[j])
            near = gap <= qc.near_field_threshold * np.maximum(diam[i], diam[j]) * (1 + 1e-9)
            pairs = np.column_stack([i[near], j[near]])
            key_t = set(map(tuple, self.touch_pairs.tolist()))
            mask = np.array([tuple(p) not in key_t for p in pairs.tolist()], dtype=bool)
            self.near_pairs = pairs[mask] if len(pairs) else pairs
        else:
            self.near_pairs = np.zeros((0, 2), dtype=int)
        # cell pairs excluded from the far-field product
        ex = np.vstack([self.touch_pairs, self.near_pairs])
        rows = np.concatenate([ex[:, 0], ex[:, 1], np.arange(nc)])
        cols = np.concatenate([ex[:, 1], ex[:, 0], np.arange(nc)])
        self.not_far = sp.csr_array((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(nc, nc))


def _kernel(d2, s, n):
    return d2 ** (-(n + 2 * s) / 2)


def _disjoint_cross(mesh, geo, s, qc):
    """``X_ab = Σ_{ordered disjoint pairs} ∬ φ_a(x) φ_b(y) k(x - y)``."""
    n = mesh.dim
    nd = mesh.n_dofs
    dm = mesh.dof_map()
    cd = dm[mesh.cells]
    X = np.zeros((nd, nd))

    # far field: one global rule, excluded blocks masked out
    x, w, bary = quadrature_points(mesh, qc.gauss_order_regular)
    nc, q = w.shape
    pts = x.reshape(-1, n)
    rows = np.repeat(np.arange(nc * q), n + 1)
    cols = np.repeat(cd, q, axis=0).ravel()
    vals = (w.ravel()[:, None] * np.tile(bary, (nc, 1))).ravel()
    keep = cols >= 0
    Phi = sp.csr_array((vals[keep], (rows[keep], cols[keep])), shape=(nc * q, nd))
    chunk = max(1, int(4e6 // (q * q * nc)))
    for c0 in range(0, nc, chunk):
        c1 = min(nc, c0 + chunk)
        p0, p1 = c0 * q, c1 * q
        d2 = np.zeros((p1 - p0, nc * q))
        for k in range(n):
            d2 += (pts[p0:p1, k, None] - pts[None, :, k]) ** 2
        excl = geo.not_far[c0:c1].toarray()
        excl = np.repeat(np.repeat(excl, q, axis=0), q, axis=1)
        d2[excl] = 1.0
        ker = _kernel(d2, s, n)
        ker[excl] = 0.0
        X += Phi[p0:p1].T @ (Phi.T @ ker.T).T

    # near field: higher order per pair
    pairs = geo.near_pairs
    if len(pairs):
        bary_s, ws = cell_rule(n, qc.gauss_order_singular)
        cv = mesh.cell_vertices()
        meas = mesh.cell_measures()
        for lo in range(0, len(pairs), 2000):
            pr = pairs[lo:lo + 2000]
            xa = np.einsum("qa,pad->pqd", bary_s, cv[pr[:, 0]])
            xb = np.einsum("qa,pad->pqd", bary_s, cv[pr[:, 1]])
            diff = xa[:, :, None, :] - xb[:, None, :, :]
            ker = _kernel(np.einsum("pijd,pijd->pij", diff, diff), s, n)
            wk = ker * (ws[:, None] * ws[None, :])[None] * (meas[pr[:, 0]] * meas[pr[:, 1]])[:, None, None]
            loc = np.einsum("ia,pij,jb->pab", bary_s, wk, bary_s)
            _add_pair_blocks(X, cd[pr[:, 0]], cd[pr[:, 1]], loc)
            _add_pair_blocks(X, cd[pr[:, 1]], cd[pr[:, 0]], loc.transpose(0, 2, 1))
    return X


def _add_pair_blocks(X, da, db, loc):
    nl = da.shape[1]
    I = np.repeat(da, nl, axis=1).ravel()
    J = np.tile(db, (1, nl)).ravel()
    V = loc.ravel()
    keep = (I >= 0) & (J >= 0)
    nd = X.shape[0]
    X += np.bincount(I[keep] * nd + J[keep], weights=V[keep], minlength=nd * nd).reshape(nd, nd)


def _add_union_blocks(T, dofs, loc):
    """Scatter local matrices over union vertex lists into a dense array."""
    nl = dofs.shape[1]
    I = np.repeat(dofs, nl, axis=1).ravel()
    J = np.tile(dofs, (1, nl)).ravel()
    V = loc.ravel()
    keep = (I >= 0) & (J >= 0)
    nd = T.shape[0]
    T += np.bincount(I[keep] * nd + J[keep], weights=V[keep], minlength=nd * nd).reshape(nd, nd)


# ---- 1D -------------------------------------------------------------------

def _power_integral(t0, t1, e):
    """``∫_{t0}^{t1} t^(e-1) dt`` for ``0 <= t0 < t1`` (inf if divergent)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if abs(e) < 1e-14:
            return np.log(t1 / t0)
        return np.where(t0 > 0, t0 ** e * np.expm1(e * np.log(t1 / t0)) / e,
                        np.where(e > 0, t1 ** e / e, np.inf))


def _power_moments(t0, t1, s):
    """``∫_{t0}^{t1} t^(j-2s) dt`` for j = 0, 1, 2 (inf where divergent)."""
    return [_power_integral(t0, t1, j + 1 - 2 * s) for j in range(3)]


def _linear_power_moments(alpha, beta, p):
    """``∫_0^1 v^j (alpha + beta v)^(-p) dv`` for j = 0, 1, 2, exactly."""
    t0, t1 = alpha, alpha + beta
    M = [_power_integral(t0, t1, k + 1 - p) for k in range(3)]
    return (M[0] / beta,
            (M[1] - alpha * M[0]) / beta ** 2,
            (M[2] - 2 * alpha * M[1] + alpha ** 2 * M[0]) / beta ** 3)


def _interval_moments(x0, x1, c, s):
    """``M[:, a, b] = ∫_{x0}^{x1} λ_a λ_b |y - c|^{-2s} dy`` for ``c``
    outside every cell ``(x0, x1)``.

    Closed form in the distance variable when ``c`` is within one cell
    length; Gauss-Legendre otherwise.  Entries that diverge (``c`` at a cell
    end and a basis function not vanishing there) are returned as zero.
    """
    h = x1 - x0
    left_side = c <= x0
    t0 = np.where(left_side, x0 - c, c - x1)
    t1 = t0 + h
    # near: basis of the end closer to c, far: the other one
    m0, m1, m2 = _power_moments(t0, t1, s)
    touching = t0 == 0
    with np.errstate(invalid="ignore"):
        nn = (t1 ** 2 * m0 - 2 * t1 * m1 + m2) / h ** 2
        ff = np.where(touching, m2, t0 ** 2 * m0 - 2 * t0 * m1 + m2) / h ** 2
        nf = np.where(touching, t1 * m1 - m2,
                      -t0 * t1 * m0 + (t0 + t1) * m1 - m2) / h ** 2
    far = t0 >= h
    if np.any(far):
        g, w = gauss_legendre(16)
        tf = t0[far, None] + h[far, None] * g[None, :]
        ker = tf ** (-2 * s) * (h[far, None] * w[None, :])
        ln = (t1[far, None] - tf) / h[far, None]
        lf = 1.0 - ln
        nn[far] = (ker * ln * ln).sum(1)
        ff[far] = (ker * lf * lf).sum(1)
        nf[far] = (ker * ln * lf).sum(1)
    out = np.zeros((len(h), 2, 2))
    near_idx = np.where(left_side, 0, 1)
    far_idx = 1 - near_idx
    r = np.arange(len(h))
    out[r, near_idx, near_idx] = nn
    out[r, far_idx, far_idx] = ff
    out[r, near_idx, far_idx] = nf
    out[r, far_idx, near_idx] = nf
    return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)


def _patch_interval(mesh):
    x = mesh.vertices[:, 0]
    left = x[mesh.cells[:, 0]]
    right = x[mesh.cells[:, 1]]
    order = np.argsort(left)
    pl = np.empty_like(left)
    pr = np.empty_like(right)
    sl, sr = left[order], right[order]
    pl[order] = np.concatenate([[sl[0]], sl[:-1]])
    pr[order] = np.concatenate([sr[1:], [sr[-1]]])
    return left, right, pl, pr


def _diag_1d(mesh, s):
    """Cellwise ``∫ λ_a λ_b w`` for ``w`` the kernel integral over the
    complement of the cell patch (full) and of the mesh domain (comp)."""
    left, right, pl, pr = _patch_interval(mesh)
    a, b = mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max()

    def moments(lo_end, hi_end):
        return (_interval_moments(left, right, lo_end, s)
                + _interval_moments(left, right, hi_end, s)) / (2 * s)

    full = moments(pl, pr)
    comp = moments(np.full_like(left, a), np.full_like(right, b))
    return full, comp


def _touching_1d(mesh, geo, s, qc):
    """Identical and neighbouring pairs in 1D, dense dof x dof."""
    nd = mesh.n_dofs
    T = np.zeros((nd, nd))
    dm = mesh.dof_map()
    cd = dm[mesh.cells]
    x = mesh.vertices[:, 0]
    h = x[mesh.cells[:, 1]] - x[mesh.cells[:, 0]]
    # identical: ordered pair counted once with factor 1/2
    g = np.stack([-1.0 / h, 1.0 / h], axis=1)
    coef = 2.0 * h ** (3 - 2 * s) / ((2 - 2 * s) * (3 - 2 * s))
    loc = 0.5 * coef[:, None, None] * g[:, :, None] * g[:, None, :]
    _add_union_blocks(T, cd, loc)

    pairs = geo.touch_pairs
    if len(pairs):
        c1, c2 = pairs[:, 0], pairs[:, 1]
        # orient so that c1 lies left of c2
        swap = x[mesh.cells[c1, 0]] > x[mesh.cells[c2, 0]]
        c1, c2 = np.where(swap, c2, c1), np.where(swap, c1, c2)
        h1, h2 = h[c1], h[c2]
        union = np.column_stack([cd[c1, 0], cd[c1, 1], cd[c2, 1]])
        g1 = np.array([1.0, -1.0, 0.0])
        g2 = np.array([0.0, -1.0, 1.0])
        # face u = 1: psi = g1 - g2 v, |x - y| = h1 + h2 v; face v = 1 mirrored
        m1 = _linear_power_moments(h1, h2, 1 + 2 * s)
        m2 = _linear_power_moments(h2, h1, 1 + 2 * s)
        c0 = g1[:, None] * g1[None, :]
        c1 = -(g1[:, None] * g2[None, :] + g2[:, None] * g1[None, :])
        c2 = g2[:, None] * g2[None, :]
        loc = (m1[0][:, None, None] * c0 + m1[1][:, None, None] * c1 + m1[2][:, None, None] * c2
               + m2[0][:, None, None] * c2 + m2[1][:, None, None] * c1 + m2[2][:, None, None] * c0)
        loc *= (h1 * h2 / (3 - 2 * s))[:, None, None]
        _add_union_blocks(T, union, loc)
    return T


# ---- 2D -------------------------------------------------------------------

def _patch_edges(mesh, geo):
    """Boundary edges of each cell's vertex patch, as flat arrays
    ``(cell, a, b)`` oriented counterclockwise."""
    cells = mesh.cells
    ptr, idx = geo.patch.indptr, geo.patch.indices
    out_c, out_a, out_b = [], [], []
    for c in range(mesh.n_cells):
        pc = cells[idx[ptr[c]:ptr[c + 1]]]
        ea = pc.ravel()
        eb = np.roll(pc, -1, axis=1).ravel()
        nv = mesh.n_vertices
        fwd = ea * nv + eb
        rev = eb * nv + ea
        bnd = ~np.isin(fwd, rev)
        out_c.append(np.full(bnd.sum(), c))
        out_a.append(ea[bnd])
        out_b.append(eb[bnd])
    return np.concatenate(out_c), np.concatenate(out_a), np.concatenate(out_b)


def _domain_edges(mesh):
    cells = mesh.cells
    ea = cells.ravel()
    eb = np.roll(cells, -1, axis=1).ravel()
    nv = mesh.n_vertices
    bnd = ~np.isin(ea * nv + eb, eb * nv + ea)
    return ea[bnd], eb[bnd]


def _diag_2d(mesh, geo, s, qc, boundary_order=None, with_comp=True):
    V = mesh.vertices
    cv = mesh.cell_vertices()
    meas = mesh.cell_measures()
    on_bnd = mesh.boundary_cells()
    if boundary_order is None:
        boundary_order = 2 * qc.gauss_order_singular
    full = np.zeros((mesh.n_cells, 3, 3))
    comp = np.zeros((mesh.n_cells, 3, 3))
    da, db = _domain_edges(mesh)
    ec, ea, eb = _patch_edges(mesh, geo)
    starts = np.searchsorted(ec, np.arange(mesh.n_cells + 1))
    for mask, order in ((~on_bnd, qc.gauss_order_singular), (on_bnd, boundary_order)):
        ids = np.flatnonzero(mask)
        if not len(ids):
            continue
        bary, w = cell_rule(2, order)
        for lo in range(0, len(ids), 256):
            cid = ids[lo:lo + 256]
            pts = np.einsum("qa,cad->cqd", bary, cv[cid])
            rho_full = np.empty(pts.shape[:2])
            for k, c in enumerate(cid):
                sl = slice(starts[c], starts[c + 1])
                rho_full[k] = polygon_complement_weight(pts[k], V[ea[sl]], V[eb[sl]], s)
            wq = w[None, :] * meas[cid, None]
            full[cid] = np.einsum("cq,qa,qb->cab", wq * rho_full, bary, bary)
            if with_comp:
                rho_comp = polygon_complement_weight(pts.reshape(-1, 2), V[da], V[db],
                                                     s).reshape(pts.shape[:2])
                comp[cid] = np.einsum("cq,qa,qb->cab", wq * rho_comp, bary, bary)
    return full, comp


def _touching_2d(mesh, geo, s, qc):
    nd = mesh.n_dofs
    T = np.zeros((nd, nd))
    dm = mesh.dof_map()
    cd = dm[mesh.cells]
    V = mesh.vertices
    cv = mesh.cell_vertices()
    meas = mesh.cell_measures()
    qo = qc.gauss_order_singular

    # identical pairs
    grads = _p1_gradients(cv)
    loc = _identical_2d(cv, grads, s, 2 * qo)
    _add_union_blocks(T, cd, 0.5 * meas[:, None, None] * loc)

    pairs, shared = geo.touch_pairs, geo.touch_shared
    edge = pairs[shared == 2]
    vert = pairs[shared == 1]
    if len(edge):
        P, Q, A, B = _edge_pair_vertices(mesh.cells, edge)
        loc = _edge_pair_2d(V[P], V[Q], V[A], V[B], s, qo)
        loc *= (4 * meas[edge[:, 0]] * meas[edge[:, 1]])[:, None, None]
        _add_union_blocks(T, dm[np.column_stack([P, Q, A, B])], loc)
    if len(vert):
        P, A1, A2, B1, B2 = _vertex_pair_vertices(mesh.cells, vert)
        loc = _vertex_pair_2d(V[P], V[A1], V[A2], V[B1], V[B2], s, qo)
        loc *= (4 * meas[vert[:, 0]] * meas[vert[:, 1]])[:, None, None]
        _add_union_blocks(T, dm[np.column_stack([P, A1, A2, B1, B2])], loc)
    return T


def _p1_gradients(cv):
    """Gradients of the barycentric coordinates, shape (n_cells, 3, 2)."""
    e1 = cv[:, 1] - cv[:, 0]
    e2 = cv[:, 2] - cv[:, 0]
    J = np.stack([e1, e2], axis=2)  # columns e1, e2
    Jinv_T = np.linalg.inv(J).transpose(0, 2, 1)
    g12 = np.einsum("cij,kj->cki", Jinv_T, np.eye(2))
    g0 = -g12.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g12], axis=1)


def _identical_2d(cv, grads, s, order):
    """``∬_{K×K} (g_a·(x-y)) (g_b·(x-y)) |x-y|^{-2-2s} / |K|`` via the
    covariogram ``|K ∩ (K+z)| = |K| (1 - N(z))^2`` of a triangle."""
    nc = cv.shape[0]
    d = np.stack([cv[:, 1] - cv[:, 0], cv[:, 2] - cv[:, 1], cv[:, 0] - cv[:, 2]], axis=1)
    hexv = np.concatenate([d, -d], axis=1)  # 6 vertices of K - K
    ang = np.arctan2(hexv[..., 1], hexv[..., 0])
    order_idx = np.argsort(ang, axis=1)
    hexv = np.take_along_axis(hexv, order_idx[..., None], axis=1)
    ang = np.take_along_axis(ang, order_idx, axis=1)
    t, w = gauss_legendre(order)
    out = np.zeros((nc, 3, 3))
    for k in range(6):
        p0 = hexv[:, k]
        p1 = hexv[:, (k + 1) % 6]
        a0 = ang[:, k]
        a1 = ang[:, (k + 1) % 6] + (2 * np.pi if k == 5 else 0.0)
        th = a0[:, None] + (a1 - a0)[:, None] * t[None, :]
        e = np.stack([np.cos(th), np.sin(th)], axis=2)
        # ray-edge intersection distance
        ed = p1 - p0
        nrm = np.stack([ed[:, 1], -ed[:, 0]], axis=1)
        R = np.einsum("cd,cd->c", p0, nrm)[:, None] / np.einsum("cqd,cd->cq", e, nrm)
        ge = np.einsum("cad,cqd->cqa", grads, e)
        wq = (a1 - a0)[:, None] * w[None, :] * R ** (2 - 2 * s)
        out += np.einsum("cq,cqa,cqb->cab", wq, ge, ge)
    fac = 2.0 * math.exp(math.lgamma(2 - 2 * s) - math.lgamma(5 - 2 * s))
    return fac * out


def _edge_pair_vertices(cells, pairs):
    c1 = cells[pairs[:, 0]]
    c2 = cells[pairs[:, 1]]
    in2 = (c1[:, :, None] == c2[:, None, :]).any(axis=2)
    in1 = (c2[:, :, None] == c1[:, None, :]).any(axis=2)
    A = c1[~in2]
    B = c2[~in1]
    shared = c1[in2].reshape(-1, 2)
    return shared[:, 0], shared[:, 1], A, B


def _vertex_pair_vertices(cells, pairs):
    c1 = cells[pairs[:, 0]]
    c2 = cells[pairs[:, 1]]
    in2 = (c1[:, :, None] == c2[:, None, :]).any(axis=2)
    in1 = (c2[:, :, None] == c1[:, None, :]).any(axis=2)
    P = c1[in2]
    A = c1[~in2].reshape(-1, 2)
    B = c2[~in1].reshape(-1, 2)
    return P, A[:, 0], A[:, 1], B[:, 0], B[:, 1]


def _split_triangle_rule(order, split_var):
    """Rule on the unit triangle ``{a, b >= 0, a + b <= 1}`` split along
    ``split_var = 1/2`` (0: the line a = 1/2, 1: the line b = 1/2)."""
    t, w = gauss_legendre(order)
    pts, wts = [], []
    for lo, hi in ((0.0, 0.5), (0.5, 1.0)):
        outer = lo + (hi - lo) * t
        wo = (hi - lo) * w
        inner = (1.0 - outer)[:, None] * t[None, :]
        wi = (1.0 - outer)[:, None] * (wo[:, None] * w[None, :])
        O = np.broadcast_to(outer[:, None], inner.shape)
        if split_var == 1:
            pts.append(np.column_stack([inner.ravel(), O.ravel()]))
        else:
            pts.append(np.column_stack([O.ravel(), inner.ravel()]))
        wts.append(wi.ravel())
    return np.vstack(pts), np.concatenate(wts)


def _edge_pair_2d(P, Q, A, B, s, order):
    """Local 4x4 matrices (vertex order P, Q, A, B) of
    ``∬ ψ_a ψ_b |x-y|^{-2-2s}`` over an edge-sharing pair, divided by
    ``4 |K1| |K2|``."""
    e = Q - P
    a1 = A - P
    a2 = B - P
    # psi = w dQ + u2 dA - v2 dB
    dQ = np.array([-1.0, 1.0, 0.0, 0.0])
    dA = np.array([-1.0, 0.0, 1.0, 0.0])
    dB = np.array([-1.0, 0.0, 0.0, 1.0])
    out = np.zeros((len(P), 4, 4))
    for sign, split in ((1.0, 1), (-1.0, 0)):
        pts, wts = _split_triangle_rule(order, split)
        a, b = pts[:, 0], pts[:, 1]
        wv = sign * (1.0 - a - b)
        u2, v2 = a, b
        m = np.maximum(u2 + np.maximum(wv, 0), v2 + np.maximum(-wv, 0))
        psi = wv[:, None] * dQ + u2[:, None] * dA - v2[:, None] * dB
        d = (wv[None, :, None] * e[:, None, :] + u2[None, :, None] * a1[:, None, :]
             - v2[None, :, None] * a2[:, None, :])
        ker = np.einsum("pqd,pqd->pq", d, d) ** (-1 - s)
        wq = ker * (wts * m ** (-(3 - 2 * s)))[None, :]
        out += np.einsum("pq,qa,qb->pab", wq, psi, psi)
    return out / ((3 - 2 * s) * (4 - 2 * s))


def _vertex_pair_2d(P, A1, A2, B1, B2, s, order):
    """Local 5x5 matrices (order P, A1, A2, B1, B2) for a vertex-sharing
    pair, divided by ``4 |K1| |K2|``."""
    E1, E2 = A1 - P, A2 - P
    F1, F2 = B1 - P, B2 - P
    t, wt = gauss_legendre(order)
    tri, wtri = triangle_rule(order)
    # face |u|_1 = 1: u = (alpha, 1 - alpha), v in the triangle
    al = np.repeat(t, len(wtri))
    wa = np.repeat(wt, len(wtri))
    tv = np.tile(tri, (len(t), 1))
    wv = np.tile(wtri, len(t))
    out = np.zeros((len(P), 5, 5))
    for face in (0, 1):
        if face == 0:
            u1, u2, v1, v2 = al, 1.0 - al, tv[:, 0], tv[:, 1]
        else:
            u1, u2, v1, v2 = tv[:, 0], tv[:, 1], al, 1.0 - al
        psi = np.column_stack([-u1 - u2 + v1 + v2, u1, u2, -v1, -v2])
        d = (u1[None, :, None] * E1[:, None, :] + u2[None, :, None] * E2[:, None, :]
             - v1[None, :, None] * F1[:, None, :] - v2[None, :, None] * F2[:, None, :])
        ker = np.einsum("pqd,pqd->pq", d, d) ** (-1 - s)
        out += np.einsum("pq,qa,qb->pab", ker * (wa * wv)[None, :], psi, psi)
    return out / (4 - 2 * s)
