"""Error norms, experimental orders of convergence and convergence studies.

Discrete space-time functions are piecewise constant in time: the value on
``(t_{k-1}, t_k]`` is step ``k``.  States are P1 in space, controls cellwise
constant.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .assembly import KernelParams, QuadConfig, fractional_stiffness, mass_matrix
from .mesh import Disc, Interval, build_mesh, mesh_stats
from .optimize import ControlField, ControlProblem, solve_control_bfgs
from .quadrature import cell_rule, gauss_legendre
from .timestepping import TimeGrid, Trajectory

BELOW_TOL = "below-tolerance"
"""Marker returned by :func:`eoc` when an error vanishes."""


# ---------------------------------------------------------------------------
# point location and sampling
# ---------------------------------------------------------------------------

def locate_cells(mesh, points):
    """Index of a cell containing each point, ``-1`` outside the mesh."""
    pts = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
    if mesh.dim == 1:
        cv = mesh.cell_vertices()[:, :, 0]
        left = cv.min(axis=1)
        order = np.argsort(left)
        edges = np.append(left[order], cv.max())
        pos = np.searchsorted(edges, pts[:, 0], side="right") - 1
        pos = np.where(pts[:, 0] == edges[-1], len(order) - 1, pos)
        inside = (pos >= 0) & (pos < len(order))
        return np.where(inside, order[np.clip(pos, 0, len(order) - 1)], -1)
    from matplotlib.tri import Triangulation

    tri = Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.cells)
    return np.asarray(tri.get_trifinder()(pts[:, 0], pts[:, 1]), dtype=int)


def _barycentric(mesh, cells, pts):
    cv = mesh.cell_vertices()[cells]
    if mesh.dim == 1:
        lam = (pts[:, 0] - cv[:, 0, 0]) / (cv[:, 1, 0] - cv[:, 0, 0])
        return np.column_stack([1 - lam, lam])
    T = np.stack([cv[:, 1] - cv[:, 0], cv[:, 2] - cv[:, 0]], axis=2)
    lam = np.linalg.solve(T, (pts - cv[:, 0])[..., None])[..., 0]
    return np.column_stack([1 - lam.sum(axis=1), lam])


def nodal_sampler(mesh, points, cells=None, bary=None):
    """Sparse matrix evaluating interior P1 coefficients at ``points``;
    functions vanish outside the mesh."""
    pts = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
    if cells is None:
        cells = locate_cells(mesh, pts)
    inside = cells >= 0
    if bary is None:
        bary = np.zeros((len(pts), mesh.dim + 1))
        if inside.any():
            bary[inside] = _barycentric(mesh, cells[inside], pts[inside])
    dm = mesh.dof_map()
    cols = dm[mesh.cells[np.where(inside, cells, 0)]]
    rows = np.repeat(np.arange(len(pts)), mesh.dim + 1).reshape(cols.shape)
    keep = (cols >= 0) & inside[:, None]
    return sp.csr_array((bary[keep], (rows[keep], cols[keep])), shape=(len(pts), mesh.n_dofs))


def cell_lookup(mesh, points, cells=None):
    """Cell index per point; points outside the mesh take the cell with the
    nearest centroid."""
    pts = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
    if cells is None:
        cells = locate_cells(mesh, pts)
    cells = np.array(cells)
    out = cells < 0
    if out.any():
        from scipy.spatial import cKDTree

        cells[out] = cKDTree(mesh.centroids()).query(pts[out])[1]
    return cells


class DiscreteField:
    """Space-time discrete function, piecewise constant in time.

    Parameters
    ----------
    mesh : Mesh
    grid : TimeGrid
    values : ndarray, shape (K, n_dofs) for ``kind="nodal"`` or
        (K, n_cells) for ``kind="cell"``; row ``k-1`` is step ``k``.
    kind : {"nodal", "cell"}
    """

    def __init__(self, mesh, grid, values, kind):
        if kind not in ("nodal", "cell"):
            raise ValueError(f"unknown kind {kind!r}")
        self.mesh, self.grid, self.kind = mesh, grid, kind
        self.values = np.asarray(values, dtype=float)
        width = mesh.n_dofs if kind == "nodal" else mesh.n_cells
        if self.values.shape != (grid.K_steps, width):
            raise ValueError(f"expected shape {(grid.K_steps, width)}, got {self.values.shape}")
        self._cache = {}

    @classmethod
    def wrap(cls, W, mesh=None):
        if isinstance(W, DiscreteField):
            return W
        if isinstance(W, ControlField):
            return cls(W.mesh, W.grid, W.values, "cell")
        if isinstance(W, Trajectory):
            if mesh is None:
                raise ValueError("a mesh is required for trajectories")
            vals = W.values[1:] if W.start == 0 else W.values
            return cls(mesh, W.grid, vals, "nodal")
        raise TypeError(f"cannot interpret {type(W).__name__} as a discrete field")

    def step_of(self, t):
        """Step ``k`` with ``t`` in ``(t_{k-1}, t_k]`` (clamped to 1..K)."""
        k = np.searchsorted(self.grid.nodes, t, side="left")
        return int(np.clip(k, 1, self.grid.K_steps))

    def sampler(self, points, cells=None, bary=None):
        key = id(points)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is points:
            return hit[1]
        if self.kind == "nodal":
            op = nodal_sampler(self.mesh, points, cells, bary)
        else:
            op = cell_lookup(self.mesh, points, cells)
        self._cache = {key: (points, op)}
        return op

    def at_step(self, k, points, cells=None, bary=None):
        op = self.sampler(points, cells, bary)
        v = self.values[k - 1]
        return op @ v if self.kind == "nodal" else v[op]

    def __call__(self, t, x):
        return self.at_step(self.step_of(t), x)


# ---------------------------------------------------------------------------
# error quadrature
# ---------------------------------------------------------------------------

@dataclass
class ErrorQuadrature:
    """Spatial rule on a mesh, refined on boundary cells where exact
    solutions behave like ``dist^s``.

    Attributes
    ----------
    points : ndarray (n, dim)
    weights : ndarray (n,)
    cells : ndarray (n,)  owning cell of each point
    bary : ndarray (n, dim + 1)  barycentric coordinates in that cell
    """

    points: np.ndarray
    weights: np.ndarray
    cells: np.ndarray
    bary: np.ndarray

    @classmethod
    def build(cls, mesh, order=6, boundary_levels=None):
        """``order`` Gauss points per (sub)cell; boundary cells are split
        geometrically toward the boundary (1D, ``boundary_levels`` halvings,
        default 16) or uniformly into ``4**boundary_levels`` triangles (2D,
        default 2)."""
        bary, w = cell_rule(mesh.dim, order)
        bnd = mesh.boundary_cells()
        if mesh.dim == 1:
            levels = 16 if boundary_levels is None else boundary_levels
            x, wx = gauss_legendre(order)
            breaks = np.concatenate([[0.0], 0.5 ** np.arange(levels, 0, -1), [1.0]])
            sub_t = np.concatenate([a + (b - a) * x for a, b in zip(breaks[:-1], breaks[1:])])
            sub_w = np.concatenate([(b - a) * wx for a, b in zip(breaks[:-1], breaks[1:])])
            sub = []
            for flip in (False, True):
                t = 1.0 - sub_t if flip else sub_t
                sub.append((np.column_stack([1 - t, t]), sub_w))
        else:
            levels = 2 if boundary_levels is None else boundary_levels
            sub = [_refined_triangle_rule(bary, w, levels)]
        pts, wts, cells, bcs = [], [], [], []
        meas = mesh.cell_measures()
        for c in range(mesh.n_cells):
            if bnd[c]:
                if mesh.dim == 1:
                    # refine toward the boundary end (t = 0 is vertex 0)
                    b_at_0 = mesh.boundary[mesh.cells[c, 0]]
                    b_at_1 = mesh.boundary[mesh.cells[c, 1]]
                    if b_at_0 and b_at_1:
                        half = 0.5 * sub[0][0][:, 1]
                        bc = np.vstack([np.column_stack([1 - half, half]),
                                        np.column_stack([half, 1 - half])])
                        wc = np.concatenate([0.5 * sub[0][1], 0.5 * sub[0][1]])
                    else:
                        bc, wc = sub[0] if b_at_0 else sub[1]
                else:
                    bc, wc = sub[0]
            else:
                bc, wc = bary, w
            bcs.append(bc)
            wts.append(meas[c] * wc)
            cells.append(np.full(len(wc), c))
        bcs = np.vstack(bcs)
        cells = np.concatenate(cells)
        cv = mesh.cell_vertices()[cells]
        pts = np.einsum("na,nad->nd", bcs, cv)
        return cls(pts, np.concatenate(wts), cells, bcs)


def _refined_triangle_rule(bary, w, levels):
    """Rule on the reference triangle after ``levels`` uniform red
    refinements, in barycentric coordinates with weights summing to 1."""
    tris = [np.eye(3)]
    for _ in range(levels):
        new = []
        for T in tris:
            m01, m12, m20 = (T[0] + T[1]) / 2, (T[1] + T[2]) / 2, (T[2] + T[0]) / 2
            new += [np.array([T[0], m01, m20]), np.array([m01, T[1], m12]),
                    np.array([m20, m12, T[2]]), np.array([m01, m12, m20])]
        tris = new
    pts = np.vstack([bary @ T for T in tris])
    wts = np.concatenate([w / len(tris)] * len(tris))
    return pts, wts


def _time_rule(breaks, order):
    x, w = gauss_legendre(order)
    t = np.concatenate([a + (b - a) * x for a, b in zip(breaks[:-1], breaks[1:])])
    wt = np.concatenate([(b - a) * w for a, b in zip(breaks[:-1], breaks[1:])])
    return t, wt


def _evaluate(w, t, quad, own):
    if isinstance(w, DiscreteField):
        if own is not None and w is own:
            return w.at_step(w.step_of(t), quad.points, quad.cells, quad.bary)
        return w(t, quad.points)
    return np.broadcast_to(np.asarray(w(t, quad.points), dtype=float), quad.weights.shape)


def l2q_error(w, W, mesh=None, exact_norm_sq=None, mode="direct", order=6, time_order=3,
              quad=None):
    """``‖w - W‖_{L²(Q)}`` for an exact or reference ``w`` and discrete ``W``.

    Parameters
    ----------
    w : callable ``w(t, x)`` or DiscreteField (e.g. a finer reference)
    W : Trajectory, ControlField or DiscreteField
    mesh : Mesh
        Mesh of ``W`` when ``W`` is a Trajectory.
    exact_norm_sq : float, optional
        ``‖w‖²_{L²(Q)}``; required for ``mode="formula"``.
    mode : {"direct", "formula"}
        ``"direct"`` integrates ``(w - W)²`` with Gauss rules in space (on the
        finer of the two meshes, refined at the boundary) and time (on the
        union of both time grids).  ``"formula"`` evaluates
        ``‖w‖² + Σ_k τ ∫ W^k (W^k - 2 w(t_k))`` and clamps at zero.
    """
    Wf = DiscreteField.wrap(W, mesh)
    grid = Wf.grid
    if isinstance(w, (Trajectory, ControlField)):
        raise TypeError("wrap reference solutions with DiscreteField.wrap(..., mesh)")
    if mode == "formula":
        if exact_norm_sq is None:
            raise ValueError("formula mode needs the exact norm of w")
        if isinstance(w, DiscreteField):
            raise ValueError("formula mode needs a callable w")
        q = quad or ErrorQuadrature.build(Wf.mesh, order)
        total = float(exact_norm_sq)
        for k, tk in enumerate(grid.nodes[1:], start=1):
            Wk = Wf.at_step(k, q.points, q.cells, q.bary)
            total += grid.tau * float(q.weights @ (Wk * (Wk - 2 * _evaluate(w, tk, q, None))))
        return math.sqrt(total) if total > 0 else 0.0
    if mode != "direct":
        raise ValueError(f"unknown error mode {mode!r}")
    integ = Wf
    breaks = grid.nodes
    if isinstance(w, DiscreteField):
        if abs(w.grid.T - grid.T) > 1e-12 * grid.T:
            raise ValueError("time grids of w and W cover different horizons")
        if w.mesh.dim != Wf.mesh.dim:
            raise ValueError("w and W live in different dimensions")
        breaks = np.union1d(breaks, w.grid.nodes)
        if w.mesh.n_cells > Wf.mesh.n_cells:
            integ = w
    if quad is None:
        quad = ErrorQuadrature.build(integ.mesh, order)
    elif len(quad.points) and integ is Wf and quad.cells.max() >= Wf.mesh.n_cells:
        raise ValueError("quadrature does not belong to the mesh of W")
    ts, wts = _time_rule(breaks, time_order)
    total = 0.0
    for t, wt in zip(ts, wts):
        d = _evaluate(w, t, quad, integ) - _evaluate(Wf, t, quad, integ)
        total += wt * float(quad.weights @ (d * d))
    return math.sqrt(max(total, 0.0))


def energy_error(fine_K, fine_mesh, fine_U, coarse_mesh, coarse_U):
    """``(Σ ∫ A(U_f - I U_c, U_f - I U_c) dt)^{1/2}`` with the coarse state
    interpolated at the fine vertices and both piecewise constant in time."""
    F = DiscreteField.wrap(fine_U, fine_mesh)
    C = DiscreteField.wrap(coarse_U, coarse_mesh)
    E = nodal_sampler(coarse_mesh, fine_mesh.vertices[fine_mesh.interior])
    breaks = np.union1d(F.grid.nodes, C.grid.nodes)
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b - a <= 0:
            continue
        mid = 0.5 * (a + b)
        d = F.values[F.step_of(mid) - 1] - E @ C.values[C.step_of(mid) - 1]
        total += (b - a) * float(d @ (fine_K @ d))
    return math.sqrt(max(total, 0.0))


def eoc(errors, hs):
    """Pairwise rates ``log(e_i/e_{i+1}) / log(h_i/h_{i+1})``.

    A pair containing a zero error yields :data:`BELOW_TOL`.
    """
    errors = [float(e) for e in errors]
    hs = [float(h) for h in hs]
    if len(errors) != len(hs):
        raise ValueError("errors and hs differ in length")
    if any(h <= 0 for h in hs) or any(h1 <= h2 for h1, h2 in zip(hs[:-1], hs[1:])):
        raise ValueError("hs must be positive and strictly decreasing")
    if any(e < 0 for e in errors):
        raise ValueError("errors must be nonnegative")
    rates = []
    for (e1, e2), (h1, h2) in zip(zip(errors[:-1], errors[1:]), zip(hs[:-1], hs[1:])):
        if e1 == 0 or e2 == 0:
            rates.append(BELOW_TOL)
        else:
            rates.append(math.log(e1 / e2) / math.log(h1 / h2))
    return rates


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def predicted_rates(s, eps=0.01):
    """``(γ, ϑ)`` with ``γ = min(1, s + 1/2 - ε)``, ``ϑ = min(s, 1/2 - ε)``."""
    return min(1.0, s + 0.5 - eps), min(s, 0.5 - eps)


@dataclass
class ConvergenceRecord:
    s: float
    level: int
    h: float
    tau: float
    n_dofs: int
    n_cells: int = 0
    h_max: float = float("nan")
    err_state_l2q: float = float("nan")
    err_state_energy: float = float("nan")
    err_control_l2q: float = float("nan")
    eoc_state: object = None
    eoc_control: object = None
    walltime_s: float = 0.0
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    status: str = "ok"

    def __post_init__(self):
        if not (self.h > 0 and self.tau > 0):
            raise ValueError("h and tau must be positive")
        for name in ("err_state_l2q", "err_state_energy", "err_control_l2q"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class StudyResult:
    config: object
    records: list = field(default_factory=list)

    def by_s(self, s):
        return [r for r in self.records if r.s == s]

    def rates(self, s, quantity):
        """Pairwise EOC of ``quantity`` over the successful levels of ``s``,
        against ``h`` (or ``τ`` when ``h`` is fixed)."""
        recs = [r for r in self.by_s(s) if r.status == "ok" and np.isfinite(getattr(r, quantity))]
        if len(recs) < 2:
            return []
        xs = [r.h for r in recs]
        if len(set(xs)) == 1:
            xs = [r.tau for r in recs]
        return eoc([getattr(r, quantity) for r in recs], xs)

    CSV_COLUMNS = ("s", "level", "h", "tau", "ndofs", "err_state_l2q", "err_state_energy",
                   "err_control_l2q", "eoc_state", "eoc_control", "walltime_s")

    def dump_csv(self, path):
        with Path(path).open("w") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for r in self.records:
                row = [r.s, r.level, r.h, r.tau, r.n_dofs, r.err_state_l2q, r.err_state_energy,
                       r.err_control_l2q, _fmt_rate(r.eoc_state), _fmt_rate(r.eoc_control),
                       r.walltime_s]
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    def dump_details(self, path):
        """All record fields, one row per level."""
        names = list(asdict(self.records[0]).keys()) if self.records else []
        with Path(path).open("w") as fh:
            fh.write(",".join(names) + "\n")
            for r in self.records:
                fh.write(",".join(_fmt(v) for v in asdict(r).values()) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v).replace(",", ";")


def _fmt_rate(r):
    return "" if r is None else (r if isinstance(r, str) else repr(float(r)))


@dataclass
class LevelSolution:
    mesh: object
    grid: object
    K: object
    U: object
    Z: object


def make_problem(name, s, mu, a, b, T):
    """``(spec, triple)`` for a named problem; ``triple`` is None without a
    closed-form solution."""
    from .oracle import manufactured_1d, manufactured_2d_i, problem_2d_ii

    if name == "manufactured-1d":
        return manufactured_1d(s, mu, a, b, T)
    if name == "manufactured-2d-I":
        return manufactured_2d_i(s, mu, a, b, T)
    if name == "problem-2d-II":
        return problem_2d_ii(s, mu, a, b, T), None
    raise ValueError(f"unknown problem {name!r}")


class StageError(RuntimeError):
    """Numerical failure tagged with the pipeline stage."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - tagged and re-raised
        raise StageError(name, f"{type(err).__name__}: {err}") from err


def solve_level(config, s, spec, h, k_steps=None):
    """Mesh, assemble and solve one level; returns ``(solution, record)``
    without errors filled in."""
    t0 = time.perf_counter()
    domain = spec.domain if spec.domain is not None else (Interval() if config.dim == 1 else Disc())
    mesh = _stage("mesh", build_mesh, domain, h, kappa=config.kappa)
    gamma, _ = predicted_rates(s, config.gamma_eps)
    h_tau = h**config.kappa if config.tau_rule == "h_kappa" else h
    grid = TimeGrid(spec.T, k_steps) if k_steps else TimeGrid.from_tau(spec.T, h_tau**gamma)
    qc = QuadConfig(config.order_regular, config.order_singular, config.near_threshold)
    K = _stage("assembly", fractional_stiffness, mesh, KernelParams(mesh.dim, s), qc)
    M = mass_matrix(mesh)
    prob = _stage("setup", ControlProblem, spec, mesh, grid, K=K, M=M, solver=config.solver,
                  tol=config.cg_tol, ud_rule=config.ud_rule)
    Z, U, P, rep = _stage("optimize", solve_control_bfgs, spec, mesh, grid, tol=config.opt_tol,
                          max_iter=config.max_iter, problem=prob)
    st = mesh_stats(mesh)
    rec = ConvergenceRecord(s=s, level=0, h=h, tau=grid.tau, n_dofs=mesh.n_dofs, n_cells=mesh.n_cells,
                            h_max=st.h_max, iterations=rep.iterations, residual=rep.residual,
                            converged=rep.converged, walltime_s=time.perf_counter() - t0)
    return LevelSolution(mesh, grid, K, U, Z), rec


def run_convergence_study(config, log=None):
    """Run every ``(s, level)`` of ``config`` and fill in errors and EOCs.

    Manufactured problems are compared with the exact solution; problem
    (II) with the finest successful level.  Energy errors always use the
    finest level as reference.  A failing level is recorded with its stage
    and the study moves on.
    """
    result = StudyResult(config)
    levels = list(config.levels)
    steps = list(config.k_steps) if config.k_steps else [None] * len(levels)
    if len(levels) == 1 and len(steps) > 1:
        levels = levels * len(steps)
    if len(steps) != len(levels):
        raise ValueError("k_steps must match the number of levels")
    for s in config.s_values:
        spec, triple = make_problem(config.problem, s, config.mu, config.a, config.b, config.T)
        sols, recs = [], []
        for lev, (h, ks) in enumerate(zip(levels, steps)):
            try:
                sol, rec = solve_level(config, s, spec, h, ks)
                rec.level = lev
                if triple is not None:
                    t1 = time.perf_counter()
                    rec.err_state_l2q = _stage("errors", l2q_error, triple.state, sol.U, sol.mesh)
                    rec.err_control_l2q = _stage("errors", l2q_error, triple.control, sol.Z)
                    rec.walltime_s += time.perf_counter() - t1
            except StageError as err:
                sol = None
                rec = ConvergenceRecord(s=s, level=lev, h=h, tau=1.0, n_dofs=0, status=f"failed at {err}")
            sols.append(sol)
            recs.append(rec)
            if log:
                log(f"s={s} level={lev} h={h:.4g} tau={rec.tau:.4g} dofs={rec.n_dofs} "
                    f"state={rec.err_state_l2q:.3e} control={rec.err_control_l2q:.3e} "
                    f"iters={rec.iterations} time={rec.walltime_s:.1f}s {rec.status}")
        ok = [i for i, sol in enumerate(sols) if sol is not None]
        if ok:
            ref = sols[ok[-1]]
            for i in ok[:-1]:
                sol, rec = sols[i], recs[i]
                try:
                    rec.err_state_energy = _stage("errors", energy_error, ref.K, ref.mesh, ref.U,
                                                  sol.mesh, sol.U)
                    if triple is None:
                        rec.err_state_l2q = _stage("errors", l2q_error,
                                                   DiscreteField.wrap(ref.U, ref.mesh), sol.U, sol.mesh)
                        rec.err_control_l2q = _stage("errors", l2q_error,
                                                     DiscreteField.wrap(ref.Z), sol.Z)
                except StageError as err:
                    rec.status = f"failed at {err}"
            if triple is None and len(ok) > 1:
                recs[ok[-1]].status = "reference"
        result.records.extend(recs)
        _fill_rates(result, s)
    return result


def _fill_rates(result, s):
    recs = [r for r in result.by_s(s) if r.status == "ok"]
    vary_h = len({r.h for r in recs}) > 1
    for q, attr in (("err_state_l2q", "eoc_state"), ("err_control_l2q", "eoc_control")):
        good = [r for r in recs if np.isfinite(getattr(r, q))]
        if len(good) < 2:
            continue
        xs = [r.h if vary_h else r.tau for r in good]
        for r, rate in zip(good[1:], eoc([getattr(r, q) for r in good], xs)):
            setattr(r, attr, rate)
