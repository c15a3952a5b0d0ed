"""Simplicial meshes of the interval and the disc, quasi-uniform or graded
towards the boundary.

Meshes are immutable once built.  Vertex coordinates are stored as an
``(n_vertices, dim)`` array and cells as an ``(n_cells, dim + 1)`` integer
array, positively oriented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGMA_MAX = 10.0


@dataclass(frozen=True)
class Interval:
    """The open interval ``(left, right)``."""

    left: float = -1.0
    right: float = 1.0

    dim = 1

    def __post_init__(self):
        if not self.right > self.left:
            raise ValueError(f"degenerate interval ({self.left}, {self.right})")

    @property
    def measure(self):
        return self.right - self.left

    def contains(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return (x > self.left) & (x < self.right)


@dataclass(frozen=True)
class Disc:
    """The open disc of given radius and center."""

    radius: float = 1.0
    center: tuple = (0.0, 0.0)

    dim = 2

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"degenerate disc radius {self.radius}")

    @property
    def measure(self):
        return math.pi * self.radius**2

    def contains(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.hypot(x[:, 0] - self.center[0], x[:, 1] - self.center[1])
        return r < self.radius


@dataclass(frozen=True)
class Polygon:
    """Convex polygon given by counterclockwise vertices."""

    vertices: np.ndarray = field(repr=False)

    dim = 2

    @property
    def measure(self):
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def contains(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        rel = x[:, None, :] - v[None, :, :]
        cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
        return np.all(cross > 0, axis=1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh.

    Attributes
    ----------
    vertices : ndarray, shape (n_vertices, dim)
    cells : ndarray of int, shape (n_cells, dim + 1)
    boundary : ndarray of bool, shape (n_vertices,)
        Homogeneous Dirichlet flag per vertex.
    kappa : float
        Grading exponent the mesh was built with.
    domain : Interval or Disc
    h : float
        Nominal mesh parameter (the ``target_h`` the mesh was built from).
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    kappa: float = 1.0
    domain: object = None
    h: float = float("nan")

    def __post_init__(self):
        for name in ("vertices", "cells", "boundary"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def interior(self):
        """Indices of the interior (free) vertices, in increasing order."""
        return np.flatnonzero(~self.boundary)

    @property
    def n_dofs(self):
        return int(np.count_nonzero(~self.boundary))

    def dof_map(self):
        """Vertex index -> dof index, -1 for Dirichlet vertices."""
        dm = -np.ones(self.n_vertices, dtype=int)
        dm[self.interior] = np.arange(self.n_dofs)
        return dm

    def cell_vertices(self):
        """Coordinates of every cell, shape (n_cells, dim + 1, dim)."""
        return self.vertices[self.cells]

    def cell_measures(self):
        return _measures(self.cell_vertices())

    def cell_diameters(self):
        cv = self.cell_vertices()
        n = cv.shape[1]
        d = np.zeros(self.n_cells)
        for a in range(n):
            for b in range(a + 1, n):
                d = np.maximum(d, np.linalg.norm(cv[:, a] - cv[:, b], axis=1))
        return d

    def cell_inradii(self):
        """Diameter of the largest inscribed ball of every cell."""
        cv = self.cell_vertices()
        if self.dim == 1:
            return np.abs(cv[:, 1, 0] - cv[:, 0, 0])
        a = np.linalg.norm(cv[:, 1] - cv[:, 2], axis=1)
        b = np.linalg.norm(cv[:, 0] - cv[:, 2], axis=1)
        c = np.linalg.norm(cv[:, 0] - cv[:, 1], axis=1)
        return 4.0 * _measures(cv) / (a + b + c)

    def centroids(self):
        return self.cell_vertices().mean(axis=1)

    def boundary_polygon(self):
        """Counterclockwise boundary polygon of a 2D mesh."""
        if self.dim != 2:
            raise ValueError("boundary polygon only exists for 2D meshes")
        idx = np.flatnonzero(self.boundary)
        c = self.vertices[~self.boundary].mean(axis=0) if self.n_dofs else self.vertices.mean(axis=0)
        ang = np.arctan2(self.vertices[idx, 1] - c[1], self.vertices[idx, 0] - c[0])
        return Polygon(self.vertices[idx[np.argsort(ang)]].copy())

    def boundary_cells(self):
        """Mask of cells having at least one boundary vertex."""
        return self.boundary[self.cells].any(axis=1)


@dataclass(frozen=True)
class MeshStats:
    h_max: float
    h_min: float
    n_vertices: int
    n_interior_dofs: int
    n_cells: int
    sigma: float


def _measures(cv):
    if cv.shape[2] == 1:
        return cv[:, 1, 0] - cv[:, 0, 0]
    e1 = cv[:, 1] - cv[:, 0]
    e2 = cv[:, 2] - cv[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def mesh_stats(mesh):
    """Geometric summary of a mesh."""
    if mesh.n_cells == 0:
        raise ValueError("mesh has no cells")
    diam = mesh.cell_diameters()
    sigma = float(np.max(diam / mesh.cell_inradii())) if mesh.dim == 2 else 1.0
    return MeshStats(
        h_max=float(diam.max()),
        h_min=float(diam.min()),
        n_vertices=mesh.n_vertices,
        n_interior_dofs=mesh.n_dofs,
        n_cells=mesh.n_cells,
        sigma=sigma,
    )


def graded_points(n, kappa):
    """``n + 1`` points of [-1, 1], symmetric, graded as ``(i/n)**kappa``
    towards both endpoints.  ``n`` must be even when ``kappa > 1``."""
    if kappa == 1.0:
        return np.linspace(-1.0, 1.0, n + 1)
    half = n // 2
    t = (np.arange(half + 1) / half) ** kappa
    left = -1.0 + t
    return np.concatenate([left, -left[-2::-1]])


def build_mesh(domain, target_h, kappa=1.0, sectors=6):
    """Build a quasi-uniform (``kappa = 1``) or boundary-graded mesh.

    Parameters
    ----------
    domain : Interval or Disc
    target_h : float
        Mesh parameter ``h``.  Boundary cells of a graded mesh have size
        about ``h**kappa``.
    kappa : float in [1, 2]
    sectors : int
        Disc only: number of triangles around the center.
    """
    if not target_h > 0:
        raise ValueError(f"target_h must be positive, got {target_h}")
    if not 1.0 <= kappa <= 2.0:
        raise ValueError(f"kappa must lie in [1, 2], got {kappa}")
    if isinstance(domain, Interval):
        mesh = _interval_mesh(domain, target_h, kappa)
    elif isinstance(domain, Disc):
        mesh = _disc_mesh(domain, target_h, kappa, sectors)
    else:
        raise TypeError(f"unsupported domain {domain!r}")
    _validate(mesh)
    return mesh


def _interval_mesh(domain, h, kappa):
    # number of cells on the reference (-1, 1), rounded up to even
    n = max(2, math.ceil(round(domain.measure / h, 9)))
    if kappa > 1 and n % 2:
        n += 1
    ref = graded_points(n, kappa)
    x = domain.left + 0.5 * (ref + 1.0) * domain.measure
    x[0], x[-1] = domain.left, domain.right
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    boundary = np.zeros(n + 1, dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(x[:, None].copy(), cells, boundary, kappa, domain, float(h))


def _disc_mesh(domain, h, kappa, sectors):
    R = domain.radius
    m = max(1, math.ceil(round(R / h, 9)))
    j = np.arange(m + 1)
    radii = R * (1.0 - (1.0 - j / m) ** kappa)
    radii[-1] = R
    # kappa = 1: exactly sectors * k vertices on ring k
    if kappa == 1.0:
        counts = [1] + [sectors * k for k in range(1, m + 1)]
    else:
        counts = [1] + [max(sectors, sectors * round(2 * math.pi * radii[k]
                                                     / (sectors * _ring_spacing(radii, k))))
                        for k in range(1, m + 1)]
        # neighbouring rings may not differ too much in resolution
        for k in range(m - 1, 0, -1):
            counts[k] = max(counts[k], sectors * math.ceil(counts[k + 1] / (2 * sectors)))
        for k in range(2, m + 1):
            counts[k] = max(counts[k], sectors * math.ceil(counts[k - 1] / (2 * sectors)))

    cx, cy = domain.center
    verts = [(cx, cy)]
    rings = [np.array([0])]
    angles = [np.array([0.0])]
    for k in range(1, m + 1):
        nk = counts[k]
        th = 2.0 * math.pi * np.arange(nk) / nk
        start = len(verts)
        for t in th:
            verts.append((cx + radii[k] * math.cos(t), cy + radii[k] * math.sin(t)))
        rings.append(np.arange(start, start + nk))
        angles.append(th)
    verts = np.array(verts)
    # snap the outer ring exactly onto the circle
    outer = rings[-1]
    th = angles[-1]
    verts[outer, 0] = cx + R * np.cos(th)
    verts[outer, 1] = cy + R * np.sin(th)

    cells = []
    for k in range(1, m + 1):
        cells.extend(_stitch(rings[k - 1], rings[k], verts))
    cells = np.array(cells, dtype=int)
    boundary = np.zeros(len(verts), dtype=bool)
    boundary[outer] = True
    cells = _orient(verts, cells)
    return Mesh(verts, cells, boundary, kappa, domain, float(h))


def _ring_spacing(radii, k):
    inner = radii[k] - radii[k - 1]
    outer = radii[k + 1] - radii[k] if k + 1 < len(radii) else inner
    return 0.5 * (inner + outer)


def _stitch(inner, outer, verts):
    """Triangulate the strip between two rings, advancing along the ring
    whose next vertex gives the shorter diagonal."""
    if len(inner) == 1:
        n = len(outer)
        return [(inner[0], outer[i], outer[(i + 1) % n]) for i in range(n)]
    ni, no = len(inner), len(outer)
    tri = []
    i = o = 0
    while i < ni or o < no:
        if i == ni:
            advance_outer = True
        elif o == no:
            advance_outer = False
        else:
            d_out = np.linalg.norm(verts[inner[i]] - verts[outer[(o + 1) % no]])
            d_in = np.linalg.norm(verts[inner[(i + 1) % ni]] - verts[outer[o]])
            advance_outer = d_out <= d_in
        if advance_outer:
            tri.append((inner[i % ni], outer[o], outer[(o + 1) % no]))
            o += 1
        else:
            tri.append((inner[i], outer[o % no], inner[(i + 1) % ni]))
            i += 1
    return tri


def _orient(verts, cells):
    cv = verts[cells]
    area = _measures(cv)
    flip = area < 0
    cells = cells.copy()
    cells[flip, 1], cells[flip, 2] = cells[flip, 2], cells[flip, 1].copy()
    return cells


def _validate(mesh):
    meas = mesh.cell_measures()
    if np.any(meas <= 0):
        raise ValueError("mesh has non-positive cell measures")
    if mesh.dim == 2:
        st = mesh_stats(mesh)
        if st.sigma > SIGMA_MAX:
            raise ValueError(f"shape regularity sigma={st.sigma:.2f} exceeds {SIGMA_MAX}")


def save_mesh(mesh, path):
    """Write the plain-text mesh format (round-trips bit-exactly)."""
    lines = [f"DIM {mesh.dim}", f"VERTICES {mesh.n_vertices}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells}")
    lines += [" ".join(str(int(i)) for i in c) for c in mesh.cells]
    lines.append("BOUNDARY")
    lines += [str(int(i)) for i in np.flatnonzero(mesh.boundary)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, kappa=1.0, domain=None, h=float("nan")):
    tokens = Path(path).read_text().splitlines()
    it = iter(tokens)
    dim = int(next(it).split()[1])
    nv = int(next(it).split()[1])
    verts = np.array([[float(c) for c in next(it).split()] for _ in range(nv)]).reshape(nv, dim)
    nc = int(next(it).split()[1])
    cells = np.array([[int(c) for c in next(it).split()] for _ in range(nc)], dtype=int).reshape(nc, dim + 1)
    head = next(it)
    if head.strip() != "BOUNDARY":
        raise ValueError(f"expected BOUNDARY section, got {head!r}")
    boundary = np.zeros(nv, dtype=bool)
    for line in it:
        if line.strip():
            boundary[int(line)] = True
    return Mesh(verts, cells, boundary, kappa, domain, h)
