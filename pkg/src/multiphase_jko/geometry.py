"""Cartesian grids, porous-medium descriptions and geodesic ground costs.

Measures live on a uniform cell-centred grid in one or two dimensions and
are represented by cell masses (density times cell volume).  Each phase
moves in the Riemannian metric ``g_i = mu_i K^{-1}``; distances between
cell centres are shortest paths on the neighbour graph with metric-weighted
edges (8-neighbour stencil in 2-D).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra


class GeometryError(ValueError):
    """Raised for invalid grids or media."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform cell-centred Cartesian grid on a box.

    Cells are numbered in C order over ``shape``; in 2-D the flat index of
    cell ``(i, j)`` is ``i * shape[1] + j`` with ``i`` counting along x.

    Attributes
    ----------
    shape : tuple of int
        Cells per axis.
    lower, upper : ndarray
        Box corners.
    centers : ndarray, shape (n, dim)
        Cell-centre coordinates.
    edges : ndarray, shape (E, 2)
        Neighbour pairs ``a < b`` of the stencil (axis and diagonal).
    axis_edges : ndarray, shape (Ea, 2)
        Axis-aligned neighbour pairs only, used by finite-volume operators.
    axis_of_edge : ndarray, shape (Ea,)
        Axis index of each axis edge.
    """

    shape: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    centers: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    axis_edges: np.ndarray = field(repr=False)
    axis_of_edge: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.shape, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def edge_vectors(self) -> np.ndarray:
        return self.centers[self.edges[:, 1]] - self.centers[self.edges[:, 0]]

    @property
    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.edge_vectors, axis=1)

    @property
    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.centers[self.edges[:, 0]] + self.centers[self.edges[:, 1]])

    @cached_property
    def reference_cost(self) -> np.ndarray:
        """Squared Euclidean distances ``|x - y|^2`` between cell centres."""
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        return np.einsum("xyk,xyk->xy", diff, diff)

    @cached_property
    def stretch(self) -> float:
        """Worst ratio of graph path length to straight-line distance.

        This is the inflation of shortest paths confined to the stencil
        relative to Euclidean segments; for square cells and the 8-neighbour
        stencil it is at most ``sqrt(4 - 2 sqrt 2) ~ 1.0824``.  It is 1 in 1-D.
        """
        if self.cell_count == 1:
            return 1.0
        graph = _edge_graph(self.cell_count, self.edges, self.edge_lengths)
        path = dijkstra(graph, directed=False)
        euclid = np.sqrt(self.reference_cost)
        off = ~np.eye(self.cell_count, dtype=bool)
        return float(np.max(path[off] / euclid[off]))

    def boundary_distance(self) -> np.ndarray:
        """Distance from each cell centre to the nearest box face."""
        lo = self.centers - self.lower
        hi = self.upper - self.centers
        return np.minimum(lo, hi).min(axis=1)

    def index(self, *ijk: int) -> int:
        return int(np.ravel_multi_index(ijk, self.shape))


def build_grid(
    cells: int | Sequence[int],
    extent: float | Sequence[float] = 1.0,
    lower: float | Sequence[float] = 0.0,
) -> Grid:
    """Build a uniform cell-centred grid on ``[lower, lower + extent]``.

    Parameters
    ----------
    cells : int or sequence of int
        Number of cells per axis (one or two axes).
    extent : float or sequence of float
        Box side lengths.
    lower : float or sequence of float
        Lower box corner.

    Examples
    --------
    >>> g = build_grid(4)
    >>> g.centers[:, 0]
    array([0.125, 0.375, 0.625, 0.875])
    >>> g.cell_volume
    0.25
    """
    shape = tuple(int(c) for c in np.atleast_1d(cells))
    dim = len(shape)
    if dim not in (1, 2):
        raise GeometryError(f"only 1-D and 2-D grids are supported, got dim={dim}")
    if any(c <= 0 for c in shape):
        raise GeometryError(f"cell counts must be positive, got {shape}")
    ext = np.broadcast_to(np.asarray(extent, dtype=float), (dim,)).copy()
    low = np.broadcast_to(np.asarray(lower, dtype=float), (dim,)).copy()
    if np.any(~np.isfinite(ext)) or np.any(ext <= 0):
        raise GeometryError(f"box extents must be positive, got {ext}")
    h = ext / np.asarray(shape, dtype=float)
    axes = [low[k] + h[k] * (np.arange(shape[k]) + 0.5) for k in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)

    ids = np.arange(int(np.prod(shape))).reshape(shape)
    axis_pairs, axis_ids = [], []
    for k in range(dim):
        a = np.take(ids, np.arange(shape[k] - 1), axis=k).ravel()
        b = np.take(ids, np.arange(1, shape[k]), axis=k).ravel()
        axis_pairs.append(np.stack([a, b], axis=1))
        axis_ids.append(np.full(a.size, k))
    axis_edges = np.concatenate(axis_pairs).astype(np.int64)
    axis_of_edge = np.concatenate(axis_ids).astype(np.int64)
    edges = [axis_edges]
    if dim == 2:
        nx, ny = shape
        edges.append(np.stack([ids[:-1, :-1].ravel(), ids[1:, 1:].ravel()], axis=1))
        edges.append(np.stack([ids[:-1, 1:].ravel(), ids[1:, :-1].ravel()], axis=1))
    all_edges = np.concatenate(edges).astype(np.int64).reshape(-1, 2)
    all_edges = np.sort(all_edges, axis=1)
    return Grid(shape, low, low + ext, centers, all_edges, axis_edges, axis_of_edge)


def _edge_graph(n: int, edges: np.ndarray, weights: np.ndarray) -> csr_matrix:
    return csr_matrix((weights, (edges[:, 0], edges[:, 1])), shape=(n, n))


@dataclass(frozen=True, eq=False)
class Medium:
    """Porous medium and phase data on a grid.

    Attributes
    ----------
    grid : Grid
    porosity : ndarray, shape (n,)
        ``omega(x)`` in ``(0, 1]``; ``1`` describes a rock-free cell.
    permeability : ndarray, shape (n, dim, dim)
        Symmetric positive-definite tensors ``K(x)``.
    viscosity : ndarray, shape (N+1,)
    potential : ndarray, shape (N+1, n)
        Exterior potentials ``Psi_i(x)``, e.g. gravity ``rho_i g z``.
    kappa_lower, kappa_upper : float
        Ellipticity bounds of ``K``; computed from the tensors when not given.
    """

    grid: Grid
    porosity: np.ndarray
    permeability: np.ndarray
    viscosity: np.ndarray
    potential: np.ndarray
    kappa_lower: float | None = None
    kappa_upper: float | None = None

    def __post_init__(self):
        n, dim = self.grid.cell_count, self.grid.dim
        omega = np.asarray(self.porosity, dtype=float).reshape(-1)
        if omega.shape != (n,):
            raise GeometryError(f"porosity must have {n} entries")
        if np.any(omega <= 0) or np.any(omega > 1) or not np.all(np.isfinite(omega)):
            raise GeometryError("porosity must lie in (0, 1]")
        K = np.asarray(self.permeability, dtype=float)
        if K.ndim <= 1:
            K = np.broadcast_to(K.reshape(-1, 1, 1), (n, 1, 1)) * np.eye(dim)
        K = np.array(np.broadcast_to(K, (n, dim, dim)), dtype=float)
        if not np.allclose(K, np.swapaxes(K, 1, 2), rtol=1e-12, atol=0):
            raise GeometryError("permeability tensors must be symmetric")
        eig = np.linalg.eigvalsh(K)
        if not np.all(np.isfinite(eig)) or np.any(eig[:, 0] <= 0):
            bad = np.flatnonzero(~(eig[:, 0] > 0))
            raise GeometryError(f"permeability not positive definite at cells {bad.tolist()}")
        mu = np.atleast_1d(np.asarray(self.viscosity, dtype=float))
        if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
            raise GeometryError("viscosities must be positive")
        psi = np.array(np.broadcast_to(np.asarray(self.potential, dtype=float), (mu.size, n)))
        if not np.all(np.isfinite(psi)):
            raise GeometryError("potentials must be finite")
        lo = float(eig[:, 0].min()) if self.kappa_lower is None else float(self.kappa_lower)
        hi = float(eig[:, -1].max()) if self.kappa_upper is None else float(self.kappa_upper)
        if lo > eig[:, 0].min() * (1 + 1e-12) or hi < eig[:, -1].max() * (1 - 1e-12):
            raise GeometryError("supplied ellipticity bounds do not enclose the tensor spectrum")
        for name, value in (("porosity", omega), ("permeability", K), ("viscosity", mu),
                            ("potential", psi), ("kappa_lower", lo), ("kappa_upper", hi)):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def phase_count(self) -> int:
        return self.viscosity.size

    @property
    def pore_volume(self) -> np.ndarray:
        """Cell capacities ``omega(x) * cell_volume`` in mass units."""
        return self.porosity * self.grid.cell_volume

    @property
    def is_isotropic(self) -> bool:
        K = self.permeability
        iso = K[:, 0, 0][:, None, None] * np.eye(self.grid.dim)
        return bool(np.allclose(K, iso, rtol=1e-14, atol=0))

    @property
    def is_homogeneous(self) -> bool:
        return bool(np.all(self.permeability == self.permeability[0]))

    @property
    def kappa(self) -> np.ndarray:
        """Scalar permeability in isotropic mode."""
        if not self.is_isotropic:
            raise GeometryError("medium is anisotropic; no scalar permeability")
        return self.permeability[:, 0, 0]

    def face_permeability(self) -> np.ndarray:
        """Normal permeability on each axis edge (harmonic mean of the two cells)."""
        a, b = self.grid.axis_edges.T
        ax = self.grid.axis_of_edge
        ka = self.permeability[a, ax, ax]
        kb = self.permeability[b, ax, ax]
        return 2.0 * ka * kb / (ka + kb)

    def with_potential(self, potential: np.ndarray) -> "Medium":
        return Medium(self.grid, self.porosity, self.permeability, self.viscosity, potential,
                      self.kappa_lower, self.kappa_upper)


def isotropic_medium(grid: Grid, porosity, kappa, viscosity, potential=0.0) -> Medium:
    """Medium with scalar permeability ``K = kappa I``; scalars are broadcast."""
    n = grid.cell_count
    mu = np.atleast_1d(np.asarray(viscosity, dtype=float))
    omega = np.broadcast_to(np.asarray(porosity, dtype=float), (n,))
    kap = np.broadcast_to(np.asarray(kappa, dtype=float), (n,))
    K = kap[:, None, None] * np.eye(grid.dim)
    psi = np.broadcast_to(np.asarray(potential, dtype=float), (mu.size, n))
    return Medium(grid, omega, K, mu, psi)


def gravity_potential(grid: Grid, densities, gravity: float = 1.0) -> np.ndarray:
    """Potentials ``Psi_i = rho_i g z`` with ``z`` the last coordinate (pointing up)."""
    rho = np.atleast_1d(np.asarray(densities, dtype=float))
    z = grid.centers[:, -1]
    return rho[:, None] * gravity * z[None, :]


def gravity_column(
    cells: int = 32,
    height: float = 1.0,
    densities=(1.0, 2.0),
    viscosity=(1.0, 2.0),
    porosity: float = 0.5,
    kappa: float = 1.0,
    gravity: float = 1.0,
) -> Medium:
    """Vertical 1-D column with buoyancy potentials; phase densities ``densities``."""
    grid = build_grid(cells, height)
    psi = gravity_potential(grid, densities, gravity)
    return isotropic_medium(grid, porosity, kappa, viscosity, psi)


def random_heterogeneous_medium(
    grid: Grid,
    viscosity,
    kappa_range=(1.0, 4.0),
    porosity_range=(0.3, 0.6),
    anisotropic: bool = False,
    seed: int | None = 0,
    potential=0.0,
) -> Medium:
    """Cellwise random permeability with eigenvalues inside ``kappa_range``.

    The ellipticity bounds are fixed to ``kappa_range`` so that they are the
    documented constants rather than the realised extremes.
    """
    rng = np.random.default_rng(seed)
    n, dim = grid.cell_count, grid.dim
    lo, hi = kappa_range
    omega = rng.uniform(*porosity_range, size=n)
    if anisotropic and dim == 2:
        lam = rng.uniform(lo, hi, size=(n, 2))
        theta = rng.uniform(0, np.pi, size=n)
        c, s = np.cos(theta), np.sin(theta)
        R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)
        K = np.einsum("nij,nj,nkj->nik", R, lam, R)
        K = 0.5 * (K + np.swapaxes(K, 1, 2))
    else:
        K = rng.uniform(lo, hi, size=n)[:, None, None] * np.eye(dim)
    mu = np.atleast_1d(np.asarray(viscosity, dtype=float))
    psi = np.broadcast_to(np.asarray(potential, dtype=float), (mu.size, n))
    return Medium(grid, omega, K, mu, psi, kappa_lower=lo, kappa_upper=hi)


def edge_metric_lengths(medium: Medium, phase: int) -> np.ndarray:
    """Length of each stencil edge in the metric ``mu_i K^{-1}``.

    The metric is sampled at the two endpoint cells and averaged, i.e. the
    straight edge is split at its midpoint and each half uses its own cell's
    tensor.
    """
    grid = medium.grid
    delta = grid.edge_vectors
    Kinv = np.linalg.inv(medium.permeability)
    mu = medium.viscosity[phase]
    a, b = grid.edges.T
    qa = np.einsum("ek,ekl,el->e", delta, Kinv[a], delta)
    qb = np.einsum("ek,ekl,el->e", delta, Kinv[b], delta)
    return 0.5 * (np.sqrt(mu * qa) + np.sqrt(mu * qb))


def geodesic_cost_matrix(medium: Medium, phase: int) -> np.ndarray:
    """Squared geodesic distances ``d_i(x, y)^2`` between all cell centres.

    For a spatially constant tensor the geodesics are straight segments and
    the closed form ``mu_i (y - x)^T K^{-1} (y - x)`` is used; otherwise
    Dijkstra runs on the stencil graph with :func:`edge_metric_lengths`.

    Returns
    -------
    ndarray, shape (n, n)
        Symmetric, zero diagonal, positive off the diagonal.
    """
    grid = medium.grid
    n = grid.cell_count
    if not 0 <= phase < medium.phase_count:
        raise GeometryError(f"phase {phase} out of range")
    mu = medium.viscosity[phase]
    if medium.is_homogeneous:
        Kinv = np.linalg.inv(medium.permeability[0])
        diff = grid.centers[:, None, :] - grid.centers[None, :, :]
        C = mu * np.einsum("xyk,kl,xyl->xy", diff, Kinv, diff)
    else:
        graph = _edge_graph(n, grid.edges, edge_metric_lengths(medium, phase))
        if connected_components(graph, directed=False)[0] != 1:
            raise GeometryError("neighbour graph is disconnected")
        dist = dijkstra(graph, directed=False)
        C = dist * dist
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 0.0)
    return C


@dataclass(frozen=True, eq=False)
class CostBundle:
    """Per-phase squared geodesic costs plus the Euclidean reference cost."""

    phase_costs: tuple[np.ndarray, ...]
    reference: np.ndarray
    stretch: float

    @property
    def phase_count(self) -> int:
        return len(self.phase_costs)

    def __getitem__(self, phase: int) -> np.ndarray:
        return self.phase_costs[phase]


def build_costs(medium: Medium) -> CostBundle:
    costs = tuple(geodesic_cost_matrix(medium, i) for i in range(medium.phase_count))
    for C in costs:
        C.setflags(write=False)
    stretch = 1.0 if medium.is_homogeneous else medium.grid.stretch
    return CostBundle(costs, medium.grid.reference_cost, stretch)


@dataclass
class ConvexityReport:
    """Outcome of the boundary monotonicity test for a scalar permeability."""

    passed: bool
    offending_cells: list[int]
    checked_cells: int
    notes: str = ""

    def __str__(self) -> str:
        status = "pass" if self.passed else "fail"
        return f"convexity {status}: {len(self.offending_cells)} offending of {self.checked_cells} checked"


def check_geodesic_convexity_isotropic(
    medium: Medium, boundary_layer: float | None = None, tol: float = 1e-10
) -> ConvexityReport:
    """Test the boundary conditions under which the box stays geodesically convex.

    For scalar ``kappa`` the domain is convex for the metric ``kappa^{-1}``
    when (i) ``kappa`` does not increase when moving outwards in a layer
    along the boundary, and (ii) at the boundary either the outward normal
    derivative is negative or the first and second normal derivatives both
    vanish.  Normals are the axis directions of the box faces and derivatives
    are one-sided differences along grid lines; corners are checked against
    both faces.  The result is advisory.

    Parameters
    ----------
    boundary_layer : float, optional
        Width of the layer in which (i) is tested; defaults to two cells.
    tol : float
        Relative tolerance on differences, scaled by ``max(kappa)``.
    """
    if not medium.is_isotropic:
        raise GeometryError("convexity check needs an isotropic medium")
    grid = medium.grid
    kap = medium.kappa.reshape(grid.shape)
    h = grid.spacing
    width = 2.0 * float(h.max()) if boundary_layer is None else float(boundary_layer)
    scale = tol * float(np.abs(kap).max())
    bad: set[int] = set()
    checked: set[int] = set()
    ids = np.arange(grid.cell_count).reshape(grid.shape)
    for axis in range(grid.dim):
        n_ax = grid.shape[axis]
        depth = max(1, int(np.floor(width / h[axis] + 1e-9)))
        depth = min(depth, n_ax)
        for side in (0, 1):
            # line[k] = k-th cell counted inwards from this face
            order = np.arange(n_ax) if side == 0 else np.arange(n_ax)[::-1]
            line = np.take(kap, order, axis=axis)
            line_ids = np.take(ids, order, axis=axis)
            line = np.moveaxis(line, axis, 0)
            line_ids = np.moveaxis(line_ids, axis, 0)
            checked.update(line_ids[:depth].ravel().tolist())
            # (i): outward step from cell k+1 to k must not increase kappa
            for k in range(min(depth, n_ax - 1)):
                rise = line[k] - line[k + 1]
                bad.update(line_ids[k][rise > scale].ravel().tolist())
            # (ii) at the boundary cell
            if n_ax >= 2:
                d1 = line[0] - line[1]
                ok = d1 < -scale
                if n_ax >= 3:
                    d2 = line[0] - 2 * line[1] + line[2]
                    ok |= (np.abs(d1) <= scale) & (np.abs(d2) <= scale)
                else:
                    ok |= np.abs(d1) <= scale
                bad.update(line_ids[0][~ok].ravel().tolist())
    offending = sorted(bad)
    return ConvexityReport(
        passed=not offending,
        offending_cells=offending,
        checked_cells=len(checked),
        notes="axis-aligned one-sided normal differences; corners tested against each adjacent face",
    )


def read_medium_csv(path, viscosity, kappa_bounds: tuple[float, float] | None = None) -> Medium:
    """Load a medium from CSV.

    Columns: ``cell_index, x[, y], omega``, then either ``kappa`` or
    ``kxx, kxy, kyy``, then ``psi_0 .. psi_N``.  Cell centres must form a
    uniform Cartesian grid; rows may come in any order.  Lines starting
    with ``#`` are ignored.
    """
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.lstrip().startswith("#")))
    if not rows:
        raise GeometryError(f"{path}: no cells")
    cols = rows[0].keys()
    dim = 2 if "y" in cols else 1
    axes = ["x", "y"][:dim]
    coords = np.array([[float(r[a]) for a in axes] for r in rows])
    shape, lower, extent = [], [], []
    for k in range(dim):
        u = np.unique(coords[:, k])
        h = float(u[1] - u[0]) if u.size > 1 else 1.0
        if u.size > 1 and not np.allclose(np.diff(u), h, rtol=1e-9):
            raise GeometryError(f"{path}: non-uniform spacing along {axes[k]}")
        shape.append(u.size)
        lower.append(float(u[0]) - h / 2)
        extent.append(h * u.size)
    grid = build_grid(shape, extent, lower)
    mu = np.atleast_1d(np.asarray(viscosity, dtype=float))
    n = grid.cell_count
    if len(rows) != n:
        raise GeometryError(f"{path}: {len(rows)} rows for a {shape} grid")
    idx = np.array([grid.index(*[int(round((coords[r, k] - lower[k]) / (extent[k] / shape[k]) - 0.5))
                                 for k in range(dim)]) for r in range(n)])
    if np.unique(idx).size != n:
        raise GeometryError(f"{path}: duplicate cells")
    omega = np.empty(n)
    K = np.empty((n, dim, dim))
    psi = np.empty((mu.size, n))
    for r, row in zip(idx, rows):
        omega[r] = float(row["omega"])
        if "kappa" in row:
            K[r] = float(row["kappa"]) * np.eye(dim)
        elif dim == 2:
            K[r] = [[float(row["kxx"]), float(row["kxy"])], [float(row["kxy"]), float(row["kyy"])]]
        else:
            K[r] = float(row["kxx"])
        for i in range(mu.size):
            psi[i, r] = float(row.get(f"psi_{i}") or 0.0)
    lo, hi = kappa_bounds if kappa_bounds is not None else (None, None)
    return Medium(grid, omega, K, mu, psi, lo, hi)
