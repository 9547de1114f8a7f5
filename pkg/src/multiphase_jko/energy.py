"""Capillary energy, total energy and relative entropy of phase fields.

A phase field ``s`` is an array of shape ``(N+1, n)`` holding cell masses;
densities are ``s / cell_volume`` and the capillary variables are the
densities of phases ``1..N``.  The built-in capillary model is cellwise
quadratic,

    Pi(s*, x) = 1/2 s*^T A(x) s* + b(x) . s*,    pi = A s* + b,

with ``phi = A^{-1}(z - b)`` its exact inverse.  Any object exposing the
same methods (``potential``, ``pressure``, ``inverse``, ``varpi_lower``,
``varpi_upper``) can stand in for :class:`CapillaryModel`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import Medium


class InfiniteEnergy(ValueError):
    """The state leaves the saturation set, where the energy is +infinity."""


class CapillaryModel:
    """Cellwise quadratic capillary potential.

    Parameters
    ----------
    A : array_like, shape (n, N, N)
        Symmetric positive-definite matrices (or ``(N, N)`` to share one).
    b : array_like, shape (n, N), optional
        Linear offsets; zero by default.
    n_cells : int, optional
        Needed when ``A`` is shared.
    allow_degenerate : bool
        Accept ``A = 0`` (no capillarity).  The inverse map is then unavailable.
    """

    def __init__(self, A, b=None, n_cells: int | None = None, allow_degenerate: bool = False):
        A = np.asarray(A, dtype=float)
        if A.ndim == 2:
            if n_cells is None:
                raise ValueError("n_cells is required with a shared matrix")
            A = np.broadcast_to(A, (n_cells,) + A.shape)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError(f"A must have shape (n, N, N), got {A.shape}")
        self.A = np.array(A)
        n, N = A.shape[0], A.shape[1]
        self.b = np.zeros((n, N)) if b is None else np.array(np.broadcast_to(b, (n, N)), dtype=float)
        if not np.allclose(self.A, np.swapaxes(self.A, 1, 2), rtol=1e-12, atol=1e-14):
            raise ValueError("capillary matrices must be symmetric")
        if N:
            eig = np.linalg.eigvalsh(self.A)
            self.varpi_lower = float(eig[:, 0].min())
            self.varpi_upper = float(eig[:, -1].max())
        else:
            self.varpi_lower = self.varpi_upper = 0.0
        self.degenerate = N > 0 and self.varpi_lower <= 0
        if self.degenerate and not allow_degenerate:
            raise ValueError("capillary matrices must be positive definite")
        self._Ainv = None if (self.degenerate or N == 0) else np.linalg.inv(self.A)

    @classmethod
    def scaled_identity(cls, n_cells: int, n_capillary: int, strength: float, b=None):
        return cls(strength * np.eye(n_capillary), b=b, n_cells=n_cells,
                   allow_degenerate=strength == 0.0)

    @classmethod
    def zero(cls, n_cells: int, n_capillary: int):
        """No capillarity; used to isolate the transport and potential terms."""
        return cls(np.zeros((n_capillary, n_capillary)), n_cells=n_cells, allow_degenerate=True)

    @property
    def n_cells(self) -> int:
        return self.A.shape[0]

    @property
    def n_capillary(self) -> int:
        return self.A.shape[1]

    def potential(self, dens_star: np.ndarray) -> np.ndarray:
        """``Pi`` per cell for capillary densities of shape ``(N, n)``."""
        As = np.einsum("xij,jx->ix", self.A, dens_star)
        return 0.5 * np.einsum("ix,ix->x", dens_star, As) + np.einsum("xi,ix->x", self.b, dens_star)

    def pressure(self, dens_star: np.ndarray) -> np.ndarray:
        """Capillary pressures ``pi_1..pi_N`` of shape ``(N, n)``."""
        return np.einsum("xij,jx->ix", self.A, dens_star) + self.b.T

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Densities whose capillary pressures equal ``z`` (shape ``(N, n)``)."""
        if self._Ainv is None:
            raise ValueError("degenerate capillary model has no inverse")
        return np.einsum("xij,jx->ix", self._Ainv, z - self.b.T)

    def quadratic_form(self, delta_star: np.ndarray) -> np.ndarray:
        """``delta*^T A delta*`` per cell (curvature of ``Pi`` along a direction)."""
        return np.einsum("ix,xij,jx->x", delta_star, self.A, delta_star)


def capillary_pi(model: CapillaryModel, s_star, cell: int, omega: float | None = None,
                 tol: float = 1e-12) -> np.ndarray:
    """Capillary pressures at one cell for densities ``s_star`` (length N).

    ``s_star`` must lie in ``{s* >= 0, sum s* <= omega}`` up to ``tol``.
    """
    s_star = np.asarray(s_star, dtype=float).reshape(-1)
    if np.any(s_star < -tol) or (omega is not None and s_star.sum() > omega + tol):
        raise InfiniteEnergy(f"densities {s_star} outside the admissible simplex at cell {cell}")
    return model.A[cell] @ s_star + model.b[cell]


def capillary_phi(model: CapillaryModel, z, cell: int, omega: float | None = None,
                  tol: float = 1e-12):
    """Inverse of :func:`capillary_pi` at one cell.

    Returns
    -------
    s_star : ndarray
        Exact preimage of ``z``.
    outside : bool
        True when the preimage leaves the admissible simplex (the value is
        not projected; callers decide).
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    s_star = np.linalg.solve(model.A[cell], z - model.b[cell])
    outside = bool(np.any(s_star < -tol) or (omega is not None and s_star.sum() > omega + tol))
    return s_star, outside


def densities(s: np.ndarray, medium: Medium) -> np.ndarray:
    return np.asarray(s, dtype=float) / medium.grid.cell_volume


def check_admissible(s: np.ndarray, medium: Medium, masses=None, tol: float = 1e-9) -> None:
    """Raise :class:`InfiniteEnergy` unless ``s`` is saturated and nonnegative.

    ``tol`` is relative to the total pore volume; with ``masses`` the
    per-phase totals are checked too.
    """
    s = np.asarray(s, dtype=float)
    cap = medium.pore_volume
    if s.shape != (medium.phase_count, cap.size):
        raise ValueError(f"phase field has shape {s.shape}, expected {(medium.phase_count, cap.size)}")
    scale = tol * cap.sum()
    if np.any(s < -scale):
        raise InfiniteEnergy(f"negative mass {s.min():.3e}")
    drift = np.abs(s.sum(axis=0) - cap).max()
    if drift > scale:
        raise InfiniteEnergy(f"saturation violated by {drift:.3e}")
    if masses is not None:
        err = np.abs(s.sum(axis=1) - np.asarray(masses)).max()
        if err > scale:
            raise InfiniteEnergy(f"phase masses off by {err:.3e}")


def capillary_pressure_field(model: CapillaryModel, s: np.ndarray, medium: Medium) -> np.ndarray:
    """``pi_i(s*, x)`` for all phases with the convention ``pi_0 = 0``; shape ``(N+1, n)``."""
    d = densities(s, medium)
    out = np.zeros_like(d)
    if model.n_capillary:
        out[1:] = model.pressure(d[1:])
    return out


def total_energy(model: CapillaryModel, medium: Medium, s: np.ndarray, check: bool = True) -> float:
    """Raw energy ``sum_x [Pi(s*, x) + s(x) . Psi(x)] vol``.

    ``s . Psi`` uses densities, so the exterior term is simply
    ``sum_i sum_x s_i(x) Psi_i(x)`` in mass units.
    """
    s = np.asarray(s, dtype=float)
    if check:
        check_admissible(s, medium)
    vol = medium.grid.cell_volume
    d = s / vol
    capillary = model.potential(d[1:]).sum() * vol if model.n_capillary else 0.0
    return float(capillary + np.sum(s * medium.potential))


def energy_gradient(model: CapillaryModel, medium: Medium, s: np.ndarray) -> np.ndarray:
    """Derivative of :func:`total_energy` w.r.t. the cell masses: ``pi_i + Psi_i``."""
    return capillary_pressure_field(model, s, medium) + medium.potential


def energy_floor(model: CapillaryModel, medium: Medium) -> float:
    """Lower bound for the energy on saturated states (masses unconstrained).

    Each cell minimises ``Pi + s . Psi`` over its simplex exactly by active-set
    enumeration (the number of phases is small).  Subtracting this value
    gives the nonnegative normalised energy used in the a-priori bounds.
    """
    vol = medium.grid.cell_volume
    omega = medium.porosity
    psi = medium.potential
    n_ph, n = psi.shape
    N = n_ph - 1
    if N == 0:
        return float(np.sum(omega * psi[0]) * vol)
    # per cell: min over z >= 0, sum z <= omega of 1/2 z'Az + c'z + omega psi_0
    # with c = b + psi_star - psi_0 (densities)
    c = model.b.T + psi[1:] - psi[0][None, :]
    best = np.full(n, np.inf)
    for free in itertools.chain.from_iterable(
            itertools.combinations(range(N), k) for k in range(N + 1)):
        free = list(free)
        for full in (False, True):
            z = np.zeros((N, n))
            if free:
                A = model.A[:, free][:, :, free]
                cf = c[free].T
                if full:
                    # KKT with sum over free = omega: [A 1; 1' 0]
                    k = len(free)
                    M = np.zeros((n, k + 1, k + 1))
                    M[:, :k, :k] = A
                    M[:, :k, k] = 1.0
                    M[:, k, :k] = 1.0
                    rhs = np.concatenate([-cf, omega[:, None]], axis=1)
                    sol = _batched_solve(M, rhs)
                    if sol is None:
                        continue
                    z[free] = sol[:, :k].T
                else:
                    sol = _batched_solve(A, -cf)
                    if sol is None:
                        continue
                    z[free] = sol.T
            elif full:
                continue
            ok = np.all(z >= -1e-12, axis=0) & (z.sum(axis=0) <= omega * (1 + 1e-12))
            z = np.clip(z, 0.0, None)
            val = 0.5 * np.einsum("ix,xij,jx->x", z, model.A, z) + np.einsum("ix,ix->x", c, z)
            best = np.where(ok, np.minimum(best, val), best)
    # vertices of the simplex are always candidates (covers degenerate A)
    for i in range(N):
        z = np.zeros((N, n))
        z[i] = omega
        val = 0.5 * np.einsum("ix,xij,jx->x", z, model.A, z) + np.einsum("ix,ix->x", c, z)
        best = np.minimum(best, val)
    best = np.minimum(best, 0.0)  # z = 0
    return float(np.sum(best + omega * psi[0]) * vol)


def _batched_solve(M, rhs):
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return None


def relative_entropy(s_i: np.ndarray, medium: Medium, tol: float = 1e-9) -> float:
    """``H_omega(s) = sum_x u log(u / omega) vol`` with densities ``u`` and ``0 log 0 = 0``.

    Lies in ``[-|omega|_1 / e, 0]`` for ``0 <= u <= omega``.
    """
    vol = medium.grid.cell_volume
    u = np.asarray(s_i, dtype=float) / vol
    omega = medium.porosity
    if np.any(u < -tol * omega) or np.any(u > omega * (1 + tol)):
        raise InfiniteEnergy("density outside [0, omega]")
    u = np.clip(u, 0.0, omega)
    pos = u > 0
    return float(np.sum(u[pos] * np.log(u[pos] / omega[pos])) * vol)


@dataclass
class EnergyReport:
    raw: float
    normalized: float
    relative_to_initial: float


def energy_report(value: float, floor: float, initial: float) -> EnergyReport:
    """Raw energy, energy above the floor, and energy relative to the initial state."""
    return EnergyReport(value, value - floor, value - initial)


def read_capillary_csv(path, n_cells: int) -> CapillaryModel:
    """Load per-cell matrices from CSV with columns ``cell, a_i_j`` (1-based) and optional ``b_i``."""
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.lstrip().startswith("#")))
    if len(rows) != n_cells:
        raise ValueError(f"{path}: {len(rows)} rows for {n_cells} cells")
    N = int(round(np.sqrt(sum(1 for c in rows[0] if c.startswith("a_")))))
    A = np.zeros((n_cells, N, N))
    b = np.zeros((n_cells, N))
    for row in rows:
        x = int(row["cell"])
        for i in range(N):
            for j in range(N):
                A[x, i, j] = float(row[f"a_{i + 1}_{j + 1}"])
            b[x, i] = float(row.get(f"b_{i + 1}") or 0.0)
    return CapillaryModel(A, b)
