"""Porosity-weighted drift-diffusion flow ``d_t s = div(K omega grad(s / omega))``.

Equivalently ``d_t s = div(K grad s - s K grad log omega)`` with no-flux
boundary.  It is the gradient flow of the relative entropy ``H_omega``;
``omega`` is stationary and summing over phases shows that saturated
states stay saturated.

The discretisation is a two-point flux in the symmetric form

    flux_ab = T_ab omega_ab (u_b / omega_b - u_a / omega_a),

where ``u`` are densities, ``T_ab`` the transmissibility of the axis face
and ``omega_ab`` the logarithmic mean porosity.  The resulting generator
is a reversible Markov generator with stationary vector ``omega``, so an
implicit Euler step is an M-matrix solve that conserves mass, keeps
nonnegativity and decreases ``H_omega``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import Medium


class AuxFlowError(RuntimeError):
    pass


def _log_mean(x, y):
    out = np.array(x, dtype=float)
    diff = np.abs(x - y) > 1e-12 * np.maximum(x, y)
    out[diff] = (x[diff] - y[diff]) / (np.log(x[diff]) - np.log(y[diff]))
    return out


def generator(medium: Medium) -> sp.csr_matrix:
    """Sparse generator ``Q`` acting on cell masses: ``d m / dt = Q m``.

    Columns sum to zero (mass conservation) and ``Q (omega vol) = 0``.
    """
    grid = medium.grid
    n = grid.cell_count
    a, b = grid.axis_edges.T
    h = grid.spacing[grid.axis_of_edge]
    vol = grid.cell_volume
    face_area = vol / h
    trans = medium.face_permeability() * face_area / h
    om = medium.porosity
    w = trans * _log_mean(om[a], om[b])
    # d m_a/dt += w (m_b/(om_b vol) - m_a/(om_a vol)), and the reverse for b
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate([w / (om[b] * vol), w / (om[a] * vol),
                           -w / (om[a] * vol), -w / (om[b] * vol)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=32)
def _factor(medium_id: int, medium: Medium, dt: float):
    Q = generator(medium)
    n = Q.shape[0]
    return splu(sp.csc_matrix(sp.identity(n) - dt * Q))


def aux_step(s_i: np.ndarray, medium: Medium, delta: float, substeps: int = 1) -> np.ndarray:
    """Advance cell masses by time ``delta`` with ``substeps`` implicit Euler steps.

    Parameters
    ----------
    s_i : ndarray, shape (n,) or (k, n)
        Nonnegative cell masses; several phases can be advanced at once.
    delta : float
        Total flow time (``0`` returns a copy).
    substeps : int

    Returns
    -------
    ndarray
        Same shape as ``s_i``.
    """
    s = np.array(s_i, dtype=float)
    if delta < 0 or substeps < 1:
        raise ValueError("delta must be >= 0 and substeps >= 1")
    if np.any(s < 0):
        raise ValueError("aux_step expects nonnegative masses")
    if delta == 0:
        return s
    try:
        lu = _factor(id(medium), medium, float(delta) / substeps)
    except RuntimeError as exc:
        raise AuxFlowError(f"linear solve failed: {exc}") from exc
    out = s.T if s.ndim == 2 else s
    for _ in range(substeps):
        out = lu.solve(np.ascontiguousarray(out))
    out = np.clip(out, 0.0, None)
    return out.T if s.ndim == 2 else out


def regularize_positive(
    s: np.ndarray,
    medium: Medium,
    delta: float | None = None,
    floor: float = 1e-8,
    growth: float = 2.0,
    max_delta: float = 1e3,
):
    """Make every phase strictly positive by a short auxiliary flow.

    All phases are advanced with the same ``delta``, so per-cell saturation
    is preserved.  ``delta`` starts at the given value (or a tenth of the
    squared cell size) and grows geometrically until every density is at
    least ``floor * omega``.

    Returns
    -------
    s_new : ndarray
    delta_used : float
        ``0`` when ``s`` already satisfied the floor.
    """
    s = np.asarray(s, dtype=float)
    cap = medium.pore_volume
    if np.all(s >= floor * cap[None, :]):
        return s.copy(), 0.0
    d = 0.1 * float(np.min(medium.grid.spacing)) ** 2 if delta is None else float(delta)
    while d <= max_delta:
        out = aux_step(s, medium, d)
        if np.all(out >= floor * cap[None, :]):
            # restore saturation exactly against round-off of the solve
            out *= cap[None, :] / out.sum(axis=0)[None, :]
            return out, d
        d *= growth
    raise AuxFlowError(f"floor {floor} not reached with delta <= {max_delta}")
