"""Checks of the discrete estimates along a minimizing-movement trajectory.

All checks read only what a run persists: the states, the pressures
``p`` and capillary pressures ``pi`` of every step, and the per-step
scalars ``w2``, ``fw_gap`` and ``bias_budget``.  Every discrete gradient
goes through :func:`edge_gradient`, a two-point difference on the axis
edges of the grid, so ``||grad u||^2 = sum_e ((u_b - u_a) / h_e)^2 vol``.

Distances.  ``W^2(s^n, s^{n-1})`` in the energy inequalities is the
transport term the step actually minimised (``record.w2``).  The exact
discrete distance between two consecutive states moves mass in whole
cells, so for sub-cell displacements it behaves like ``h^2 |ds|`` rather
than ``|ds|^2`` and its sum over steps does not stay bounded as
``tau -> 0``.  The Hölder check compares states that are far apart in
time and uses the exact distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy import CapillaryModel, relative_entropy, total_energy
from .geometry import CostBundle, Grid, Medium
from .transport import exact_w2


# ----------------------------------------------------------------------
# discrete calculus


def edge_gradient(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Two-point differences ``(u_b - u_a) / h_e`` on the axis edges.

    ``u`` has shape ``(n,)`` or ``(k, n)``; the result has the edge axis last.
    """
    a, b = grid.axis_edges.T
    h = grid.spacing[grid.axis_of_edge]
    u = np.asarray(u, dtype=float)
    return (u[..., b] - u[..., a]) / h


def dirichlet_norm_sq(grid: Grid, u: np.ndarray) -> np.ndarray:
    """``||grad u||^2`` with the shared stencil (per row when ``u`` is 2-D)."""
    g = edge_gradient(grid, u)
    return np.sum(g * g, axis=-1) * grid.cell_volume


def h1_norm_sq(grid: Grid, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.sum(u * u, axis=-1) * grid.cell_volume + dirichlet_norm_sq(grid, u)


def face_density(grid: Grid, s: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the two cell densities across each axis edge."""
    a, b = grid.axis_edges.T
    d = np.asarray(s, dtype=float) / grid.cell_volume
    return 0.5 * (d[..., a] + d[..., b])


def mobility_form(medium: Medium, phase: int, s_i, u, grad_v) -> float:
    """``int s_i (K / mu_i) grad u . grad v`` with ``grad v`` given per edge.

    ``grad_v`` are directional derivatives along the edge axes (for a
    test function, its analytic gradient at the edge midpoints).  Only the
    normal permeability of each face enters, as in any two-point flux.
    """
    grid = medium.grid
    k = medium.face_permeability() / medium.viscosity[phase]
    return float(np.sum(k * face_density(grid, s_i) * edge_gradient(grid, u) * grad_v)
                 * grid.cell_volume)


def dissipation_rate(medium: Medium, s: np.ndarray, h: np.ndarray) -> float:
    """``sum_i int (s_i / mu_i) K grad h_i . grad h_i`` with ``h_i = p_i + Psi_i``."""
    grid = medium.grid
    total = 0.0
    for i in range(s.shape[0]):
        g = edge_gradient(grid, h[i])
        total += mobility_form(medium, i, s[i], h[i], g)
    return total


# ----------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A smooth test function with analytic gradient.

    ``hessian_norm`` is the spectral norm of its (constant) Euclidean Hessian.
    """

    __test__ = False  # not a pytest class

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian_norm: float

    def edge_derivative(self, grid: Grid) -> np.ndarray:
        """Directional derivative along each axis edge at its midpoint."""
        g = self.gradient(_axis_midpoints(grid))
        return g[np.arange(g.shape[0]), grid.axis_of_edge]


def _axis_midpoints(grid: Grid) -> np.ndarray:
    a, b = grid.axis_edges.T
    return 0.5 * (grid.centers[a] + grid.centers[b])


def linear_tests(grid: Grid) -> list[TestFunction]:
    out = []
    for k in range(grid.dim):
        e = np.zeros(grid.dim)
        e[k] = 1.0
        out.append(TestFunction(f"x{k}", lambda x, k=k: x[:, k],
                                lambda x, e=e: np.broadcast_to(e, x.shape), 0.0))
    return out


def quadratic_tests(grid: Grid) -> list[TestFunction]:
    """``x_k^2 / 2``, ``x_k x_l`` and ``|x - c|^2 / 2`` (``c`` the box centre), all of unit Hessian norm."""
    d = grid.dim
    c = 0.5 * (grid.lower + grid.upper)
    out = []
    for k in range(d):
        def grad(x, k=k):
            g = np.zeros_like(x)
            g[:, k] = x[:, k]
            return g
        out.append(TestFunction(f"x{k}^2/2", lambda x, k=k: 0.5 * x[:, k] ** 2, grad, 1.0))
    for k in range(d):
        for m in range(k + 1, d):
            def grad(x, k=k, m=m):
                g = np.zeros_like(x)
                g[:, k] = x[:, m]
                g[:, m] = x[:, k]
                return g
            out.append(TestFunction(f"x{k}x{m}", lambda x, k=k, m=m: x[:, k] * x[:, m], grad, 1.0))
    out.append(TestFunction("|x-c|^2/2", lambda x: 0.5 * np.sum((x - c) ** 2, axis=1),
                            lambda x: x - c, 1.0))
    return out


def metric_hessian_bound(medium: Medium, phase: int, test: TestFunction) -> float:
    """Upper bound for the Hessian of ``test`` in the metric of ``phase``.

    Exact for homogeneous isotropic media (``kappa / mu_i`` times the
    Euclidean norm).  For heterogeneous media the Christoffel terms are not
    computed; the bound multiplies by ``kappa* / mu_i`` and by the contrast
    ``kappa* / kappa_*`` as a stand-in.
    """
    mu = medium.viscosity[phase]
    return test.hessian_norm * medium.kappa_upper / mu * medium.kappa_upper / medium.kappa_lower


# ----------------------------------------------------------------------
# per-step quantities


def weak_form_residuals(medium: Medium, s_prev: np.ndarray, s_new: np.ndarray, p: np.ndarray,
                        tau: float, tests: Sequence[TestFunction]) -> np.ndarray:
    """Residuals ``int (s^n - s^{n-1}) xi + tau int s^n (K/mu_i) grad(p_i + Psi_i) . grad xi``.

    Returns
    -------
    ndarray, shape (N+1, len(tests))
    """
    grid = medium.grid
    x = grid.centers
    h = np.asarray(p) + medium.potential
    out = np.zeros((s_new.shape[0], len(tests)))
    for j, t in enumerate(tests):
        xi = t.value(x)
        dxi = t.edge_derivative(grid)
        for i in range(s_new.shape[0]):
            out[i, j] = float((s_new[i] - s_prev[i]) @ xi) + tau * mobility_form(
                medium, i, s_new[i], h[i], dxi)
    return out


@dataclass
class DiagnosticsRow:
    """Per-step diagnostics; the CSV columns of ``diagnostics.csv``."""

    step: int
    energy: float
    energy_normalized: float
    w2: float
    w2_exact: float
    entropy: np.ndarray
    grad_pi_sq: float
    p_h1_sq: float
    pi_h1_sq: float
    fw_gap: float
    bias_budget: float
    capillary_residual: float
    weak_residuals: np.ndarray
    dissipation: float
    energy_rate: float

    def as_dict(self, test_names: Sequence[str]) -> dict:
        d = {"step": self.step, "energy": self.energy, "energy_normalized": self.energy_normalized,
             "w2": self.w2, "w2_exact": self.w2_exact}
        for i, v in enumerate(self.entropy):
            d[f"entropy_{i}"] = v
        d.update(grad_pi_sq=self.grad_pi_sq, p_h1_sq=self.p_h1_sq, pi_h1_sq=self.pi_h1_sq,
                 fw_gap=self.fw_gap, bias_budget=self.bias_budget,
                 capillary_residual=self.capillary_residual)
        for name, v in zip(test_names, np.max(np.abs(self.weak_residuals), axis=0)):
            d[f"weak_{name}"] = v
        d.update(dissipation=self.dissipation, energy_rate=self.energy_rate)
        return d


def capillary_residual(p: np.ndarray, pi: np.ndarray) -> float:
    """``max |(p_i - p_0) - pi_i|`` over phases ``i >= 1`` and cells."""
    p = np.asarray(p)
    if p.shape[0] == 1:
        return 0.0
    return float(np.max(np.abs((p[1:] - p[0]) - np.asarray(pi)[1:])))


def step_row(n: int, record, medium: Medium, model: CapillaryModel, floor: float,
             costs: CostBundle | None = None, tests: Sequence[TestFunction] | None = None) -> DiagnosticsRow:
    """Diagnostics of step ``n`` from its record (``costs`` enables the exact distance)."""
    grid = medium.grid
    tests = quadratic_tests(grid) if tests is None else tests
    s, sp, tau = record.s_new, record.s_prev, record.tau
    E = total_energy(model, medium, s, check=False)
    E_prev = total_energy(model, medium, sp, check=False)
    w2_exact = np.nan
    if costs is not None:
        w2_exact = sum(exact_w2(costs[i], s[i], sp[i]).value
                       for i in range(s.shape[0]) if not np.array_equal(s[i], sp[i]))
    pi = np.asarray(record.pi)
    h = np.asarray(record.p) + medium.potential
    return DiagnosticsRow(
        step=n, energy=E, energy_normalized=E - floor, w2=float(np.sum(record.w2)),
        w2_exact=float(w2_exact),
        entropy=np.array([relative_entropy(s[i], medium, tol=1e-6) for i in range(s.shape[0])]),
        grad_pi_sq=float(np.sum(dirichlet_norm_sq(grid, pi[1:]))) if pi.shape[0] > 1 else 0.0,
        p_h1_sq=float(np.sum(h1_norm_sq(grid, record.p))),
        pi_h1_sq=float(np.sum(h1_norm_sq(grid, pi[1:]))) if pi.shape[0] > 1 else 0.0,
        fw_gap=float(record.fw_gap), bias_budget=float(record.bias_budget),
        capillary_residual=capillary_residual(record.p, pi),
        weak_residuals=weak_form_residuals(medium, sp, s, record.p, tau, tests),
        dissipation=dissipation_rate(medium, s, h),
        energy_rate=(E - E_prev) / tau)


def trajectory_rows(traj, medium: Medium, model: CapillaryModel, costs: CostBundle | None = None,
                    tests: Sequence[TestFunction] | None = None) -> list[DiagnosticsRow]:
    return [step_row(n, r, medium, model, traj.energy_floor, costs, tests)
            for n, r in enumerate(traj.records, start=1)]


# ----------------------------------------------------------------------
# checks


@dataclass
class EnergyDecayReport:
    passed: bool
    monotone: bool
    total_distance_ok: bool
    worst_increase: float          # max_n E^n - E^{n-1} - slack_n (<= 0 when monotone)
    worst_step_excess: float       # max_n W^2/2tau + E^n - E^{n-1} - slack_n
    total_distance: float          # sum_n W^2 / tau
    total_distance_bound: float    # 2 (E^0 - floor)(1 + margin) + 2 sum slack
    slack: float


def check_energy_decay(traj, model: CapillaryModel, medium: Medium, margin: float = 0.05,
                       tol: float = 1e-12) -> EnergyDecayReport:
    """One-step energy inequality, monotone energy and total square distance.

    ``W^2/2tau + E(s^n) <= E(s^{n-1}) + eta_n`` and ``E(s^n) <= E(s^{n-1}) +
    eta_n`` per step with ``eta_n = fw_gap + bias_budget``, and
    ``sum_n W^2/tau <= 2 (E(s^0) - floor)(1 + margin) + 2 sum eta_n``.
    """
    recs = traj.records
    E0 = total_energy(model, medium, traj.states[0], check=False)
    if not recs:
        return EnergyDecayReport(True, True, True, 0.0, 0.0, 0.0,
                                 2 * (E0 - traj.energy_floor) * (1 + margin), 0.0)
    tau = traj.tau
    E = np.array([E0] + [total_energy(model, medium, r.s_new, check=False) for r in recs])
    w2 = np.array([float(np.sum(r.w2)) for r in recs])
    eta = np.array([r.fw_gap + r.bias_budget for r in recs])
    scale = tol * (1 + np.abs(E[:-1]))
    inc = E[1:] - E[:-1] - eta
    excess = w2 / (2 * tau) + inc
    total = float(w2.sum() / tau)
    bound = float(2 * (E0 - traj.energy_floor) * (1 + margin) + 2 * eta.sum())
    mono = bool(np.all(inc <= scale))
    tot_ok = total <= bound
    return EnergyDecayReport(bool(mono and tot_ok and np.all(excess <= scale)), mono, tot_ok,
                             float(inc.max()), float(excess.max()), total, bound, float(eta.sum()))


@dataclass
class HolderReport:
    passed: bool
    constant: float        # empirical C = max W / sqrt(t2 - t1 + tau)
    reference: float       # sqrt(2 (E(s^0) - floor))
    ratio: float
    pairs: list = field(default_factory=list)


def check_holder(traj, costs: CostBundle, model: CapillaryModel, medium: Medium,
                 pairs: Sequence[tuple[int, int]] | None = None, n_pairs: int = 20,
                 seed: int = 0, factor: float = 2.0, max_adjacent: int | None = None) -> HolderReport:
    """Empirical Hölder constant of the piecewise-constant interpolant.

    ``pairs`` are step indices ``(n1, n2)`` with ``n1 < n2``; the states are
    ``s^tau(t) = s^n`` on ``((n-1) tau, n tau]`` so the time gap is taken as
    ``(n2 - n1) tau``.  Without ``pairs``, the adjacent pairs (an evenly
    spaced subset of ``max_adjacent`` of them when given) plus ``n_pairs``
    random ones are used.  Passes when ``C <= factor * reference``.
    """
    K = len(traj.states) - 1
    tau = traj.tau
    E0 = total_energy(model, medium, traj.states[0], check=False)
    ref = float(np.sqrt(max(2 * (E0 - traj.energy_floor), 0.0)))
    if pairs is None:
        rng = np.random.default_rng(seed)
        starts = np.arange(K)
        if max_adjacent is not None and K > max_adjacent:
            starts = np.unique(np.linspace(0, K - 1, max_adjacent).round().astype(int))
        pairs = [(int(n), int(n) + 1) for n in starts]
        if K >= 2:
            for _ in range(n_pairs):
                n1, n2 = sorted(rng.choice(K + 1, size=2, replace=False))
                pairs.append((int(n1), int(n2)))
    C = 0.0
    out = []
    for n1, n2 in pairs:
        a, b = traj.states[n1], traj.states[n2]
        w2 = sum(exact_w2(costs[i], b[i], a[i]).value
                 for i in range(a.shape[0]) if not np.array_equal(a[i], b[i]))
        c = float(np.sqrt(w2 / ((n2 - n1) * tau + tau)))
        out.append((n1, n2, float(np.sqrt(w2)), c))
        C = max(C, c)
    ratio = C / ref if ref > 0 else (0.0 if C == 0 else np.inf)
    return HolderReport(bool(C <= factor * ref or C == 0.0), C, ref, float(ratio), out)


@dataclass
class FlowInterchangeReport:
    lhs: float              # sum_i ||grad pi_i||^2
    bracket: float          # 1 + W^2/tau + sum_i (H(s_i^{n-1}) - H(s_i^n)) / tau
    constant: float         # lhs / bracket


def check_flow_interchange(record, medium: Medium, model: CapillaryModel) -> FlowInterchangeReport:
    """Empirical constant in ``sum ||grad pi_i||^2 <= C (1 + W^2/tau + sum dH/tau)``.

    The constant is not known, so the value is meant to be tracked across
    steps and across refinements of ``tau``.
    """
    grid = medium.grid
    pi = np.asarray(record.pi)
    lhs = float(np.sum(dirichlet_norm_sq(grid, pi[1:]))) if pi.shape[0] > 1 else 0.0
    dH = sum(relative_entropy(record.s_prev[i], medium, tol=1e-6)
             - relative_entropy(record.s_new[i], medium, tol=1e-6)
             for i in range(record.s_new.shape[0]))
    bracket = 1.0 + float(np.sum(record.w2)) / record.tau + dH / record.tau
    const = lhs / bracket if bracket > 0 else np.inf
    return FlowInterchangeReport(lhs, bracket, float(const))


@dataclass
class WeakFormReport:
    residuals: np.ndarray      # (N+1, n_tests)
    bounds: np.ndarray         # W_i^2 * metric Hessian bound, same shape
    ratio: float               # max residual / bound (the empirical constant)
    test_names: list


def check_weak_form(record, medium: Medium, tests: Sequence[TestFunction] | None = None,
                    w2_per_phase: np.ndarray | None = None) -> WeakFormReport:
    """Residuals of the discrete weak form of one step and their reference bounds.

    The bound uses the per-phase distance of the step (``record.w2`` unless
    given) times :func:`metric_hessian_bound`; its constant is unknown,
    so the ratio is reported rather than asserted.
    """
    tests = quadratic_tests(medium.grid) if tests is None else list(tests)
    res = weak_form_residuals(medium, record.s_prev, record.s_new, record.p, record.tau, tests)
    w2 = np.asarray(record.w2 if w2_per_phase is None else w2_per_phase, dtype=float)
    bounds = np.array([[w2[i] * metric_hessian_bound(medium, i, t) for t in tests]
                       for i in range(res.shape[0])])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(bounds > 0, np.abs(res) / bounds, np.where(np.abs(res) > 0, np.inf, 0.0))
    return WeakFormReport(res, bounds, float(r.max()) if r.size else 0.0, [t.name for t in tests])


def weak_form_statistic(traj, medium: Medium, tests: Sequence[TestFunction] | None = None) -> float:
    """``max_{i, xi} sum_n |r_n(i, xi)|``: the time-accumulated weak-form defect.

    The per-step residual is bounded by ``W_n^2`` and ``sum_n W_n^2 = O(tau)``,
    so this statistic is expected to halve when ``tau`` is halved.
    """
    tests = quadratic_tests(medium.grid) if tests is None else list(tests)
    acc = 0.0
    for r in traj.records:
        acc = acc + np.abs(weak_form_residuals(medium, r.s_prev, r.s_new, r.p, r.tau, tests))
    return float(np.max(acc)) if np.ndim(acc) else 0.0


@dataclass
class DissipationReport:
    mismatch: float            # sum_n tau |rate_n + D_n| / sum_n tau |D_n|
    energy_rates: np.ndarray   # (E^n - E^{n-1}) / tau
    dissipation: np.ndarray    # D_n


def check_dissipation(traj, medium: Medium, model: CapillaryModel) -> DissipationReport:
    """Compare the discrete energy rate with minus the dissipation quadrature.

    The mismatch is the time-integrated absolute difference relative to
    the integrated dissipation; it is 0 when both vanish.
    """
    recs = traj.records
    rates = np.array([(total_energy(model, medium, r.s_new, check=False)
                       - total_energy(model, medium, r.s_prev, check=False)) / r.tau for r in recs])
    diss = np.array([dissipation_rate(medium, r.s_new, np.asarray(r.p) + medium.potential)
                     for r in recs])
    num = float(np.sum(np.abs(rates + diss)))
    den = float(np.sum(np.abs(diss)))
    mismatch = 0.0 if num == 0 else (num / den if den > 0 else np.inf)
    return DissipationReport(mismatch, rates, diss)


@dataclass
class PressureNormReport:
    p_h1: float                # tau sum_n ||p^n||_{H^1}^2
    pi_h1: float               # tau sum_n ||pi^n||_{H^1}^2
    capillary_residual: float  # max over steps


def check_pressure_norms(traj, medium: Medium) -> PressureNormReport:
    """Time-integrated ``H^1`` norms of the pressures and the capillary identity."""
    grid = medium.grid
    tau = traj.tau
    p_sum = pi_sum = res = 0.0
    for r in traj.records:
        pi = np.asarray(r.pi)
        p_sum += float(np.sum(h1_norm_sq(grid, r.p)))
        if pi.shape[0] > 1:
            pi_sum += float(np.sum(h1_norm_sq(grid, pi[1:])))
        res = max(res, capillary_residual(r.p, pi))
    return PressureNormReport(tau * p_sum, tau * pi_sum, res)


def within_factor(values: Sequence[float], factor: float = 2.0) -> bool:
    """True when all positive ``values`` lie within ``factor`` of each other."""
    v = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(v)):
        return False
    if np.all(v == 0):
        return True
    return bool(v.min() > 0 and v.max() <= factor * v.min())
