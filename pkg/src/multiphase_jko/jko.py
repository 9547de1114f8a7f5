"""Minimizing-movement steps for incompressible immiscible multiphase flow.

One step solves

    s^n = argmin_{s in X cap A}  sum_i W_i^2(s_i, s_i^{n-1}) / (2 tau) + E(s)

over the saturated, mass-constrained polytope.  The linear subproblem over
that polytope is a bathtub problem, and the fields handed to it are

    F_i = phi_i / tau + pi_i + Psi_i      (pi_0 = 0),

with ``phi_i`` the Kantorovich potential of ``W_i^2 / 2`` from ``s_i`` to
``s_i^{n-1}``.  From the multipliers of the final bathtub problem the
pressures are rebuilt as ``h_i = -phi_i/tau + F_i - lambda`` and
``p_i = h_i - Psi_i``.

The entropic objective is minimised either by pairwise Frank-Wolfe with
the bathtub oracle, or (default) by a log-barrier Newton method using the
exact Hessian of the entropic cost.  The conditional-gradient iteration
converges slowly here because the transport Hessian has condition number
of order ``n^2``; the Newton path reaches the same point in a few dozen
linear solves.  In both cases the final bathtub problem certifies the
step: its duality gap bounds the suboptimality and its multipliers give
``alpha`` and ``lambda``.

Two transport back-ends are available:

``entropic`` (default)
    ``W_i^2(s_i, b)`` is replaced by the linearly debiased entropic cost
    ``OT_eps(s_i, b) - OT_eps(b, b) - <f_b, s_i - b>``: smooth, nonnegative,
    zero with zero gradient at ``s_i = b``, with first variation the
    entropic potential minus that of ``b``.
``exact``
    The discrete ``W_i^2`` is piecewise linear in ``s``, so the step is
    solved on the lifted variables (one transport plan per phase); the
    lifted linear subproblem is again a transportation problem and the
    Kantorovich potentials come out of its dual.  Meant for small grids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bathtub import BathtubInstance, solve_bathtub, transport_primal_dual
from .energy import (CapillaryModel, capillary_pressure_field, check_admissible,
                     energy_floor, total_energy)
from .geometry import CostBundle, Medium, build_costs
from .transport import SinkhornDivergence, default_epsilon, exact_w2


class JKOError(RuntimeError):
    """A step failed; ``partial`` holds the trajectory computed so far, if any."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class JKOOptions:
    """Solver settings for :func:`jko_step`.

    Attributes
    ----------
    mode : {"entropic", "exact"}
    inner : {"newton", "frank-wolfe"}
        Minimiser for the entropic objective.
    epsilon : float or sequence, optional
        Entropic regularisation per phase; default ``epsilon_factor * median(C_i)``.
    debias : {"bregman", "full", "none"}
        Variant of the entropic cost, see :class:`~.transport.SinkhornDivergence`.
    fw_tol : float
        Stop when the Frank-Wolfe gap is below ``fw_tol * (1 + |objective|)``
        (objective with the energy measured from its floor).
    fw_max_iter : int
    positivity_delta : float, optional
        When set and some phase of ``s_prev`` has empty cells, run the
        auxiliary flow for this time before the step (recorded).
    """

    mode: str = "entropic"
    inner: str = "newton"
    epsilon: float | Sequence[float] | None = None
    epsilon_factor: float = 1e-2
    debias: str = "bregman"
    fw_tol: float = 1e-6
    fw_max_iter: int = 500
    sinkhorn_tol: float = 1e-8
    sinkhorn_max_iter: int = 50_000
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    positivity_delta: float | None = None
    x_ref: int = 0
    require_convergence: bool = False
    barrier_start: float = 1e-2
    barrier_shrink: float = 0.1
    newton_max_iter: int = 200
    centring_max_iter: int = 15


@dataclass
class JKOStepRecord:
    """Everything one step produces.

    ``phi`` are potentials of ``W_i^2 / 2`` (so ``F = phi/tau + pi + Psi``);
    ``w2`` is the per-phase squared distance used by the scheme (the
    Sinkhorn divergence in entropic mode).  ``pi`` holds the capillary
    pressures with ``pi[0] = 0``.
    """

    s_prev: np.ndarray
    s_new: np.ndarray
    tau: float
    phi: np.ndarray
    F: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray
    h: np.ndarray
    p: np.ndarray
    pi: np.ndarray
    fw_gap: float
    fw_iterations: int
    converged: bool
    w2: np.ndarray
    energy_before: float
    energy_after: float
    objective: float
    mode: str
    epsilon: np.ndarray
    transport_error: float = 0.0
    bias_budget: float = 0.0
    regularization_delta: float = 0.0
    transport_iterations: int = 0

    @property
    def slack(self) -> float:
        """Allowed excess in the one-step energy inequality."""
        return self.fw_gap + self.bias_budget


def assemble_F(s_current: np.ndarray, tau: float, phi: np.ndarray,
               model: CapillaryModel, medium: Medium) -> np.ndarray:
    """Linearisation fields ``F_i = phi_i / tau + pi_i(s*) + Psi_i``.

    Parameters
    ----------
    s_current : ndarray, shape (N+1, n)
    tau : float
    phi : ndarray, shape (N+1, n)
        Potentials of ``W_i^2 / 2`` from ``s_current`` to the previous state.
    """
    if phi is None:
        raise JKOError("potentials are required to assemble F")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != np.shape(s_current):
        raise JKOError(f"potentials have shape {phi.shape}, expected {np.shape(s_current)}")
    return phi / tau + capillary_pressure_field(model, s_current, medium) + medium.potential


def reconstruct_pressures(F, phi, alpha, lam, medium: Medium, tau: float):
    """Phase pressures from a converged step.

    ``h_i = -phi_i/tau + F_i - lambda``, shifted so that ``h_0`` has zero
    mean, and ``p_i = h_i - Psi_i``.  The multipliers ``alpha`` are not
    needed by the formula; they certify ``F_i + alpha_i = lambda`` on the
    support of ``s_i``.

    Returns
    -------
    h, p : ndarray, shape (N+1, n)
    """
    h = -np.asarray(phi) / tau + np.asarray(F) - np.asarray(lam)[None, :]
    h = h - h[0].mean()
    return h, h - medium.potential


def _phase_masses(s):
    return s.sum(axis=1)


class _EntropicObjective:
    """Entropic step objective (energy measured from its floor) and its gradient."""

    def __init__(self, s_prev, tau, medium, model, costs, eps, opts: JKOOptions, floor):
        self.tau = tau
        self.medium = medium
        self.model = model
        self.floor = floor
        self.costs = costs
        self.div = [SinkhornDivergence(costs[i], s_prev[i], eps[i], opts.sinkhorn_tol,
                                       opts.sinkhorn_max_iter, opts.debias)
                    for i in range(s_prev.shape[0])]
        self.x_ref = opts.x_ref
        self.calls = 0
        self.transport_iterations = 0

    def __call__(self, s, hessian: bool = False):
        self.calls += 1
        n_ph = s.shape[0]
        phi = np.empty_like(s)
        w2 = np.empty(n_ph)
        blocks = []
        err = 0.0
        for i in range(n_ph):
            out = self.div[i].evaluate(s[i], self.x_ref, hessian=hessian)
            w2[i] = out[0]
            phi[i] = 0.5 * out[1]
            err = max(err, out[3])
            self.transport_iterations += out[4]
            if hessian:
                blocks.append(out[5] / (2 * self.tau))
        E = total_energy(self.model, self.medium, s, check=False)
        F = assemble_F(s, self.tau, phi, self.model, self.medium)
        value = float(w2.sum() / (2 * self.tau) + E - self.floor)
        info = dict(phi=phi, w2=w2, energy=E, err=err)
        if hessian:
            info["hessian"] = self._assemble_hessian(blocks, s.shape[1])
        return value, F, info

    def _assemble_hessian(self, blocks, n):
        """Dense Hessian in phase-major ordering: transport blocks plus capillarity."""
        n_ph = len(blocks)
        H = np.zeros((n_ph * n, n_ph * n))
        for i, B in enumerate(blocks):
            H[i * n:(i + 1) * n, i * n:(i + 1) * n] = B
        if self.model.n_capillary:
            vol = self.medium.grid.cell_volume
            idx = np.arange(n)
            for i in range(1, n_ph):
                for j in range(1, n_ph):
                    H[i * n + idx, j * n + idx] += self.model.A[:, i - 1, j - 1] / vol
        return H


def _same_atom(u, v):
    return u is v or np.array_equal(u, v)


def _pairwise_fw(s0, objective, bathtub_data, opts: JKOOptions, tol_scale):
    """Pairwise Frank-Wolfe over the bathtub polytope with Armijo line search."""
    cap, masses = bathtub_data
    s = s0.copy()
    atoms = [s0.copy()]
    weights = [1.0]
    val, F, info = objective(s)
    alpha = None
    curvature = None
    gap = np.inf
    bt = None
    k = 0
    for k in range(opts.fw_max_iter + 1):
        bt = solve_bathtub(BathtubInstance(F, cap, masses), alpha0=alpha)
        alpha = bt.alpha
        d = bt.s
        gap = float(np.sum(F * (s - d)))
        if gap <= opts.fw_tol * (1.0 + abs(val)) * tol_scale or k == opts.fw_max_iter:
            break
        scores = [float(np.sum(F * a)) for a in atoms]
        j = int(np.argmax(scores))
        D = d - atoms[j]
        gmax = weights[j]
        slope = float(np.sum(F * D))
        if slope >= 0:
            break
        DD = float(np.sum(D * D))
        gamma = gmax if curvature is None else min(gmax, -slope / (curvature * DD))
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            trial = s + gamma * D
            np.clip(trial, 0.0, None, out=trial)
            t_val, t_F, t_info = objective(trial)
            if t_val <= val + opts.armijo * gamma * slope:
                accepted = True
                break
            gamma *= opts.backtrack
        if not accepted:
            if opts.require_convergence:
                raise JKOError(f"line search failed at iteration {k} (gap {gap:.3e})")
            break
        # curvature of the objective along D from the accepted step
        c = 2.0 * (t_val - val - gamma * slope) / (gamma * gamma * DD)
        curvature = c if c > 0 else (curvature or 1.0) * 0.5
        s, val, F, info = trial, t_val, t_F, t_info
        weights[j] -= gamma
        for idx, a in enumerate(atoms):
            if _same_atom(a, d):
                weights[idx] += gamma
                break
        else:
            atoms.append(d)
            weights.append(gamma)
        if weights[j] <= 1e-14:
            del atoms[j], weights[j]
    converged = gap <= opts.fw_tol * (1.0 + abs(val)) * tol_scale
    return s, val, F, info, bt, gap, k, converged


def _constraint_matrix(n_ph, n):
    """Cell sums and all but the last phase sum, for phase-major flattening."""
    A = np.zeros((n + n_ph - 1, n_ph * n))
    for i in range(n_ph):
        A[np.arange(n), i * n + np.arange(n)] = 1.0
        if i < n_ph - 1:
            A[n + i, i * n:(i + 1) * n] = 1.0
    return A


def _barrier_newton(s_prev, objective, bathtub_data, opts: JKOOptions):
    """Log-barrier Newton method on the saturated, mass-constrained set.

    Minimises ``objective(s) - mu sum log s`` for a decreasing sequence of
    ``mu``; each centring uses equality-constrained Newton steps with a
    fraction-to-boundary rule and Armijo backtracking.  Barrier minimisers
    are within ``mu * s.size`` of optimal, which sets the final ``mu``; the
    returned gap is the bathtub certificate at the final point.
    """
    cap, masses = bathtub_data
    n_ph, n = s_prev.shape
    m = n_ph * n
    A = _constraint_matrix(n_ph, n)
    rhs = np.concatenate([cap, masses[:-1]])
    share = masses / masses.sum()
    theta = 1e-3
    s = (1 - theta) * s_prev + theta * share[:, None] * cap[None, :]
    val, F, info = objective(s, hessian=True)
    scale = 1.0 + abs(val)
    target = opts.fw_tol * scale
    mu = opts.barrier_start * scale / m
    mu_min = 1e-3 * target / m
    k = 0

    def barrier(v, z):
        return v - mu * float(np.log(z).sum())

    converged = polishing = False
    bt, gap = None, np.inf
    inner = 0
    while k < opts.newton_max_iter:
        g = F.ravel() - mu / s.ravel()
        H = info["hessian"] + np.diag(mu / s.ravel() ** 2)
        K = np.block([[H, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
        r = np.concatenate([-g, rhs - A @ s.ravel()])
        try:
            sol = np.linalg.solve(K, r)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, r, rcond=None)[0]
        d = sol[:m].reshape(n_ph, n)
        dec = -float(g @ d.ravel())
        # near-kinks of the entropic cost can stall a centring; cap its length
        stalled = inner >= opts.centring_max_iter
        if not polishing and (dec <= 2 * mu * 1e-3 or dec <= 1e-15 * scale or stalled):
            # centred: certify or shrink mu
            if mu * m <= 0.1 * target or mu <= mu_min:
                bt = solve_bathtub(BathtubInstance(F, cap, masses))
                gap = float(np.sum(F * (s - bt.s)))
                if gap <= target:
                    converged = True
                    break
                if mu <= mu_min:
                    # the linear gap overstates a stiff objective's error;
                    # polish with undamped Newton steps while it improves
                    polishing = True
                    continue
            mu = max(mu * opts.barrier_shrink, mu_min)
            inner = 0
            continue
        neg = d < 0
        t = 1.0
        if np.any(neg):
            t = min(1.0, 0.995 * float(np.min(-s[neg] / d[neg])))
        if polishing:
            trial = s + t * d
            t_val, t_F, t_info = objective(trial, hessian=True)
            t_bt = solve_bathtub(BathtubInstance(t_F, cap, masses), alpha0=bt.alpha)
            t_gap = float(np.sum(t_F * (trial - t_bt.s)))
            k += 1
            if t_gap >= gap:
                break
            s, val, F, info, bt, gap = trial, t_val, t_F, t_info, t_bt, t_gap
            if gap <= target:
                converged = True
                break
            continue
        inner += 1
        b0 = barrier(val, s)
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            trial = s + t * d
            t_val, t_F, t_info = objective(trial, hessian=True)
            if barrier(t_val, trial) <= b0 - opts.armijo * t * dec:
                accepted = True
                break
            t *= opts.backtrack
        k += 1
        if not accepted:
            break
        s, val, F, info = trial, t_val, t_F, t_info
    if bt is None or not (converged or polishing):
        bt = solve_bathtub(BathtubInstance(F, cap, masses))
        gap = float(np.sum(F * (s - bt.s)))
        converged = gap <= target
    # the previous state is always admissible; never return anything worse
    p_val, p_F, p_info = objective(s_prev)
    if p_val < val:
        p_bt = solve_bathtub(BathtubInstance(p_F, cap, masses), alpha0=bt.alpha)
        s, val, F, info, bt = s_prev.copy(), p_val, p_F, p_info, p_bt
        gap = float(np.sum(F * (s - bt.s)))
        converged = gap <= target
    snapped = _crossover(s, F + bt.alpha[:, None], bt.lam, cap, masses)
    if snapped is not None:
        c_val, c_F, c_info = objective(snapped)
        c_bt = solve_bathtub(BathtubInstance(c_F, cap, masses), alpha0=bt.alpha)
        c_gap = float(np.sum(c_F * (snapped - c_bt.s)))
        if c_gap <= max(gap, target) and c_val <= val + target:
            s, val, F, info, bt, gap = snapped, c_val, c_F, c_info, c_bt, c_gap
            converged = gap <= target
    return s, val, F, info, bt, gap, k, converged


def _crossover(s, G, lam, cap, masses, rel: float = 1e-5):
    """Set to zero the barrier's residual masses on inactive entries.

    Entries below ``rel * omega`` with positive reduced cost ``G - lam`` are
    moved to the cheapest phase of their cell; the phase-mass errors this
    creates are exchanged in cells holding both phases, where the reduced
    costs differ least.  Tiny positive masses left in a state would make
    the next step's entropic cost nearly kinked, so they are removed.
    Returns ``None`` when nothing qualifies or the exchange fails.
    """
    n_ph, n = s.shape
    red = G - lam[None, :]
    tiny = (s > 0) & (s < rel * cap[None, :]) & (red > 0)
    if not tiny.any():
        return None
    out = np.where(tiny, 0.0, s)
    best = np.argmin(red, axis=0)
    np.add.at(out, (best, np.arange(n)), np.where(tiny, s, 0.0).sum(axis=0))
    err = masses - out.sum(axis=1)
    tol = 1e-15 * masses.sum()
    for _ in range(n_ph):
        i, k = int(np.argmax(err)), int(np.argmin(err))
        if err[i] <= tol:
            break
        amount = min(err[i], -err[k])
        cand = np.flatnonzero((out[k] > amount) & (out[i] > 0))
        if cand.size == 0:
            return None
        x = cand[np.argmin(red[i, cand] - red[k, cand])]
        out[k, x] -= amount
        out[i, x] += amount
        err[i] -= amount
        err[k] += amount
    return out


def _initial_check(s_prev, medium, tau):
    if not tau > 0:
        raise JKOError("tau must be positive")
    check_admissible(s_prev, medium)


def jko_step(
    s_prev: np.ndarray,
    tau: float,
    medium: Medium,
    model: CapillaryModel,
    costs: CostBundle | None = None,
    options: JKOOptions | None = None,
    floor: float | None = None,
) -> JKOStepRecord:
    """One minimizing-movement step from ``s_prev``.

    Parameters
    ----------
    s_prev : ndarray, shape (N+1, n)
        Cell masses in the saturated, mass-constrained set.
    tau : float
    medium, model
    costs : CostBundle, optional
        Squared geodesic costs (built when omitted).
    options : JKOOptions, optional
    floor : float, optional
        Energy floor subtracted in the objective (computed when omitted).

    Returns
    -------
    JKOStepRecord
    """
    opts = options or JKOOptions()
    s_prev = np.asarray(s_prev, dtype=float)
    _initial_check(s_prev, medium, tau)
    costs = costs or build_costs(medium)
    floor = energy_floor(model, medium) if floor is None else floor
    cap = medium.pore_volume
    masses = _phase_masses(s_prev)
    E_prev = total_energy(model, medium, s_prev)
    n_ph = s_prev.shape[0]
    eps = _epsilons(costs, opts, n_ph)

    delta = 0.0
    if opts.positivity_delta is not None and np.any(s_prev <= 0):
        from .auxflow import regularize_positive
        s_prev, delta = regularize_positive(s_prev, medium, opts.positivity_delta)
        E_prev = total_energy(model, medium, s_prev)

    if n_ph == 1:
        return _trivial_record(s_prev, tau, medium, model, opts, eps, E_prev)

    if opts.mode == "entropic":
        objective = _EntropicObjective(s_prev, tau, medium, model, costs, eps, opts, floor)
        if opts.inner == "newton":
            s, val, F, info, bt, gap, iters, conv = _barrier_newton(
                s_prev, objective, (cap, masses), opts)
        elif opts.inner == "frank-wolfe":
            s, val, F, info, bt, gap, iters, conv = _pairwise_fw(
                s_prev, objective, (cap, masses), opts, 1.0)
        else:
            raise JKOError(f"unknown inner solver {opts.inner!r}")
        phi, w2 = info["phi"], info["w2"]
        terr = info["err"]
        bias = sum(terr * float(np.max(costs[i])) for i in range(n_ph)) / (2 * tau)
        t_iters = objective.transport_iterations
    elif opts.mode == "exact":
        s, val, F, phi, w2, bt, gap, iters, conv = _exact_lifted_step(
            s_prev, tau, medium, model, costs, opts, floor)
        terr, bias, t_iters = 0.0, 0.0, 0
    else:
        raise JKOError(f"unknown mode {opts.mode!r}")

    drift = max(np.abs(s.sum(axis=0) - cap).max(), np.abs(s.sum(axis=1) - masses).max())
    if drift > 1e-9 * cap.sum():
        raise JKOError(f"constraint drift {drift:.3e}")
    if not conv and opts.require_convergence:
        raise JKOError(f"Frank-Wolfe did not converge: gap {gap:.3e} after {iters} iterations")
    E_new = total_energy(model, medium, s, check=False)
    h, p = reconstruct_pressures(F, phi, bt.alpha, bt.lam, medium, tau)
    return JKOStepRecord(
        s_prev=s_prev, s_new=s, tau=tau, phi=phi, F=F, alpha=bt.alpha, lam=bt.lam, h=h, p=p,
        pi=capillary_pressure_field(model, s, medium), fw_gap=max(gap, 0.0),
        fw_iterations=iters, converged=conv, w2=np.asarray(w2), energy_before=E_prev,
        energy_after=E_new, objective=val + floor, mode=opts.mode, epsilon=eps,
        transport_error=terr, bias_budget=bias, regularization_delta=delta,
        transport_iterations=t_iters)


def _epsilons(costs, opts, n_ph):
    if opts.mode == "exact":
        return np.zeros(n_ph)
    if opts.epsilon is None:
        return np.array([default_epsilon(costs[i], opts.epsilon_factor) for i in range(n_ph)])
    eps = np.broadcast_to(np.asarray(opts.epsilon, dtype=float), (n_ph,)).copy()
    if np.any(eps <= 0):
        raise JKOError("epsilon must be positive")
    return eps


def _trivial_record(s_prev, tau, medium, model, opts, eps, E):
    """Single phase: the admissible set is the single state ``omega``."""
    z = np.zeros_like(s_prev)
    F = medium.potential.copy()
    lam = F[0].copy()
    h, p = reconstruct_pressures(F, z, np.zeros(1), lam, medium, tau)
    return JKOStepRecord(
        s_prev=s_prev, s_new=s_prev.copy(), tau=tau, phi=z, F=F, alpha=np.zeros(1), lam=lam,
        h=h, p=p, pi=z.copy(), fw_gap=0.0, fw_iterations=0, converged=True,
        w2=np.zeros(1), energy_before=E, energy_after=E, objective=E, mode=opts.mode,
        epsilon=eps)


def _exact_lifted_step(s_prev, tau, medium, model, costs, opts, floor):
    """Exact-transport step on per-phase plans.

    Variables are plans ``P[x, k]`` from cell ``x`` of the new state to the
    occupied cell ``y_k`` of the previous state in phase ``i_k``.  The
    objective is quadratic, so the pairwise step uses an exact line search.
    """
    vol = medium.grid.cell_volume
    cap = medium.pore_volume
    n_ph, n = s_prev.shape
    cols = [(i, y) for i in range(n_ph) for y in np.flatnonzero(s_prev[i] > 0)]
    phase_of = np.array([c[0] for c in cols])
    cell_of = np.array([c[1] for c in cols])
    target = s_prev[phase_of, cell_of]
    Ck = np.stack([costs[i][:, y] for i, y in cols], axis=1) / (2 * tau)
    membership = np.zeros((n_ph, len(cols)))
    membership[phase_of, np.arange(len(cols))] = 1.0

    def state(P):
        return P @ membership.T

    def evaluate(P):
        s = state(P).T
        E = total_energy(model, medium, s, check=False)
        gE = capillary_pressure_field(model, s, medium) + medium.potential
        val = float(np.sum(Ck * P) + E - floor)
        return val, Ck + gE[phase_of, :].T, s

    def curvature(D):
        ds = state(D).T
        if model.n_capillary == 0:
            return 0.0
        return float(model.quadratic_form(ds[1:]).sum() / vol)

    P = np.zeros((n, len(cols)))
    P[cell_of, np.arange(len(cols))] = target
    atoms, weights = [P.copy()], [1.0]
    val, G, s = evaluate(P)
    v_warm = None
    gap = np.inf
    k = 0
    for k in range(opts.fw_max_iter + 1):
        lp = transport_primal_dual(G, cap, target, v0=v_warm)
        v_warm = lp.v
        V = lp.plan
        gap = float(np.sum(G * (P - V)))
        if gap <= opts.fw_tol * (1.0 + abs(val)) or k == opts.fw_max_iter:
            break
        j = int(np.argmax([float(np.sum(G * a)) for a in atoms]))
        D = V - atoms[j]
        gmax = weights[j]
        slope = float(np.sum(G * D))
        if slope >= 0:
            break
        q = curvature(D)
        gamma = gmax if q <= 0 else min(gmax, -slope / q)
        P = P + gamma * D
        np.clip(P, 0.0, None, out=P)
        weights[j] -= gamma
        for idx, a in enumerate(atoms):
            if _same_atom(a, V):
                weights[idx] += gamma
                break
        else:
            atoms.append(V)
            weights.append(gamma)
        if weights[j] <= 1e-14:
            del atoms[j], weights[j]
        val, G, s = evaluate(P)
    conv = gap <= opts.fw_tol * (1.0 + abs(val))
    # Kantorovich potentials from the dual of the last linear subproblem:
    # psi_i(y_k) = 2 tau v_k and phi_i is its c-transform
    phi = np.zeros((n_ph, n))
    for i in range(n_ph):
        ks = np.flatnonzero(phase_of == i)
        psi = 2 * tau * lp.v[ks]
        full = (costs[i][:, cell_of[ks]] - psi[None, :]).min(axis=1)
        phi[i] = 0.5 * (full - full[opts.x_ref])
    F = assemble_F(s, tau, phi, model, medium)
    bt = solve_bathtub(BathtubInstance(F, cap, s_prev.sum(axis=1)))
    w2 = np.array([exact_w2(costs[i], s[i], s_prev[i]).value if np.any(s[i] != s_prev[i]) else 0.0
                   for i in range(n_ph)])
    return s, val, F, phi, w2, bt, max(gap, 0.0), k, conv


@dataclass
class Trajectory:
    """States ``s^0..s^K`` at times ``n tau`` with the step records."""

    tau: float
    states: list[np.ndarray]
    records: list[JKOStepRecord] = field(default_factory=list)
    energy_floor: float = 0.0
    stopped_early: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(len(self.states))

    @property
    def energies(self) -> np.ndarray:
        if not self.records:
            return np.array([np.nan])
        return np.array([self.records[0].energy_before] + [r.energy_after for r in self.records])

    def state_at(self, t: float) -> np.ndarray:
        """Piecewise-constant interpolation ``s(t) = s^n`` for ``t in ((n-1) tau, n tau]``."""
        n = max(0, math.ceil(t / self.tau - 1e-12))
        return self.states[min(n, len(self.states) - 1)]


def run_simulation(
    s0: np.ndarray,
    tau: float,
    horizon: float,
    medium: Medium,
    model: CapillaryModel,
    costs: CostBundle | None = None,
    options: JKOOptions | None = None,
    stationary_tol: float | None = None,
    callback=None,
) -> Trajectory:
    """Run ``ceil(T / tau)`` steps from ``s0``.

    Parameters
    ----------
    stationary_tol : float, optional
        Stop early once the exact global squared distance between successive
        states falls below this value.
    callback : callable, optional
        Called as ``callback(n, record)`` after every step (used for
        persistence).

    Raises
    ------
    JKOError
        With the partial trajectory attached as ``partial``.
    """
    if horizon < 0:
        raise JKOError("horizon must be nonnegative")
    s0 = np.asarray(s0, dtype=float)
    _initial_check(s0, medium, tau)
    costs = costs or build_costs(medium)
    floor = energy_floor(model, medium)
    traj = Trajectory(tau, [s0.copy()], energy_floor=floor)
    steps = math.ceil(horizon / tau - 1e-9) if horizon > 0 else 0
    s = s0
    for n in range(1, steps + 1):
        try:
            rec = jko_step(s, tau, medium, model, costs, options, floor=floor)
        except Exception as exc:
            raise JKOError(f"step {n} failed: {exc}", partial=traj) from exc
        traj.records.append(rec)
        traj.states.append(rec.s_new)
        if callback is not None:
            callback(n, rec)
        if stationary_tol is not None:
            d2 = sum(exact_w2(costs[i], rec.s_new[i], s[i]).value
                     for i in range(s.shape[0]) if not np.array_equal(rec.s_new[i], s[i]))
            if d2 < stationary_tol:
                traj.stopped_early = True
                break
        s = rec.s_new
    return traj


def minimize_energy(model: CapillaryModel, medium: Medium, masses, tol: float = 1e-12,
                    max_iter: int = 5000):
    """Minimise ``E`` over saturated states with prescribed phase masses.

    Pairwise Frank-Wolfe with the bathtub oracle and exact line search (the
    energy is quadratic).  This is the equilibrium the flow relaxes to.

    Returns
    -------
    s : ndarray, shape (N+1, n)
    energy : float
    gap : float
    """
    masses = np.asarray(masses, dtype=float)
    cap = medium.pore_volume
    vol = medium.grid.cell_volume
    share = masses / masses.sum()
    s = share[:, None] * cap[None, :]
    atoms, weights = [], []
    grad = capillary_pressure_field(model, s, medium) + medium.potential
    bt = solve_bathtub(BathtubInstance(grad, cap, masses))
    # start from the first vertex: keeps the active set a true convex hull
    s = bt.s.copy()
    atoms, weights = [s.copy()], [1.0]
    alpha = bt.alpha
    gap = np.inf
    for _ in range(max_iter):
        grad = capillary_pressure_field(model, s, medium) + medium.potential
        bt = solve_bathtub(BathtubInstance(grad, cap, masses), alpha0=alpha)
        alpha = bt.alpha
        d = bt.s
        gap = float(np.sum(grad * (s - d)))
        E = total_energy(model, medium, s, check=False)
        if gap <= tol * (1.0 + abs(E)):
            break
        j = int(np.argmax([float(np.sum(grad * a)) for a in atoms]))
        D = d - atoms[j]
        slope = float(np.sum(grad * D))
        if slope >= 0:
            break
        q = float(model.quadratic_form(D[1:]).sum() / vol) if model.n_capillary else 0.0
        gamma = weights[j] if q <= 0 else min(weights[j], -slope / q)
        s = np.clip(s + gamma * D, 0.0, None)
        weights[j] -= gamma
        for idx, a in enumerate(atoms):
            if _same_atom(a, d):
                weights[idx] += gamma
                break
        else:
            atoms.append(d)
            weights.append(gamma)
        if weights[j] <= 1e-14:
            del atoms[j], weights[j]
    return s, total_energy(model, medium, s, check=False), gap
