"""Quadratic Wasserstein distances between cell-mass vectors.

``exact_w2`` solves the transportation LP exactly; ``sinkhorn_w2`` solves
the entropic problem

    OT_eps(a, b) = min_P <C, P> + eps KL(P | a (x) b / M),   M = sum a,

in the log domain.  Plain Sinkhorn sweeps are used first and, if they have
not met the tolerance after a fixed budget, the concave semi-dual is
finished by damped Newton steps (the problems here have at most a few
hundred cells, so the dense Hessian is cheap and removes the slow
convergence of Sinkhorn at small ``eps``).

Potentials follow the cost ``C = d^2``: ``phi_x + psi_y <= C_xy`` (exact)
and ``phi`` is the first variation of the value with respect to ``a``.
They are normalised so that ``phi[x_ref] = 0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bathtub import transport_primal_dual


class TransportError(ValueError):
    pass


@dataclass
class TransportResult:
    """Outcome of a transport solve.

    Attributes
    ----------
    value : float
        Squared distance.  Exact mode: the LP optimum.  Entropic mode: the
        transport cost ``<C, P>`` of the entropic plan, or the debiased
        Sinkhorn divergence when requested.
    plan : ndarray
    phi, psi : ndarray
        Potentials on source and target cells, ``phi[x_ref] = 0``.
    mode : str
        ``"exact"`` or ``"entropic"``.
    iterations : int
    marginal_error : float
        L1 violation of the plan marginals.
    epsilon : float
        Regularisation (0 in exact mode).
    dual_value : float
        ``<phi, a> + <psi, b>``; equals ``OT_eps`` in entropic mode.
    """

    value: float
    plan: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    mode: str
    iterations: int
    marginal_error: float
    epsilon: float = 0.0
    dual_value: float = np.nan


def _check_marginals(cost, a, b, rtol=1e-12):
    C = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if C.shape != (a.size, b.size):
        raise TransportError(f"cost shape {C.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(a < 0) or np.any(b < 0):
        raise TransportError("marginals must be nonnegative")
    ta, tb = a.sum(), b.sum()
    if ta <= 0 or abs(ta - tb) > rtol * max(ta, tb) * 10 + 1e-300:
        raise TransportError(f"unbalanced marginals: {ta!r} vs {tb!r}")
    return C, a, b


def exact_w2(cost, a, b, x_ref: int = 0) -> TransportResult:
    """Exact optimal transport value, plan and potentials.

    Cells without mass are dropped before solving; their potentials are
    filled in by the c-transform ``phi(x) = min_y C(x, y) - psi(y)`` so the
    returned pair is feasible everywhere.

    Examples
    --------
    >>> C = 2.0 * np.array([[0.0, 1.0], [1.0, 0.0]])
    >>> exact_w2(C, [1.0, 0.0], [0.0, 1.0]).value
    2.0
    """
    C, a, b = _check_marginals(cost, a, b)
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    Cs = C[np.ix_(ia, ib)]
    lp = transport_primal_dual(Cs, a[ia], b[ib] * (a.sum() / b.sum()))
    phi = (C[:, ib] - lp.v[None, :]).min(axis=1)
    psi = (C[ia, :] - phi[ia, None]).min(axis=0)
    shift = phi[x_ref]
    phi -= shift
    psi += shift
    plan = np.zeros_like(C)
    plan[np.ix_(ia, ib)] = lp.plan
    err = float(np.abs(plan.sum(1) - a).sum() + np.abs(plan.sum(0) - b).sum())
    value = max(float(np.sum(C * plan)), 0.0)
    return TransportResult(value, plan, phi, psi, "exact", lp.augmentations, err, 0.0,
                           float(phi @ a + psi @ b))


def _softmin(C, g, log_w, eps):
    """Row-wise soft minimum ``-eps log sum_y w_y exp((g_y - C_xy)/eps)`` and its softmax."""
    Z = (g[None, :] - C) / eps + log_w[None, :]
    top = Z.max(axis=1)
    E = np.exp(Z - top[:, None])
    tot = E.sum(axis=1)
    return -eps * (top + np.log(tot)), E / tot[:, None]


@dataclass
class SinkhornState:
    """Warm-start data: target-side potential on the full grid."""

    g: np.ndarray


def _newton_semidual(C, a, b, g, eps, tol_abs, max_iter):
    """Maximise the semi-dual ``<a, f(g)> + <g, b>`` by damped Newton steps.

    Levenberg-Marquardt damping proportional to ``diag(col)`` interpolates
    between the Newton step and a Sinkhorn sweep; when a step fails, a
    plain Sinkhorn sweep (always an ascent step) is taken instead.
    """
    M = a.sum()
    log_a, log_b = np.log(a / M), np.log(b / M)
    m = b.size
    f, S = _softmin(C, g, log_b, eps)
    val = a @ f + g @ b
    damping = 1e-10
    for it in range(1, max_iter + 1):
        P = a[:, None] * S
        col = P.sum(axis=0)
        grad = b - col
        if np.abs(grad).sum() <= tol_abs:
            return g, f, S, it - 1
        H = (np.diag(col * (1.0 + damping)) - P.T @ (P / a[:, None])) / eps
        H += np.full((m, m), col.mean() / (eps * m))
        try:
            d = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            d = None
        accepted = False
        if d is not None and np.all(np.isfinite(d)):
            slope = grad @ d
            t = 1.0
            while t >= 1.0 / 64:
                g_new = g + t * d
                f_new, S_new = _softmin(C, g_new, log_b, eps)
                val_new = a @ f_new + g_new @ b
                if val_new >= val + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
        if accepted:
            damping = max(damping * 0.1, 1e-12) if t == 1.0 else damping * 10.0
        else:
            damping = min(damping * 100.0, 1e6)
            g_new, _ = _softmin(C.T, f, log_a, eps)
            f_new, S_new = _softmin(C, g_new, log_b, eps)
            val_new = a @ f_new + g_new @ b
        g, f, S, val = g_new, f_new, S_new, val_new
    return g, f, S, max_iter


def _sinkhorn_core(C, a, b, eps, tol, max_iter, g0, newton_after):
    """Solve on strictly positive marginals; returns potentials, plan, iterations, error."""
    M = a.sum()
    log_a, log_b = np.log(a / M), np.log(b / M)
    tol_abs = tol * M
    g = np.zeros(b.size) if g0 is None else g0.copy()
    if g0 is not None and newton_after is not None:
        newton_after = min(newton_after, 2)
    it = 0
    err = np.inf
    while it < max_iter:
        f, S = _softmin(C, g, log_b, eps)
        it += 1
        col = (a[:, None] * S).sum(axis=0)
        err = np.abs(col - b).sum()
        if err <= tol_abs:
            break
        if newton_after is not None and it >= newton_after:
            g, f, S, k = _newton_semidual(C, a, b, g, eps, tol_abs, max_iter - it)
            it += k
            col = (a[:, None] * S).sum(axis=0)
            err = np.abs(col - b).sum()
            break
        g, _ = _softmin(C.T, f, log_a, eps)
    P = a[:, None] * S
    return f, g, P, it, float(err)


def sinkhorn_w2(
    cost,
    a,
    b,
    epsilon: float,
    tol: float = 1e-8,
    max_iter: int = 50_000,
    warm: SinkhornState | None = None,
    debias: bool = False,
    x_ref: int = 0,
    newton_after: int | None = 50,
    strict: bool = True,
) -> tuple[TransportResult, SinkhornState]:
    """Entropic optimal transport in the log domain.

    Parameters
    ----------
    cost : ndarray, shape (n, m)
    a, b : ndarray
        Nonnegative marginals with equal totals; empty cells are pruned.
    epsilon : float
        Regularisation strength in cost units.
    tol : float
        Stop when the L1 marginal error is below ``tol * total``.
    warm : SinkhornState, optional
        Target potential from a previous call on the same cost.
    debias : bool
        Return the Sinkhorn divergence ``OT(a,b) - OT(a,a)/2 - OT(b,b)/2``
        as the value and ``f_ab - f_aa`` as ``phi``.
    newton_after : int or None
        Switch to Newton on the semi-dual after this many sweeps; ``None``
        keeps plain Sinkhorn throughout.
    strict : bool
        Raise :class:`TransportError` when the tolerance is not met.

    Returns
    -------
    result : TransportResult
    state : SinkhornState
        For warm-starting the next call.
    """
    if not epsilon > 0:
        raise TransportError("epsilon must be positive")
    C, a, b = _check_marginals(cost, a, b)
    b = b * (a.sum() / b.sum())
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    Cs = C[np.ix_(ia, ib)]
    g0 = None if warm is None else warm.g[ib]
    f, g, P, it, err = _sinkhorn_core(Cs, a[ia], b[ib], epsilon, tol, max_iter, g0, newton_after)
    if strict and err > tol * a.sum():
        raise TransportError(f"Sinkhorn did not converge: marginal error {err:.3e} after {it} iterations")
    M = a.sum()
    # soft c-transforms extend the potentials to empty cells; on the support
    # they reproduce the converged values
    phi, _ = _softmin(C[:, ib], g, np.log(b[ib] / M), epsilon)
    psi, _ = _softmin(C[ia, :].T, f, np.log(a[ia] / M), epsilon)
    psi[ib] = g
    plan = np.zeros_like(C)
    plan[np.ix_(ia, ib)] = P
    ot_eps = float(phi[ia] @ a[ia] + g @ b[ib])
    value = float(np.sum(Cs * P))
    if debias:
        div = SinkhornDivergence(C, b, epsilon, tol, max_iter, "full", newton_after)
        value, phi_d, _, err_d, it_d = div.evaluate(a, x_ref)
        phi = phi_d + phi[x_ref]
        it += it_d
    shift = phi[x_ref]
    phi = phi - shift
    psi = psi + shift
    result = TransportResult(value, plan, phi, psi, "entropic", it, err, epsilon, ot_eps)
    return result, SinkhornState(psi + shift)


def _symmetric_core(C, a, eps, tol, max_iter, f0, newton_after):
    """Self-transport ``OT_eps(a, a)``: symmetric potential on the support and value."""
    f, g, _, it, err = _sinkhorn_core(C, a, a, eps, tol, max_iter, f0, newton_after)
    sym = 0.5 * (f + g)
    return sym, float((f + g) @ a), it, err


class SinkhornDivergence:
    """Entropic transport cost against a fixed target ``b``, with warm starts.

    Three variants are offered through ``debias``:

    ``"bregman"`` (default)
        ``OT_eps(a, b) - OT_eps(b, b) - <f_b, a - b>`` where ``f_b`` is the
        first variation of ``OT_eps(., b)`` at ``a = b``.  Since
        ``OT_eps(., b)`` is convex this is nonnegative, it vanishes with
        zero gradient at ``a = b``, and its gradient ``f_ab - f_b`` stays
        bounded on the whole simplex.  One Sinkhorn solve per evaluation.
    ``"full"``
        The Sinkhorn divergence ``OT(a,b) - OT(a,a)/2 - OT(b,b)/2``.  Its
        self-transport term is very steep where ``a`` has isolated tiny
        masses, which makes it a poor objective for iterates that touch the
        boundary of the simplex.
    ``"none"``
        ``OT_eps(a, b)`` itself.

    Parameters
    ----------
    cost : ndarray, shape (n, n)
    target : ndarray, shape (n,)
    epsilon : float
    """

    def __init__(self, cost, target, epsilon: float, tol: float = 1e-8,
                 max_iter: int = 50_000, debias: str | bool = "bregman",
                 newton_after: int | None = 50):
        if not epsilon > 0:
            raise TransportError("epsilon must be positive")
        if debias is True:
            debias = "full"
        elif debias is False:
            debias = "none"
        if debias not in ("bregman", "full", "none"):
            raise TransportError(f"unknown debiasing {debias!r}")
        self.C = np.asarray(cost, dtype=float)
        self.b = np.asarray(target, dtype=float)
        self.eps = float(epsilon)
        self.tol = tol
        self.max_iter = max_iter
        self.debias = debias
        self.newton_after = newton_after
        self.ib = np.flatnonzero(self.b > 0)
        self.M = self.b.sum()
        self._g = None     # target potential of OT(a, b), support of b
        self._faa = None   # symmetric potential of OT(a, a), whole grid
        self.ot_bb = 0.0
        self.f_b = np.zeros(self.b.size)
        if debias != "none":
            Cb = self.C[np.ix_(self.ib, self.ib)]
            sym, self.ot_bb, _, err = _symmetric_core(Cb, self.b[self.ib], self.eps, tol,
                                                      max_iter, None, newton_after)
            self._check(err)
            self.f_b, _ = _softmin(self.C[:, self.ib], sym, np.log(self.b[self.ib] / self.M),
                                   self.eps)
            self._g = sym

    def _check(self, err):
        if err > self.tol * self.M:
            raise TransportError(f"Sinkhorn did not converge: marginal error {err:.3e}")

    def evaluate(self, a, x_ref: int = 0, hessian: bool = False):
        """Value, normalised gradient, plan cost, marginal error and iterations.

        With ``hessian=True`` a sixth item is returned: the Hessian of
        ``OT_eps(., b)`` (equal to that of the Bregman variant) restricted
        to mass-preserving directions, as an ``(n, n)`` array.  It requires
        ``a > 0`` everywhere and is not available for ``debias="full"``.
        """
        a = np.asarray(a, dtype=float)
        a = a * (self.M / a.sum())
        C, b, ib, eps = self.C, self.b, self.ib, self.eps
        ia = np.flatnonzero(a > 0)
        Cab = C[np.ix_(ia, ib)]
        f, g, P, it, err = _sinkhorn_core(Cab, a[ia], b[ib], eps, self.tol, self.max_iter,
                                          self._g, self.newton_after)
        self._check(err)
        self._g = g
        log_b = np.log(b[ib] / self.M)
        phi, _ = _softmin(C[:, ib], g, log_b, eps)
        ot_ab = float(phi[ia] @ a[ia] + g @ b[ib])
        transport_cost = float(np.sum(Cab * P))
        value = ot_ab
        if self.debias == "bregman":
            value = ot_ab - self.ot_bb - float(self.f_b @ (a - b))
            phi = phi - self.f_b
        elif self.debias == "full":
            Caa = C[np.ix_(ia, ia)]
            f0 = None if self._faa is None else self._faa[ia]
            sym, ot_aa, it2, err2 = _symmetric_core(Caa, a[ia], eps, self.tol, self.max_iter,
                                                    f0, self.newton_after)
            self._check(err2)
            faa, _ = _softmin(C[:, ia], sym, np.log(a[ia] / self.M), eps)
            self._faa = faa
            value = ot_ab - 0.5 * (ot_aa + self.ot_bb)
            phi = phi - faa
            it += it2
            err = max(err, err2)
        out = (value, phi - phi[x_ref], transport_cost, float(err), it)
        if hessian:
            if self.debias == "full" or ia.size != a.size:
                raise TransportError("Hessian needs a strictly positive first marginal")
            out = out + (_ot_hessian(P, a, b[ib], eps),)
        return out


def _ot_hessian(P, a, b, eps):
    """Hessian of ``a -> OT_eps(a, b)`` on mass-preserving directions.

    Differentiating the scaling equations gives ``H = eps R L^+ R^T`` with
    ``R = P / a`` (row-stochastic) and ``L = diag(b) - P^T diag(1/a) P``,
    whose kernel is the constant vector.  The result is projected onto
    zero-sum vectors.
    """
    R = P / a[:, None]
    L = np.diag(b) - P.T @ R
    m = b.size
    L += np.full((m, m), b.mean() / m)
    H = eps * R @ np.linalg.solve(L, R.T)
    H = 0.5 * (H + H.T)
    n = a.size
    Pi = np.eye(n) - 1.0 / n
    return Pi @ H @ Pi


def default_epsilon(cost: np.ndarray, factor: float = 1e-2) -> float:
    """``factor * median`` of the off-diagonal squared distances."""
    C = np.asarray(cost, dtype=float)
    off = C[~np.eye(C.shape[0], dtype=bool)] if C.shape[0] == C.shape[1] else C.ravel()
    med = float(np.median(off)) if off.size else 1.0
    return factor * (med if med > 0 else 1.0)


def global_w2(costs, s, s_hat, mode: str = "exact", epsilon=None, **opts):
    """Global squared distance ``sum_i W_i(s_i, s_hat_i)^2``.

    Parameters
    ----------
    costs : CostBundle or sequence of ndarray
    s, s_hat : ndarray, shape (N+1, n)
    mode : {"exact", "entropic"}
    epsilon : float or sequence, optional
        Entropic regularisation per phase (default :func:`default_epsilon`).

    Returns
    -------
    total : float
    per_phase : ndarray
    """
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    mats = list(getattr(costs, "phase_costs", costs))
    if s.shape != s_hat.shape or s.shape[0] != len(mats):
        raise TransportError(f"phase count mismatch: {s.shape}, {s_hat.shape}, {len(mats)} costs")
    per = np.zeros(len(mats))
    for i, C in enumerate(mats):
        if np.array_equal(s[i], s_hat[i]):
            continue
        if mode == "exact":
            per[i] = exact_w2(C, s[i], s_hat[i]).value
        elif mode == "entropic":
            eps = default_epsilon(C) if epsilon is None else np.broadcast_to(epsilon, (len(mats),))[i]
            per[i] = sinkhorn_w2(C, s[i], s_hat[i], float(eps), **opts)[0].value
        else:
            raise TransportError(f"unknown mode {mode!r}")
    return float(per.sum()), per


def write_plan_csv(path, plan: np.ndarray, threshold: float = 0.0) -> None:
    """Write nonzero plan entries as ``from_cell,to_cell,mass`` rows."""
    plan = np.asarray(plan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        fh.write("# schema=1\n")
        w.writerow(["from_cell", "to_cell", "mass"])
        for x, y in zip(*np.nonzero(plan > threshold)):
            w.writerow([int(x), int(y), repr(float(plan[x, y]))])
