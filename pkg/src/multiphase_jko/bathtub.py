"""Multicomponent bathtub problems and the exact transportation solver behind them.

The bathtub problem

    minimise  sum_{i,x} F_i(x) s_i(x)
    subject to  s >= 0,  sum_i s_i(x) = omega(x),  sum_x s_i(x) = m_i

is a transportation problem from cells (supply ``omega``) to phases
(demand ``m``).  Its concave dual is

    J(alpha) = sum_x lambda_alpha(x) omega(x) - sum_i alpha_i m_i,
    lambda_alpha(x) = min_j (F_j(x) + alpha_j).

:func:`solve_bathtub` warm-starts ``alpha`` with Polyak supergradient ascent
on ``J`` and finishes with :func:`transport_primal_dual`, an exact dual
ascent whose inner step is a max-flow over the tight (argmin) edges.  The
max-flow is precisely the tie resolution that turns an optimal ``alpha``
into an allocation meeting the mass targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BathtubError(ValueError):
    """Infeasible data or a failed optimality certificate."""


@dataclass
class TransportLP:
    """Solution of ``min <C, P>`` over plans with marginals ``(a, b)``.

    ``u`` and ``v`` are dual potentials with ``u_x + v_y <= C_xy`` everywhere
    and equality wherever ``P_xy > 0``.
    """

    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    primal: float
    dual: float
    rounds: int
    augmentations: int
    residual: float


def _search(adm, P, ra, rb, tol):
    """Breadth-first search of the tight-edge network from rows with supply left.

    Forward arcs are admissible row->column edges, backward arcs are
    column->row edges carrying flow.  The whole reachable set is explored.
    Returns ``(open_columns, row_parent, col_parent, row_seen, col_seen)``
    where ``open_columns`` are reached columns with demand left, in
    discovery order (empty when none is reachable).
    """
    n, m = adm.shape
    row_parent = np.full(n, -2, dtype=np.int64)
    col_parent = np.full(m, -2, dtype=np.int64)
    row_seen = ra > tol
    col_seen = np.zeros(m, dtype=bool)
    row_parent[row_seen] = -1
    front = np.flatnonzero(row_seen)
    found = []
    while front.size:
        sub = adm[front]
        new_cols = np.flatnonzero(sub.any(axis=0) & ~col_seen)
        if new_cols.size == 0:
            break
        col_parent[new_cols] = front[np.argmax(sub[:, new_cols], axis=0)]
        col_seen[new_cols] = True
        found.append(new_cols[rb[new_cols] > tol])
        back = P[:, new_cols] > tol
        new_rows = np.flatnonzero(back.any(axis=1) & ~row_seen)
        row_parent[new_rows] = new_cols[np.argmax(back[new_rows], axis=1)]
        row_seen[new_rows] = True
        front = new_rows
    open_cols = np.concatenate(found) if found else np.zeros(0, dtype=np.int64)
    return open_cols, row_parent, col_parent, row_seen, col_seen


def transport_primal_dual(
    cost: np.ndarray,
    supply: np.ndarray,
    demand: np.ndarray,
    v0: np.ndarray | None = None,
    mass_tol: float | None = None,
    cost_tol: float | None = None,
    max_rounds: int = 100_000,
) -> TransportLP:
    """Exact solution of a balanced transportation problem.

    Primal-dual (Hungarian-type) method: the duals stay feasible, flow is
    only routed on edges with zero reduced cost, and when no augmenting path
    exists the duals of the reachable set are raised by the smallest reduced
    cost leaving it.

    Parameters
    ----------
    cost : ndarray, shape (n, m)
    supply : ndarray, shape (n,)
    demand : ndarray, shape (m,)
        Nonnegative with equal totals.
    v0 : ndarray, optional
        Column potentials to warm-start from (e.g. the previous solve).
    mass_tol, cost_tol : float, optional
        Absolute tolerances for "positive flow" and "tight edge"; default
        to ``1e-13 * total`` and ``1e-12 * (1 + max|C|)``.

    Returns
    -------
    TransportLP
    """
    C = np.asarray(cost, dtype=float)
    a = np.asarray(supply, dtype=float)
    b = np.asarray(demand, dtype=float)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise BathtubError("marginal shapes do not match the cost matrix")
    if np.any(a < 0) or np.any(b < 0):
        raise BathtubError("marginals must be nonnegative")
    total = a.sum()
    if abs(total - b.sum()) > 1e-9 * max(total, b.sum(), 1e-300):
        raise BathtubError(f"unbalanced totals {total!r} vs {b.sum()!r}")
    if mass_tol is None:
        mass_tol = 1e-13 * total
    if cost_tol is None:
        cost_tol = 1e-12 * (1.0 + float(np.abs(C).max(initial=0.0)))

    v = np.zeros(m) if v0 is None else np.array(v0, dtype=float)
    u = (C - v).min(axis=1)
    P = np.zeros((n, m))
    ra, rb = a.copy(), b.copy()
    rounds = augmentations = 0
    while ra.max(initial=0.0) > mass_tol and rb.max(initial=0.0) > mass_tol:
        rounds += 1
        if rounds > max_rounds:
            raise BathtubError("transportation solver exceeded its round limit")
        R = C - u[:, None] - v[None, :]
        adm = R <= cost_tol
        while True:
            ends, rpar, cpar, rseen, cseen = _search(adm, P, ra, rb, mass_tol)
            if ends.size == 0:
                break
            # augment along every tree path that still has capacity
            for end in ends:
                if rb[end] <= mass_tol:
                    continue
                fwd, bwd = [], []
                y = int(end)
                while True:
                    x = int(cpar[y])
                    fwd.append((x, y))
                    if rpar[x] == -1:
                        start = x
                        break
                    y = int(rpar[x])
                    bwd.append((x, y))
                delta = min(ra[start], rb[end])
                for x, y in bwd:
                    delta = min(delta, P[x, y])
                if delta <= mass_tol:
                    continue
                for x, y in fwd:
                    P[x, y] += delta
                for x, y in bwd:
                    P[x, y] -= delta
                ra[start] -= delta
                rb[end] -= delta
                augmentations += 1
            if ra.max() <= mass_tol or rb.max() <= mass_tol:
                break
        if ra.max() <= mass_tol or rb.max() <= mass_tol:
            break
        block = R[np.ix_(rseen, ~cseen)]
        if block.size == 0:
            raise BathtubError("transportation problem is infeasible")
        theta = block.min()
        u[rseen] += theta
        v[cseen] -= theta
    # c-transforms tighten potentials on rows/columns without mass
    u = (C - v).min(axis=1)
    v = (C - u[:, None]).min(axis=0)
    np.clip(P, 0.0, None, out=P)
    return TransportLP(
        plan=P,
        u=u,
        v=v,
        primal=float(np.sum(C * P)),
        dual=float(u @ a + v @ b),
        rounds=rounds,
        augmentations=augmentations,
        residual=float(ra.sum()),
    )


@dataclass
class BathtubInstance:
    """Fields ``F`` (phases x cells), capacities ``omega`` and masses ``m``."""

    F: np.ndarray
    omega: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1)
        self.m = np.asarray(self.m, dtype=float).reshape(-1)
        if self.F.shape != (self.m.size, self.omega.size):
            raise BathtubError(
                f"F has shape {self.F.shape}, expected ({self.m.size}, {self.omega.size})")
        if not np.all(np.isfinite(self.F)):
            raise BathtubError("F must be finite")
        if np.any(self.omega < 0) or np.any(self.m < 0):
            raise BathtubError("capacities and masses must be nonnegative")
        tot = self.omega.sum()
        if abs(tot - self.m.sum()) > 1e-9 * max(tot, 1e-300):
            raise BathtubError(f"infeasible totals: sum omega = {tot!r}, sum m = {self.m.sum()!r}")

    @property
    def phase_count(self) -> int:
        return self.m.size

    @property
    def cell_count(self) -> int:
        return self.omega.size


@dataclass
class BathtubSolution:
    s: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray
    primal_value: float
    dual_value: float
    tie_cells: list[int] = field(default_factory=list)
    ascent_iterations: int = 0

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_value


def dual_value(instance: BathtubInstance, alpha) -> float:
    """Concave dual ``J(alpha)``; invariant under ``alpha -> alpha + c``."""
    alpha = np.asarray(alpha, dtype=float)
    lam = (instance.F + alpha[:, None]).min(axis=0)
    return float(lam @ instance.omega - alpha @ instance.m)


def _supergradient(instance: BathtubInstance, alpha: np.ndarray):
    G = instance.F + alpha[:, None]
    arg = np.argmin(G, axis=0)
    lam = G[arg, np.arange(G.shape[1])]
    filled = np.bincount(arg, weights=instance.omega, minlength=instance.phase_count)
    return float(lam @ instance.omega - alpha @ instance.m), filled - instance.m


def _polyak_ascent(instance: BathtubInstance, alpha: np.ndarray, iterations: int):
    """Supergradient ascent on J with Polyak steps toward an upper bound.

    The target is the primal value of the proportional allocation, so the
    steps are conservative; the best iterate is returned.
    """
    share = instance.m / max(instance.m.sum(), 1e-300)
    upper = float(np.sum(instance.F * share[:, None] * instance.omega[None, :]))
    best_alpha, (best_J, g) = alpha.copy(), _supergradient(instance, alpha)
    J = best_J
    for _ in range(iterations):
        gg = float(g @ g)
        if gg == 0.0:
            break
        alpha = alpha + max(upper - J, 1e-12 * (1 + abs(J))) / gg * g
        alpha -= alpha.min()
        J, g = _supergradient(instance, alpha)
        if J > best_J:
            best_alpha, best_J = alpha.copy(), J
        upper = max(best_J, upper)
    return best_alpha


def solve_bathtub(
    instance: BathtubInstance,
    alpha0: np.ndarray | None = None,
    tol: float | None = None,
    ascent_iterations: int = 20,
    membership_tol: float | None = None,
) -> BathtubSolution:
    """Minimise ``sum F_i s_i`` over saturated allocations with fixed masses.

    Parameters
    ----------
    instance : BathtubInstance
    alpha0 : ndarray, optional
        Warm start for the multipliers (e.g. from the previous call).
    tol : float, optional
        Allowed duality gap; default ``1e-9 (1 + max|F| sum omega)``.
    ascent_iterations : int
        Polyak steps before the exact finish.
    membership_tol : float, optional
        Tolerance on the equality conditions ``F_i + alpha_i = lambda`` on
        the support; default ``1e-7 (1 + max|F|)``.

    Returns
    -------
    BathtubSolution
        ``alpha`` normalised to ``min alpha = 0`` and ``lam = min_j (F_j + alpha_j)``.
    """
    F, omega, m = instance.F, instance.omega, instance.m
    n_ph, n = F.shape
    fmax = float(np.abs(F).max(initial=0.0))
    if tol is None:
        tol = 1e-9 * (1.0 + fmax * omega.sum())
    if membership_tol is None:
        membership_tol = 1e-7 * (1.0 + fmax)
    if n_ph == 1:
        s = omega[None, :].copy()
        value = float(F[0] @ omega)
        return BathtubSolution(s, np.zeros(1), F[0].copy(), value, value)

    alpha = np.zeros(n_ph) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()
    alpha -= alpha.min()
    if ascent_iterations:
        alpha = _polyak_ascent(instance, alpha, ascent_iterations)
    # cells are rows with supply omega, phases are columns with demand m and
    # potential v = -alpha, so that u = lambda at the optimum
    lp = transport_primal_dual(F.T, omega, m, v0=-alpha)
    alpha = -lp.v
    alpha -= alpha.min()
    s = lp.plan.T.copy()
    # mop up round-off so that saturation and masses hold to machine precision
    s = _polish_allocation(s, omega, m, F + alpha[:, None])
    G = F + alpha[:, None]
    lam = G.min(axis=0)
    primal = float(np.sum(F * s))
    dual = dual_value(instance, alpha)
    if abs(primal - dual) > tol:
        raise BathtubError(f"duality gap {primal - dual:.3e} exceeds tolerance {tol:.3e}")
    support = s > 1e-12 * max(omega.max(initial=0.0), 1e-300)
    viol = np.abs(G - lam[None, :])[support]
    if viol.size and viol.max() > membership_tol:
        raise BathtubError(f"equality condition violated by {viol.max():.3e}")
    ties = np.flatnonzero(np.sum(G <= lam[None, :] + membership_tol, axis=0) > 1).tolist()
    return BathtubSolution(s, alpha, lam, primal, dual, ties)


def _polish_allocation(s, omega, m, G):
    """Remove the round-off left by the exact solver.

    Row (cell) deficits are assigned to the cheapest phase with remaining
    mass deficit; this touches entries of order ``mass_tol`` only.
    """
    s = np.clip(s, 0.0, None)
    cell_def = omega - s.sum(axis=0)
    phase_def = m - s.sum(axis=1)
    if np.abs(cell_def).max(initial=0.0) == 0.0 and np.abs(phase_def).max(initial=0.0) == 0.0:
        return s
    for x in np.argsort(-np.abs(cell_def)):
        d = cell_def[x]
        if d == 0.0:
            continue
        if d > 0:
            order = np.argsort(G[:, x])
            lam = G.min(axis=0)
            tie = np.abs(G - lam[None, :]) <= 1e-12 * (1.0 + np.abs(G).max())
            for i in order:
                if phase_def[i] <= 0:
                    continue
                take = min(d, phase_def[i])
                if tie[i, x]:
                    s[i, x] += take
                else:
                    # route through a cell y where phase i is optimal: a phase
                    # i0 optimal at x gives up mass at y to phase i
                    for i0 in np.flatnonzero(tie[:, x]):
                        ys = np.flatnonzero(tie[i] & tie[i0] & (s[i0] >= take))
                        if ys.size:
                            y = ys[np.argmax(s[i0, ys])]
                            s[i0, x] += take
                            s[i0, y] -= take
                            s[i, y] += take
                            break
                    else:
                        s[i, x] += take
                phase_def[i] -= take
                d -= take
                if d <= 0:
                    break
            if d > 0:
                s[order[0], x] += d
        else:
            order = np.argsort(-s[:, x])
            for i in order:
                take = min(-d, s[i, x])
                s[i, x] -= take
                phase_def[i] += take
                d += take
                if d >= 0:
                    break
    return s


def brute_force_lp(instance: BathtubInstance, max_variables: int = 30):
    """Reference optimum of the bathtub linear program by a dense LP solve.

    Independent of the dual-ascent machinery: the equality-constrained LP
    is handed to HiGHS through :func:`scipy.optimize.linprog`.

    Returns
    -------
    value : float
    s : ndarray, shape (phases, cells)
    """
    from scipy.optimize import linprog

    F, omega, m = instance.F, instance.omega, instance.m
    n_ph, n = F.shape
    if n_ph * n > max_variables:
        raise BathtubError(f"{n_ph * n} variables exceed the cap of {max_variables}")
    # variable index i * n + x
    A_cell = np.kron(np.ones((1, n_ph)), np.eye(n))
    A_phase = np.kron(np.eye(n_ph), np.ones((1, n)))
    res = linprog(
        F.ravel(),
        A_eq=np.vstack([A_cell, A_phase]),
        b_eq=np.concatenate([omega, m]),
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise BathtubError(f"reference LP failed: {res.message}")
    return float(res.fun), res.x.reshape(n_ph, n)
