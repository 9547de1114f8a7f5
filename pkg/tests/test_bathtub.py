import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from multiphase_jko.bathtub import (BathtubError, BathtubInstance, brute_force_lp, dual_value,
                                    solve_bathtub, transport_primal_dual)


def random_instance(rng, n=None, k=None):
    n = n or int(rng.integers(1, 7))
    k = k or int(rng.integers(1, 4))
    F = rng.uniform(-1, 1, (k, n))
    omega = rng.uniform(0.1, 1.0, n)
    m = rng.dirichlet(np.ones(k)) * omega.sum()
    return BathtubInstance(F, omega, m)


def test_single_phase():
    inst = BathtubInstance([[1.0, -2.0, 0.5]], [1.0, 2.0, 3.0], [6.0])
    sol = solve_bathtub(inst)
    np.testing.assert_allclose(sol.s, [[1.0, 2.0, 3.0]])
    assert sol.primal_value == pytest.approx(-1.5)
    assert dual_value(inst, [7.0]) == pytest.approx(-1.5)


def test_zero_field_single_phase_dual():
    inst = BathtubInstance([[0.0, 0.0]], [1.0, 2.0], [3.0])
    assert dual_value(inst, [0.0]) == 0.0


def test_dominant_assignment():
    inst = BathtubInstance([[0.0, 10.0], [10.0, 0.0]], [1.0, 1.0], [1.0, 1.0])
    sol = solve_bathtub(inst)
    np.testing.assert_allclose(sol.s, [[1.0, 0.0], [0.0, 1.0]])
    assert sol.primal_value == pytest.approx(0.0)


def test_tie_instance_value_one():
    inst = BathtubInstance([[0.0, 0.0], [1.0, 3.0]], [1.0, 1.0], [1.0, 1.0])
    sol = solve_bathtub(inst)
    np.testing.assert_allclose(sol.s, [[0.0, 1.0], [1.0, 0.0]], atol=1e-14)
    assert sol.primal_value == pytest.approx(1.0)
    assert sol.dual_value == pytest.approx(1.0)
    # the certifying dual quoted for this instance
    assert dual_value(inst, [0.0, -1.0]) == pytest.approx(1.0)
    # vertex enumeration: s_1 = (t, 1 - t) is the whole polytope, vertices t in {0, 1}
    assert min(1.0 * t + 3.0 * (1 - t) for t in (0.0, 1.0)) == 1.0


def test_infeasible_totals_rejected():
    with pytest.raises(BathtubError):
        BathtubInstance([[0.0], [1.0]], [1.0], [1.0, 1.0])
    with pytest.raises(BathtubError):
        BathtubInstance([[np.nan]], [1.0], [1.0])
    with pytest.raises(BathtubError):
        BathtubInstance([[0.0, 1.0]], [1.0], [1.0])


def test_shift_invariance_and_weak_duality():
    rng = np.random.default_rng(0)
    for _ in range(50):
        inst = random_instance(rng)
        alpha = rng.standard_normal(inst.phase_count)
        assert dual_value(inst, alpha + 5.0) == pytest.approx(dual_value(inst, alpha), abs=1e-12)
        value, _ = brute_force_lp(inst)
        assert dual_value(inst, alpha) <= value + 1e-12


def vertex_enumeration(inst):
    """Minimum over basic feasible solutions of the transportation polytope."""
    F, omega, m = inst.F, inst.omega, inst.m
    k, n = F.shape
    A = np.vstack([np.kron(np.ones((1, k)), np.eye(n)), np.kron(np.eye(k), np.ones((1, n)))])
    rhs = np.concatenate([omega, m])
    rank = np.linalg.matrix_rank(A)
    best = np.inf
    for basis in itertools.combinations(range(k * n), rank):
        B = A[:, basis]
        if np.linalg.matrix_rank(B) < rank:
            continue
        x, *_ = np.linalg.lstsq(B, rhs, rcond=None)
        if np.all(x >= -1e-12) and np.allclose(B @ x, rhs, atol=1e-12):
            best = min(best, float(F.ravel()[list(basis)] @ x))
    return best


def test_brute_force_lp_matches_vertex_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(10):
        inst = random_instance(rng, n=int(rng.integers(2, 4)), k=int(rng.integers(2, 4)))
        assert brute_force_lp(inst)[0] == pytest.approx(vertex_enumeration(inst), abs=1e-10)


def test_brute_force_lp_size_cap():
    rng = np.random.default_rng(2)
    with pytest.raises(BathtubError):
        brute_force_lp(random_instance(rng, n=20, k=3))


def test_solution_feasible_and_certified():
    rng = np.random.default_rng(3)
    for _ in range(30):
        inst = random_instance(rng, n=int(rng.integers(3, 40)), k=int(rng.integers(2, 5)))
        sol = solve_bathtub(inst)
        np.testing.assert_allclose(sol.s.sum(axis=0), inst.omega, atol=1e-14)
        np.testing.assert_allclose(sol.s.sum(axis=1), inst.m, atol=1e-13)
        assert sol.s.min() >= 0
        assert sol.alpha.min() == 0.0
        G = inst.F + sol.alpha[:, None]
        np.testing.assert_allclose(sol.lam, G.min(axis=0))
        assert abs(sol.gap) <= 1e-9 * (1 + np.abs(inst.F).max() * inst.omega.sum())


def test_warm_start_reaches_same_value():
    rng = np.random.default_rng(4)
    inst = random_instance(rng, n=30, k=3)
    cold = solve_bathtub(inst)
    warm = solve_bathtub(inst, alpha0=cold.alpha + 0.01 * rng.standard_normal(3))
    assert warm.primal_value == pytest.approx(cold.primal_value, rel=1e-12, abs=1e-12)


def test_transport_primal_dual_against_linprog():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, m = rng.integers(2, 9, size=2)
        C = rng.random((n, m))
        a = rng.random(n)
        b = rng.random(m)
        b *= a.sum() / b.sum()
        lp = transport_primal_dual(C, a, b)
        A = np.vstack([np.kron(np.eye(n), np.ones((1, m))), np.kron(np.ones((1, n)), np.eye(m))])
        ref = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), method="highs").fun
        assert lp.primal == pytest.approx(ref, rel=1e-10)
        assert lp.dual == pytest.approx(ref, rel=1e-10)
        assert np.all(lp.u[:, None] + lp.v[None, :] <= C + 1e-12)
        on = lp.plan > 1e-12
        np.testing.assert_allclose((lp.u[:, None] + lp.v[None, :])[on], C[on], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_primal_equals_reference(seed):
    inst = random_instance(np.random.default_rng(seed))
    sol = solve_bathtub(inst)
    ref, _ = brute_force_lp(inst)
    scale = 1.0 + abs(ref)
    assert abs(sol.primal_value - ref) <= 1e-8 * scale
    assert abs(sol.dual_value - ref) <= 1e-8 * scale


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_equality_conditions_on_exact_support(seed):
    inst = random_instance(np.random.default_rng(seed))
    sol = solve_bathtub(inst)
    G = inst.F + sol.alpha[:, None]
    on = sol.s > 0
    assert np.abs(G - sol.lam[None, :])[on].max() <= 1e-7
