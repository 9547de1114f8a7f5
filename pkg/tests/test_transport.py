import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from multiphase_jko.geometry import build_costs, build_grid, isotropic_medium, random_heterogeneous_medium
from multiphase_jko.transport import (SinkhornDivergence, TransportError, default_epsilon,
                                      exact_w2, global_w2, sinkhorn_w2, write_plan_csv)


def dense_lp(C, a, b):
    n, m = C.shape
    A = np.vstack([np.kron(np.eye(n), np.ones((1, m))), np.kron(np.ones((1, n)), np.eye(m))])
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def random_instance(rng, n):
    med = random_heterogeneous_medium(build_grid(n), [1.0], seed=int(rng.integers(1 << 30)))
    C = build_costs(med)[0]
    a = rng.random(n)
    b = rng.random(n)
    a[rng.random(n) < 0.3] = 0.0
    a[0] += 0.1
    b *= a.sum() / b.sum()
    return C, a, b


def test_identical_marginals_zero():
    med = isotropic_medium(build_grid(6), 0.5, 1.0, [1.0])
    C = build_costs(med)[0]
    a = np.linspace(1, 2, 6)
    r = exact_w2(C, a, a)
    assert r.value == 0.0
    np.testing.assert_allclose(r.plan, np.diag(a))
    np.testing.assert_allclose(r.phi, 0.0, atol=1e-12)


def test_two_cell_dirac():
    C = 2.0 * np.array([[0.0, 1.0], [1.0, 0.0]])
    r = exact_w2(C, [1.0, 0.0], [0.0, 1.0])
    assert r.value == pytest.approx(2.0)
    eps = 1e-3 * C.max()
    s, _ = sinkhorn_w2(C, [1.0, 0.0], [0.0, 1.0], eps)
    assert s.value == pytest.approx(2.0, rel=1e-2)


def test_exact_matches_dense_lp():
    rng = np.random.default_rng(5)
    for _ in range(10):
        C, a, b = random_instance(rng, 5)
        assert exact_w2(C, a, b).value == pytest.approx(dense_lp(C, a, b), rel=1e-9, abs=1e-14)


def test_exact_potentials_certify_optimality():
    rng = np.random.default_rng(6)
    C, a, b = random_instance(rng, 9)
    r = exact_w2(C, a, b, x_ref=3)
    assert r.phi[3] == 0.0
    assert np.all(r.phi[:, None] + r.psi[None, :] <= C + 1e-12)
    assert r.dual_value == pytest.approx(r.value, rel=1e-10)
    assert r.marginal_error < 1e-12


def test_unbalanced_and_negative_rejected():
    C = np.zeros((2, 2))
    with pytest.raises(TransportError):
        exact_w2(C, [1.0, 0.0], [0.5, 0.0])
    with pytest.raises(TransportError):
        exact_w2(C, [1.0, -0.5], [0.5, 0.0])
    with pytest.raises(TransportError):
        sinkhorn_w2(C, [1.0, 0.0], [0.0, 1.0], 0.0)


def test_sinkhorn_identical_marginals_near_zero():
    med = isotropic_medium(build_grid(8), 0.5, 1.0, [1.0])
    C = build_costs(med)[0]
    a = np.linspace(1, 2, 8) / 8
    vals = [sinkhorn_w2(C, a, a, f * np.median(C))[0] for f in (1e-1, 1e-2, 1e-3)]
    assert vals[0].value > vals[1].value > vals[2].value
    assert vals[2].value < 1e-3 * np.median(C) * a.sum()
    # potentials vanish at the rate of eps
    spread = [np.abs(v.phi).max() / v.epsilon for v in vals]
    assert max(spread) < 1.0
    assert np.abs(vals[0].phi).max() > np.abs(vals[1].phi).max() > np.abs(vals[2].phi).max()


def test_sinkhorn_epsilon_sweep_on_eight_cells():
    rng = np.random.default_rng(7)
    C, a, b = random_instance(rng, 8)
    exact = exact_w2(C, a, b).value
    med = np.median(C[~np.eye(8, dtype=bool)])
    errs = [abs(sinkhorn_w2(C, a, b, f * med)[0].value - exact) for f in (0.1, 0.05, 0.025, 0.0125)]
    for e0, e1 in zip(errs, errs[1:]):
        assert e1 <= e0 * 1.05


def test_sinkhorn_potential_is_first_variation():
    rng = np.random.default_rng(8)
    C, a, b = random_instance(rng, 6)
    a = a + 0.05
    b = b * a.sum() / b.sum()
    eps = 0.05 * np.median(C)
    r, _ = sinkhorn_w2(C, a, b, eps, tol=1e-13)

    def ot(v):
        # OT_eps as a function of a with b rescaled to balance
        return sinkhorn_w2(C, v, b * v.sum() / a.sum(), eps, tol=1e-13)[0].dual_value

    d = rng.standard_normal(6)
    d -= d.mean()
    h = 1e-6
    fd = (ot(a + h * d) - ot(a - h * d)) / (2 * h)
    assert fd == pytest.approx(r.phi @ d, rel=1e-5, abs=1e-9)


def independent_sinkhorn(C, a, b, eps, iters=20000):
    """Plain alternating scaling in the log domain, written independently."""
    M = a.sum()
    la, lb = np.log(a / M), np.log(b / M)
    g = np.zeros_like(b)
    for _ in range(iters):
        f = -eps * np.logaddexp.reduce((g[None, :] - C) / eps + lb[None, :], axis=1)
        g = -eps * np.logaddexp.reduce((f[:, None] - C) / eps + la[:, None], axis=0)
    P = np.exp((f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]) * M
    return f @ a + g @ b, P


def test_divergence_value_matches_independent_scaling():
    rng = np.random.default_rng(9)
    n = 6
    med = isotropic_medium(build_grid(n), 0.5, 1.0, [1.0])
    C = build_costs(med)[0]
    a = rng.random(n) + 0.1
    b = rng.random(n) + 0.1
    b *= a.sum() / b.sum()
    eps = 0.2 * np.median(C)
    div = SinkhornDivergence(C, b, eps, tol=1e-12, debias="none")
    val, *_ = div.evaluate(a)
    ref, P = independent_sinkhorn(C, a, b, eps, 5000)
    assert val == pytest.approx(ref, rel=1e-8)
    np.testing.assert_allclose(P.sum(0), b, rtol=1e-8)


def test_bregman_divergence_properties():
    rng = np.random.default_rng(10)
    n = 7
    C = build_costs(random_heterogeneous_medium(build_grid(n), [1.0], seed=2))[0]
    b = rng.random(n) + 0.2
    eps = default_epsilon(C, 0.05)
    div = SinkhornDivergence(C, b, eps, tol=1e-12)
    v0, g0, *_ = div.evaluate(b)
    assert abs(v0) < 1e-10
    np.testing.assert_allclose(g0, 0.0, atol=1e-8)
    for _ in range(5):
        a = rng.random(n) + 0.05
        a *= b.sum() / a.sum()
        v, g, *_ = div.evaluate(a)
        assert v >= -1e-12


def test_divergence_gradient_and_hessian_by_finite_differences():
    rng = np.random.default_rng(11)
    n = 6
    C = build_costs(random_heterogeneous_medium(build_grid(n), [1.0], seed=4))[0]
    b = rng.random(n) + 0.2
    a = rng.random(n) + 0.2
    a *= b.sum() / a.sum()
    eps = default_epsilon(C, 0.1)
    div = SinkhornDivergence(C, b, eps, tol=1e-13)
    v, g, _, _, _, H = div.evaluate(a, hessian=True)
    d = rng.standard_normal(n)
    d -= d.mean()
    h = 1e-5

    def val(x):
        return div.evaluate(x)[0]

    def grad(x):
        return div.evaluate(x)[1]

    assert (val(a + h * d) - val(a - h * d)) / (2 * h) == pytest.approx(g @ d, rel=1e-6)
    dg = (grad(a + h * d) - grad(a - h * d)) / (2 * h)
    dg -= dg.mean()
    np.testing.assert_allclose(H @ d, dg, rtol=1e-4, atol=1e-6 * np.abs(dg).max())
    # positive semidefinite on zero-sum directions
    assert np.linalg.eigvalsh(H).min() > -1e-10 * np.abs(H).max()


def test_hessian_needs_positive_marginal():
    C = build_costs(isotropic_medium(build_grid(4), 0.5, 1.0, [1.0]))[0]
    div = SinkhornDivergence(C, np.ones(4), 0.1)
    with pytest.raises(TransportError):
        div.evaluate(np.array([2.0, 0.0, 1.0, 1.0]), hessian=True)


def test_global_w2_additivity_and_homogeneous_scaling():
    rng = np.random.default_rng(12)
    g = build_grid((3, 4))
    med = isotropic_medium(g, 0.5, 2.0, [1.0, 3.0])
    costs = build_costs(med)
    s = rng.random((2, 12))
    t = rng.random((2, 12))
    t *= (s.sum(1) / t.sum(1))[:, None]
    assert global_w2(costs, s, s)[0] == 0.0
    only0 = np.stack([t[0], s[1]])
    tot, per = global_w2(costs, s, only0)
    assert per[1] == 0.0 and tot == pytest.approx(exact_w2(costs[0], s[0], t[0]).value)
    _, per = global_w2(costs, s, t)
    for i, mu in enumerate((1.0, 3.0)):
        ref = exact_w2(g.reference_cost, s[i], t[i]).value
        assert per[i] == pytest.approx(mu / 2.0 * ref, rel=1e-9)


def test_write_plan_csv(tmp_path):
    P = np.array([[0.5, 0.0], [0.25, 0.25]])
    path = tmp_path / "plan.csv"
    write_plan_csv(path, P)
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=1"
    assert lines[1] == "from_cell,to_cell,mass"
    assert len(lines) == 5


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_exact_w2_symmetric_and_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    C, a, b = random_instance(rng, n)
    ab = exact_w2(C, a, b).value
    ba = exact_w2(C, b, a).value
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-9, abs=1e-14)
