import numpy as np
import pytest
from scipy.optimize import minimize

from multiphase_jko.energy import CapillaryModel, energy_floor, total_energy
from multiphase_jko.geometry import build_costs, build_grid, gravity_column, isotropic_medium
from multiphase_jko.jko import (JKOError, JKOOptions, Trajectory, assemble_F, jko_step,
                                minimize_energy, reconstruct_pressures, run_simulation)
from multiphase_jko.transport import SinkhornDivergence, exact_w2


def column(n=8, strength=0.5):
    med = gravity_column(n, densities=(1.0, 2.0), viscosity=(1.0, 2.0), porosity=0.5)
    model = CapillaryModel.scaled_identity(n, 1, strength)
    return med, model


def stacked(med, heavy_top=True):
    cap = med.pore_volume
    z = med.grid.centers[:, 0]
    s1 = np.where(z > 0.5 if heavy_top else z < 0.5, cap, 0.0)
    return np.stack([cap - s1, s1])


def random_state(med, rng):
    cap = med.pore_volume
    s1 = rng.uniform(0.1, 0.9, cap.size) * cap
    return np.stack([cap - s1, s1])


def test_step_preserves_constraints_and_identities():
    med, model = column()
    s0 = random_state(med, np.random.default_rng(0))
    rec = jko_step(s0, 0.05, med, model)
    cap = med.pore_volume
    np.testing.assert_allclose(rec.s_new.sum(axis=0), cap, atol=1e-14)
    np.testing.assert_allclose(rec.s_new.sum(axis=1), s0.sum(axis=1), rtol=1e-12)
    assert rec.s_new.min() >= 0
    assert rec.converged
    # capillary relation holds algebraically
    scale = np.abs(rec.p).max() + np.abs(rec.pi).max()
    assert np.abs((rec.p[1] - rec.p[0]) - rec.pi[1]).max() <= 4 * np.finfo(float).eps * scale
    # bathtub equality conditions on the support
    G = rec.F + rec.alpha[:, None]
    on = rec.s_new > 1e-10 * cap.max()
    assert np.abs(G - rec.lam[None, :])[on].max() < 1e-6 * (1 + np.abs(rec.F).max())
    assert rec.energy_after <= rec.energy_before + rec.slack
    assert rec.objective <= rec.energy_before + 1e-12


def test_assemble_F_and_reconstruct():
    med, model = column(4)
    s = random_state(med, np.random.default_rng(1))
    phi = np.random.default_rng(2).standard_normal(s.shape)
    F = assemble_F(s, 0.1, phi, model, med)
    vol = med.grid.cell_volume
    np.testing.assert_allclose(F[0], phi[0] / 0.1 + med.potential[0])
    np.testing.assert_allclose(F[1], phi[1] / 0.1 + 0.5 * s[1] / vol + med.potential[1])
    lam = F.min(axis=0)
    h, p = reconstruct_pressures(F, phi, np.zeros(2), lam, med, 0.1)
    assert abs(h[0].mean()) < 1e-14
    np.testing.assert_allclose(p, h - med.potential)
    with pytest.raises(JKOError):
        assemble_F(s, 0.1, None, model, med)
    with pytest.raises(JKOError):
        assemble_F(s, 0.1, phi[:, :2], model, med)


def test_newton_and_frank_wolfe_agree():
    med, model = column(8)
    s0 = random_state(med, np.random.default_rng(3))
    costs = build_costs(med)
    newton = jko_step(s0, 0.05, med, model, costs,
                      JKOOptions(inner="newton", fw_tol=1e-9, sinkhorn_tol=1e-10))
    fw = jko_step(s0, 0.05, med, model, costs,
                  JKOOptions(inner="frank-wolfe", fw_tol=1e-6, fw_max_iter=1000, sinkhorn_tol=1e-10))
    assert newton.converged
    scale = 1 + abs(newton.objective - energy_floor(model, med))
    assert fw.objective >= newton.objective - 1e-8 * scale
    assert fw.objective - newton.objective <= fw.fw_gap + 1e-8 * scale


@pytest.mark.filterwarnings("ignore:Values in x were outside bounds")
def test_entropic_step_matches_slsqp():
    n = 6
    med, model = column(n)
    s0 = random_state(med, np.random.default_rng(4))
    costs = build_costs(med)
    tau = 0.1
    opts = JKOOptions(fw_tol=1e-9, sinkhorn_tol=1e-10)
    rec = jko_step(s0, tau, med, model, costs, opts)
    divs = [SinkhornDivergence(costs[i], s0[i], rec.epsilon[i], tol=1e-9) for i in range(2)]
    cap = med.pore_volume
    vol = med.grid.cell_volume
    m1 = s0[1].sum()

    def objective(x):
        s = np.stack([cap - x, x])
        out = [divs[i].evaluate(s[i]) for i in range(2)]
        value = sum(o[0] for o in out) / (2 * tau) + total_energy(model, med, s, check=False)
        # d/dx with s_0 = cap - x; constant shifts drop out on the mass constraint
        grad = (out[1][1] - out[0][1]) / (2 * tau) + 0.5 * x / vol
        grad += med.potential[1] - med.potential[0]
        return value, grad

    res = minimize(objective, s0[1], jac=True, method="SLSQP",
                   bounds=[(1e-9, c - 1e-9) for c in cap],
                   constraints=[{"type": "eq", "fun": lambda x: x.sum() - m1}],
                   options={"ftol": 1e-14, "maxiter": 500})
    assert rec.objective == pytest.approx(res.fun, rel=1e-6)
    assert rec.objective <= res.fun + 1e-9 * abs(res.fun)


def test_exact_mode_equals_entropic_limit():
    med, model = column(8)
    s0 = random_state(med, np.random.default_rng(5))
    costs = build_costs(med)
    ex = jko_step(s0, 0.05, med, model, costs, JKOOptions(mode="exact", fw_tol=1e-10,
                                                          fw_max_iter=20000))
    assert ex.converged
    # objective reported equals the transport plus energy of the returned state
    w2 = [exact_w2(costs[i], ex.s_new[i], s0[i]).value for i in range(2)]
    assert ex.objective == pytest.approx(sum(w2) / 0.1 + ex.energy_after, rel=1e-8)
    ent = [jko_step(s0, 0.05, med, model, costs, JKOOptions(epsilon_factor=f)).objective
           for f in (1e-1, 1e-2)]
    assert abs(ent[1] - ex.objective) < abs(ent[0] - ex.objective)


def test_minimizer_is_fixed_point():
    med, model = column(8)
    masses = stacked(med).sum(axis=1)
    s_star, E, gap = minimize_energy(model, med, masses)
    rec = jko_step(s_star, 0.1, med, model, options=JKOOptions(mode="exact"))
    assert np.abs(rec.s_new - s_star).max() < 1e-8
    assert rec.energy_after == pytest.approx(E, abs=1e-12)


def test_minimize_energy_matches_slsqp():
    med, model = column(10)
    cap = med.pore_volume
    masses = np.array([0.3, 0.2]) * cap.sum() / 0.5
    s, E, gap = minimize_energy(model, med, masses)
    res = minimize(lambda x: total_energy(model, med, np.stack([cap - x, x]), check=False),
                   np.full(10, masses[1] / 10), method="SLSQP", bounds=[(0, c) for c in cap],
                   constraints=[{"type": "eq", "fun": lambda x: x.sum() - masses[1]}],
                   options={"ftol": 1e-15, "maxiter": 500})
    assert E == pytest.approx(res.fun, rel=1e-8)
    assert E <= res.fun + 1e-12


def test_single_phase_step_is_trivial():
    med = isotropic_medium(build_grid(5), 0.5, 1.0, [1.0])
    model = CapillaryModel.zero(5, 0)
    s = med.pore_volume[None, :]
    rec = jko_step(s, 0.1, med, model)
    np.testing.assert_array_equal(rec.s_new, s)
    assert rec.w2[0] == 0.0 and rec.converged


def test_no_potential_no_capillarity_is_stationary():
    med = isotropic_medium(build_grid(6), 0.5, 1.0, [1.0, 1.0])
    model = CapillaryModel.zero(6, 1)
    s0 = random_state(med, np.random.default_rng(6))
    rec = jko_step(s0, 0.1, med, model, options=JKOOptions(mode="exact"))
    np.testing.assert_allclose(rec.s_new, s0, atol=1e-12)
    assert rec.w2.sum() == pytest.approx(0.0, abs=1e-14)


def test_errors():
    med, model = column(4)
    s0 = stacked(med)
    with pytest.raises(JKOError):
        jko_step(s0, 0.0, med, model)
    with pytest.raises(JKOError):
        jko_step(s0, 0.1, med, model, options=JKOOptions(mode="bogus"))
    with pytest.raises(JKOError):
        jko_step(s0, 0.1, med, model, options=JKOOptions(inner="bogus"))
    with pytest.raises(JKOError):
        jko_step(s0, 0.1, med, model, options=JKOOptions(epsilon=-1.0))
    with pytest.raises(ValueError):
        jko_step(s0[:, :3], 0.1, med, model)


def test_positivity_regularization_recorded():
    med, model = column(6)
    s0 = stacked(med)
    rec = jko_step(s0, 0.1, med, model, options=JKOOptions(positivity_delta=1e-4))
    assert rec.regularization_delta > 0
    assert rec.s_prev.min() > 0


def test_run_simulation_zero_horizon_and_interpolation():
    med, model = column(4)
    s0 = stacked(med)
    traj = run_simulation(s0, 0.1, 0.0, med, model)
    assert len(traj.states) == 1 and not traj.records
    traj = run_simulation(s0, 0.1, 0.3, med, model)
    assert len(traj.records) == 3
    np.testing.assert_allclose(traj.times, [0.0, 0.1, 0.2, 0.3])
    assert traj.state_at(0.0) is traj.states[0]
    assert traj.state_at(0.05) is traj.states[1]
    assert traj.state_at(0.1) is traj.states[1]
    assert traj.state_at(10.0) is traj.states[-1]
    assert np.all(np.diff(traj.energies) <= 1e-12)
    with pytest.raises(JKOError):
        run_simulation(s0, 0.1, -1.0, med, model)


def test_run_simulation_failure_carries_partial():
    med, model = column(4)
    s0 = stacked(med)
    calls = []

    def boom(n, rec):
        calls.append(n)
        if n == 2:
            raise RuntimeError("stop")

    with pytest.raises(RuntimeError):
        run_simulation(s0, 0.1, 0.5, med, model, callback=boom)
    assert calls == [1, 2]
    bad = JKOOptions(sinkhorn_max_iter=1, sinkhorn_tol=1e-30)
    with pytest.raises(JKOError) as info:
        run_simulation(s0, 0.1, 0.5, med, model, options=bad)
    assert isinstance(info.value.partial, Trajectory)
