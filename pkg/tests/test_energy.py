import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multiphase_jko.energy import (CapillaryModel, InfiniteEnergy, capillary_phi, capillary_pi,
                                   check_admissible, energy_floor, energy_gradient, energy_report,
                                   read_capillary_csv, relative_entropy, total_energy)
from multiphase_jko.geometry import Medium, build_grid, gravity_column, isotropic_medium


def unit_cell(n_phases=2, potential=0.0):
    return isotropic_medium(build_grid(1), 1.0, 1.0, np.ones(n_phases), potential)


def random_spd(rng, n_cells, N):
    B = rng.standard_normal((n_cells, N, N))
    return np.einsum("xij,xkj->xik", B, B) + 0.5 * np.eye(N)


def test_capillary_pi_linear_examples():
    model = CapillaryModel([[[1.0]]])
    assert capillary_pi(model, [0.5], 0)[0] == pytest.approx(0.5)
    model = CapillaryModel([[[2.0]]], b=[[0.3]])
    assert capillary_pi(model, [0.0], 0)[0] == pytest.approx(0.3)


def test_capillary_pi_rejects_outside_simplex():
    model = CapillaryModel(np.eye(2), n_cells=1)
    with pytest.raises(InfiniteEnergy):
        capillary_pi(model, [-0.1, 0.2], 0)
    with pytest.raises(InfiniteEnergy):
        capillary_pi(model, [0.7, 0.6], 0, omega=1.0)


def test_capillary_phi_inverts_pi():
    rng = np.random.default_rng(0)
    A = random_spd(rng, 5, 3)
    b = rng.standard_normal((5, 3))
    model = CapillaryModel(A, b)
    for x in range(5):
        s = rng.random(3) / 3
        z = capillary_pi(model, s, x)
        back, outside = capillary_phi(model, z, x, omega=1.0)
        np.testing.assert_allclose(back, s, atol=1e-12)
        assert not outside
        # independent oracle: direct linear solve
        np.testing.assert_allclose(np.linalg.solve(A[x], z - b[x]), s, atol=1e-12)
    _, outside = capillary_phi(model, -10 * np.ones(3), 0, omega=1.0)
    assert outside


def test_model_validation():
    with pytest.raises(ValueError):
        CapillaryModel(np.array([[[1.0, 2.0], [0.0, 1.0]]]))
    with pytest.raises(ValueError):
        CapillaryModel(np.array([[[-1.0]]]))
    zero = CapillaryModel.zero(3, 1)
    assert zero.degenerate
    with pytest.raises(ValueError):
        zero.inverse(np.zeros((1, 3)))


def test_single_cell_energy_eighth():
    med = unit_cell()
    model = CapillaryModel([[[1.0]]])
    assert total_energy(model, med, np.array([[0.5], [0.5]])) == pytest.approx(0.125)


def test_zero_state_zero_energy():
    med = isotropic_medium(build_grid(4), 0.5, 1.0, [1.0, 1.0])
    model = CapillaryModel.scaled_identity(4, 1, 2.0)
    s = np.stack([med.pore_volume, np.zeros(4)])
    assert total_energy(model, med, s) == 0.0


def test_gravity_energy_matches_resummation():
    rng = np.random.default_rng(1)
    med = gravity_column(10, densities=(1.0, 2.5), viscosity=(1.0, 2.0), porosity=0.4)
    model = CapillaryModel(random_spd(rng, 10, 1), rng.standard_normal((10, 1)))
    cap = med.pore_volume
    s1 = rng.random(10) * cap
    s = np.stack([cap - s1, s1])
    vol = med.grid.cell_volume
    z = med.grid.centers[:, 0]
    ref = 0.0
    for x in range(10):
        u = s1[x] / vol
        ref += (0.5 * model.A[x, 0, 0] * u * u + model.b[x, 0] * u) * vol
        ref += s[0, x] * 1.0 * z[x] + s[1, x] * 2.5 * z[x]
    assert total_energy(model, med, s) == pytest.approx(ref, rel=1e-13)


def test_energy_gradient_by_finite_differences():
    rng = np.random.default_rng(2)
    g = build_grid((3, 3))
    med = Medium(g, np.full(9, 0.5), np.ones(9), np.ones(3), rng.standard_normal((3, 9)))
    model = CapillaryModel(random_spd(rng, 9, 2), rng.standard_normal((9, 2)))
    cap = med.pore_volume
    w = rng.dirichlet(np.ones(3), 9).T
    s = w * cap
    grad = energy_gradient(model, med, s)
    d = rng.standard_normal(s.shape)
    d -= d.mean(axis=0)  # saturation-preserving
    h = 1e-6
    fd = (total_energy(model, med, s + h * d, check=False)
          - total_energy(model, med, s - h * d, check=False)) / (2 * h)
    assert fd == pytest.approx(np.sum(grad * d), rel=1e-7)


def test_check_admissible():
    med = isotropic_medium(build_grid(3), 0.5, 1.0, [1.0, 1.0])
    cap = med.pore_volume
    check_admissible(np.stack([cap, 0 * cap]), med, masses=[cap.sum(), 0.0])
    with pytest.raises(InfiniteEnergy):
        check_admissible(np.stack([cap, 0.1 * cap]), med)
    with pytest.raises(InfiniteEnergy):
        check_admissible(np.stack([1.5 * cap, -0.5 * cap]), med)
    with pytest.raises(InfiniteEnergy):
        check_admissible(np.stack([cap, 0 * cap]), med, masses=[0.0, cap.sum()])


def test_relative_entropy_examples():
    med = unit_cell(1)
    assert relative_entropy(np.array([1.0]), med) == 0.0
    assert relative_entropy(np.array([np.exp(-1)]), med) == pytest.approx(-np.exp(-1), abs=1e-15)
    assert relative_entropy(np.array([0.0]), med) == 0.0
    with pytest.raises(InfiniteEnergy):
        relative_entropy(np.array([1.5]), med)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_relative_entropy_bracket(n, seed):
    rng = np.random.default_rng(seed)
    g = build_grid(n)
    omega = rng.uniform(0.1, 1.0, n)
    med = Medium(g, omega, np.ones(n), np.ones(1), 0.0)
    s = rng.random(n) * omega * g.cell_volume
    H = relative_entropy(s, med)
    u = s / g.cell_volume
    ref = sum(ui * np.log(ui / wi) for ui, wi in zip(u, omega) if ui > 0) * g.cell_volume
    assert H == pytest.approx(ref, rel=1e-12, abs=1e-15)
    assert -omega.sum() * g.cell_volume / np.e - 1e-15 <= H <= 1e-15


def brute_floor(model, med, samples=4001):
    """Per-cell minimum over a fine grid of the single-capillary simplex."""
    vol = med.grid.cell_volume
    total = 0.0
    for x in range(med.grid.cell_count):
        w = med.porosity[x]
        z = np.linspace(0.0, w, samples)
        val = 0.5 * model.A[x, 0, 0] * z * z + model.b[x, 0] * z
        val = val + z * med.potential[1, x] + (w - z) * med.potential[0, x]
        total += val.min() * vol
    return total


def test_energy_floor_against_sampling():
    rng = np.random.default_rng(3)
    med = gravity_column(6, densities=(1.0, 2.0), porosity=0.5)
    model = CapillaryModel(random_spd(rng, 6, 1), rng.standard_normal((6, 1)))
    floor = energy_floor(model, med)
    assert floor == pytest.approx(brute_floor(model, med), abs=1e-6)
    assert floor <= brute_floor(model, med) + 1e-14


def test_energy_floor_below_every_state():
    rng = np.random.default_rng(4)
    g = build_grid((2, 3))
    med = Medium(g, rng.uniform(0.2, 0.8, 6), np.ones(6), np.ones(3), rng.standard_normal((3, 6)))
    model = CapillaryModel(random_spd(rng, 6, 2), rng.standard_normal((6, 2)))
    floor = energy_floor(model, med)
    for _ in range(200):
        s = rng.dirichlet(np.ones(3), 6).T * med.pore_volume
        assert total_energy(model, med, s) >= floor - 1e-12


def test_energy_report():
    rep = energy_report(3.0, 1.0, 4.0)
    assert (rep.raw, rep.normalized, rep.relative_to_initial) == (3.0, 2.0, -1.0)


def test_read_capillary_csv(tmp_path):
    path = tmp_path / "cap.csv"
    path.write_text("# schema=1\ncell,a_1_1,a_1_2,a_2_1,a_2_2,b_1\n"
                    "0,2,0.5,0.5,1,0.1\n1,1,0,0,1,\n")
    model = read_capillary_csv(path, 2)
    np.testing.assert_allclose(model.A[0], [[2, 0.5], [0.5, 1]])
    np.testing.assert_allclose(model.b, [[0.1, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        read_capillary_csv(path, 3)
