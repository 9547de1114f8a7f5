"""
Heavy fluid on top: a two-phase gravity column
==============================================

A vertical column is filled with a light phase in the lower half and a
heavy phase in the upper half.  Each time step moves the saturations to the
state that best trades transport cost against energy.  We watch the energy
fall, check the conservation laws and compare the final state with a direct
minimiser of the energy.

Run with ``python demos/gravity_column.py``.
"""
import numpy as np

from multiphase_jko.diagnostics import check_energy_decay, check_holder, check_pressure_norms
from multiphase_jko.energy import CapillaryModel, total_energy
from multiphase_jko.geometry import build_costs, gravity_column
from multiphase_jko.jko import minimize_energy, run_simulation

# %%
# The medium: 32 cells on [0, 1], densities 1 and 2, viscosities 1 and 2,
# porosity 0.5.  The capillary pressure is linear in the heavy saturation.
n = 32
medium = gravity_column(n, densities=(1.0, 2.0), viscosity=(1.0, 2.0), porosity=0.5)
model = CapillaryModel.scaled_identity(n, 1, 0.5)
costs = build_costs(medium)

cap = medium.pore_volume
z = medium.grid.centers[:, 0]
heavy = np.where(z > 0.5, cap, 0.0)
s0 = np.stack([cap - heavy, heavy])

# %%
# Forty steps of size 0.01.
traj = run_simulation(s0, 0.01, 0.4, medium, model, costs)
print("step   energy      W^2 to previous")
for k, rec in enumerate(traj.records, start=1):
    if k % 5 == 0:
        print(f"{k:4d}   {rec.energy_after:.6f}   {rec.w2.sum():.3e}")

# %%
# Mass and saturation are conserved to round-off, and the capillary
# relation between the reconstructed pressures holds algebraically.
S = np.array(traj.states)
print("\nmass drift       ", np.abs(S.sum(axis=2) - S[0].sum(axis=1)).max())
print("saturation drift ", np.abs(S.sum(axis=1) - cap).max())
print("capillary residual", check_pressure_norms(traj, medium).capillary_residual)

# %%
# The energy never increases and the total squared distance travelled is
# bounded by twice the initial energy above its floor.
rep = check_energy_decay(traj, model, medium)
print(f"\nsum W^2/tau = {rep.total_distance:.4f}  bound {rep.total_distance_bound:.4f}")
hold = check_holder(traj, costs, model, medium)
print(f"Hölder constant {hold.constant:.4f}  reference {hold.reference:.4f}")

# %%
# Long steps reach equilibrium quickly.  The heavy phase ends up at the
# bottom with a capillary transition zone in between.
long = run_simulation(s0, 0.5, 1000.0, medium, model, costs, stationary_tol=1e-8)
s_eq = long.states[-1]
_, E_min, _ = minimize_energy(model, medium, s0.sum(axis=1))
print(f"\nstopped after {len(long.records)} steps")
print(f"energy {total_energy(model, medium, s_eq):.10f}  direct minimum {E_min:.10f}")
print("heavy fraction by height:")
print(np.round(s_eq[1] / cap, 3))
