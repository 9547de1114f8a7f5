"""
The two building blocks: the bathtub problem and grid transport
===============================================================

Every time step is built from two pieces.  The linear subproblem assigns
each cell's pore volume to the phases with the lowest shifted field, and
transport distances measure how far each phase has to move.  This script
exercises both on small instances where the answers are known.

Run with ``python demos/building_blocks.py``.
"""
import numpy as np

from multiphase_jko.bathtub import BathtubInstance, brute_force_lp, dual_value, solve_bathtub
from multiphase_jko.geometry import (build_costs, build_grid, check_geodesic_convexity_isotropic,
                                     isotropic_medium, random_heterogeneous_medium)
from multiphase_jko.transport import exact_w2, sinkhorn_w2

# %%
# Two cells of unit volume, two phases of unit mass.  Phase 0 is free
# everywhere, phase 1 costs 1 in cell 0 and 3 in cell 1.  Phase 1 must go
# somewhere, so it takes the cheaper cell and the optimum is 1.
inst = BathtubInstance([[0.0, 0.0], [1.0, 3.0]], [1.0, 1.0], [1.0, 1.0])
sol = solve_bathtub(inst)
print("allocation\n", sol.s)
print("primal", sol.primal_value, " dual", sol.dual_value, " multipliers", sol.alpha)
print("dual at alpha = (0, -1):", dual_value(inst, [0.0, -1.0]))

# %%
# On random instances the solver agrees with a generic LP.
rng = np.random.default_rng(0)
worst = 0.0
for _ in range(100):
    n, k = rng.integers(1, 7), rng.integers(1, 4)
    omega = rng.uniform(0.1, 1.0, n)
    inst = BathtubInstance(rng.uniform(-1, 1, (k, n)), omega, rng.dirichlet(np.ones(k)) * omega.sum())
    worst = max(worst, abs(solve_bathtub(inst).primal_value - brute_force_lp(inst)[0]))
print(f"\nworst difference to the reference LP over 100 instances: {worst:.1e}")

# %%
# Transport on a 1-D grid of 3 cells: moving a unit mass from the first to
# the last cell costs the squared distance (2/3)^2 times viscosity over
# permeability.
med = isotropic_medium(build_grid(3), 0.5, 2.0, [3.0])
C = build_costs(med)[0]
res = exact_w2(C, np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
print(f"\nW^2 = {res.value:.6f}  expected {(2 / 3) ** 2 * 3.0 / 2.0:.6f}")

# %%
# The entropic approximation approaches the exact value as the
# regularisation shrinks.
med = random_heterogeneous_medium(build_grid((4, 4)), [1.0], seed=1)
C = build_costs(med)[0]
a, b = rng.random(16), rng.random(16)
b *= a.sum() / b.sum()
exact = exact_w2(C, a, b).value
scale = np.median(C[C > 0])
for f in (1e-1, 3e-2, 1e-2, 3e-3):
    val = sinkhorn_w2(C, a, b, f * scale, tol=1e-10)[0].value
    print(f"epsilon = {f:g} x median cost   error {abs(val - exact):.2e}")

# %%
# The geodesic-convexity test on the domain boundary passes for constant
# permeability.
print("\n", check_geodesic_convexity_isotropic(isotropic_medium(build_grid((8, 8)), 0.5, 1.0, [1.0])))
