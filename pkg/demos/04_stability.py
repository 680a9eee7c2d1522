"""Stability diagnostics of the consensus scheme and of the distributed filter.

Run with ``python3 demos/04_stability.py``.
"""
# %%
import numpy as np

from dfekf import harness
from dfekf import stability as stb
from dfekf.decomposition import build_augmented

sc = harness.load_scenario("scenario1")
setup = harness.build_setup(sc)
aug = build_augmented(setup.mass, setup.stiffness, setup.dec)

# %% Zero-stability radius, checked against the companion matrix.
zs = stb.zero_stability(aug)
print(f"rho(M_D^-1 M_F) = {zs.rho:.4f} ({zs.method}), companion {stb.zero_stability_companion(aug, zs).rho:.4f}")

# %% Relaxation: a coupling operator with spectrum {0, 1.2} needs omega < 1.
X = np.full((2, 2), 0.6)
om = stb.select_omega(X)
print(f"omega = {om.omega:.3f}, relaxed radius {om.rho_omega:.3f}")
# A spectrum {-1.2, 1.2} cannot be relaxed: every omega leaves a radius >= 1.
print("symmetric spectrum stable:", stb.select_omega(np.array([[0.0, 1.2], [1.2, 0.0]])).stable)

# %% First-order convergence of the split time stepping on a manufactured solution.
cons = stb.consistency_order(aug, delta0=0.025)
print("halving ratios:", " ".join(f"{r:.2f}" for r in cons.ratios), f"slope {cons.slope:.3f}")

# %% Full report per number of rounds.
for L in (1, 2, 10):
    rep = harness.stability_report(setup, L)
    print(f"L={L:2d}: riccati residual {rep.extras['riccati_residual']:.1e}, "
          f"gamma bound {rep.gamma_bound:.3g} vs gamma^L {rep.gamma_L_actual:.3f}, "
          f"error radius {rep.rho_error:.3f}")
