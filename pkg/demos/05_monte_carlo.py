"""Monte Carlo comparison on the first preset with a reduced run count.

Run with ``python3 demos/05_monte_carlo.py [out_dir]``.
"""
# %%
import sys

from dfekf import harness

sc = harness.load_scenario("scenario1")
setup = harness.build_setup(sc)
truth = harness.simulate_truth(sc, setup.fine)
print(f"truth: {truth.shape[0] - 1} samples on {setup.fine.n_vertices} fine vertices, "
      f"min {truth[-1].min():.2f} K max {truth[-1].max():.2f} K at the end")

# %% Ten runs per variant; the noise of run r is the same whatever the run count.
exp = harness.run_experiment(sc, runs=10, setup=setup, truth=truth)
for name, res in exp.results.items():
    m = res.mean
    print(f"{name:11s} RMSE q=1 {m[0]:.3f}  q=50 {m[49]:.3f}  q=300 {m[-1]:.4f}  "
          f"steady {res.steady_mean(sc.steady_fraction):.4f}")

# %% Optional CSV output.
if len(sys.argv) > 1:
    for p in harness.write_outputs(exp, sys.argv[1]):
        print("wrote", p)
