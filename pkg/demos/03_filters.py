"""Centralized and distributed Kalman filters on a small square.

Run with ``python3 demos/03_filters.py``.
"""
# %%
from dataclasses import replace

import numpy as np

from dfekf import filter_central as fc
from dfekf import filter_distributed as fd
from dfekf.decomposition import decompose, rectangle_seed_partition
from dfekf.mesh import assemble_system, generate_rectangle_mesh
from dfekf.model import build_measurement, discretize_central, local_models

# %% Unit square, two overlapping halves, six point sensors.
mesh = generate_rectangle_mesh(1.0, 1.0, 0.15)
fem = assemble_system(mesh, 1e-2)
dec = decompose(mesh, rectangle_seed_partition(mesh, [(0, 0.5, 0, 1), (0.5, 1, 0, 1)]), 1)
sensors = np.array([[0.1, 0.2], [0.3, 0.7], [0.45, 0.5], [0.55, 0.45], [0.7, 0.2], [0.9, 0.8]])
C, per = build_measurement(mesh, sensors, dec)
n, Ts = mesh.n_vertices, 60.0

# %% Synthetic data: a tilted field relaxing under the model, 0.1 K sensor noise.
central = discretize_central(fem, 6.0).with_noise(C, 0.25 * np.eye(n), 0.01 * np.eye(len(sensors)))
rng = np.random.default_rng(0)
x = 300 + 4 * mesh.vertices[:, 0]
states = []
for q in range(40):
    states.append(x)
    for _ in range(int(Ts / central.dt)):
        x = central.A @ x
states = np.array(states)
ys = states @ C.T + 0.1 * rng.standard_normal((40, len(sensors)))
truth = states[-1]

# %% Centralized filter with a 6 s integration step.
xc, _ = fc.run(central, ys, np.full(n, 302.0), 20 * np.eye(n), Ts)

# %% Distributed filter with L consensus rounds per sampling interval.
for L in (1, 2, 10):
    mods = [replace(m, C=per[i][0], Q=0.25 * np.eye(m.n), R=0.01 * np.eye(len(per[i][1])), sensors=per[i][1])
            for i, m in enumerate(local_models(fem.mass, fem.stiffness, dec, Ts / L))]
    net = fd.ConsensusNetwork(mods, dec, L, gamma=1.1, trace=True)
    xd, _ = net.run(ys, np.full(n, 302.0), 20.0)
    sent = sum(row[-1] for row in net.transport.trace) if net.transport is not None else 0
    print(f"L={L:2d}: final RMS error {np.sqrt(np.mean((xd[-1] - truth) ** 2)):.4f} K, "
          f"values exchanged {sent}")
print(f"central: final RMS error {np.sqrt(np.mean((xc[-1] - truth) ** 2)):.4f} K")
