"""Mesh generation and P1 finite-element assembly on the L-shaped plate.

Run with ``python3 demos/01_mesh_and_assembly.py``.
"""
# %%
import numpy as np

from dfekf.mesh import (assemble_load, assemble_system, element_mass, element_stiffness,
                        eval_field, generate_l_shaped_mesh, refine_uniform)

# %% Coarse L-shaped mesh (top-right quadrant removed) and one uniform refinement.
mesh = generate_l_shaped_mesh(0.2, 2.0)
fine = refine_uniform(mesh)
print(f"coarse: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, area {mesh.area():.3f}")
print(f"fine:   {fine.n_vertices} vertices, {fine.n_triangles} triangles")
print("boundary labels:", ", ".join(mesh.labels))

# %% Element blocks on the reference triangle.
ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
print("24 * mass block:\n", 24 * element_mass(ref))
print("2 * stiffness block:\n", 2 * element_stiffness(ref))

# %% Global matrices: mass sums to the area, stiffness kills constants.
fem = assemble_system(mesh, 1.11e-4)
print(f"sum(M) = {fem.mass.sum():.12f}")
print(f"max |S 1| = {np.abs(fem.stiffness @ np.ones(mesh.n_vertices)).max():.2e}")

# %% A linear field is reproduced exactly by P1 interpolation.
field = 300 + 2 * mesh.vertices[:, 0] - mesh.vertices[:, 1]
pts = np.array([[0.33, 0.41], [1.7, 0.2], [0.25, 1.8]])
print("interpolated:", eval_field(mesh, field, pts))
print("exact:       ", 300 + 2 * pts[:, 0] - pts[:, 1])

# %% Load vector of a uniform unit source integrates to the area.
f = assemble_load(mesh, lambda xy, t: np.ones(len(xy)), 0.0)
print(f"sum(f) = {f.sum():.12f}")
