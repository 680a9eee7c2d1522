import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from dfekf.mesh import (AssemblyError, ConstraintConflictError, Mesh, OutOfDomainError, apply_essential_bc,
                        assemble_load, assemble_mass, assemble_stiffness, assemble_system, element_mass,
                        element_stiffness, eval_field, generate_l_shaped_mesh, generate_rectangle_mesh,
                        interpolation_matrix, read_mesh, refine_uniform, write_mesh)

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

coord = st.floats(-3, 3, allow_nan=False)
triangle = st.tuples(coord, coord, coord, coord, coord, coord).map(lambda t: np.array(t).reshape(3, 2)).filter(
    lambda p: abs(_cross(p[1] - p[0], p[2] - p[0])) > 1e-2)


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _ccw(p):
    if _cross(p[1] - p[0], p[2] - p[0]) < 0:
        p = p[[0, 2, 1]]
    return p


def _bary(p, x):
    T = np.column_stack([p[1] - p[0], p[2] - p[0]])
    l12 = np.linalg.solve(T, x - p[0])
    return np.array([1 - l12.sum(), l12[0], l12[1]])


def test_reference_blocks():
    np.testing.assert_allclose(element_mass(REF), np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-12)
    np.testing.assert_allclose(element_stiffness(REF), 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]),
                               atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(triangle)
def test_mass_matches_quadratic_quadrature(p):
    # the edge-midpoint rule is exact for the quadratic products phi_i phi_j
    p = _ccw(p)
    area = 0.5 * _cross(p[1] - p[0], p[2] - p[0])
    mids = [(p[0] + p[1]) / 2, (p[1] + p[2]) / 2, (p[2] + p[0]) / 2]
    vals = np.array([_bary(p, m) for m in mids])
    M_q = area / 3 * vals.T @ vals
    np.testing.assert_allclose(element_mass(p), M_q, rtol=1e-10, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(triangle, st.floats(0.1, 5.0))
def test_stiffness_matches_finite_difference_gradients(p, lam):
    p = _ccw(p)
    area = 0.5 * _cross(p[1] - p[0], p[2] - p[0])
    c = p.mean(axis=0)
    h = 1e-6
    G = np.column_stack([(_bary(p, c + h * e) - _bary(p, c - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(element_stiffness(p, lam), lam * area * G @ G.T, rtol=1e-6, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(triangle)
def test_element_invariants(p):
    p = _ccw(p)
    K = element_stiffness(p)
    M = element_mass(p)
    area = 0.5 * _cross(p[1] - p[0], p[2] - p[0])
    np.testing.assert_allclose(K @ np.ones(3), 0, atol=1e-9 * np.abs(K).max())
    assert np.linalg.eigvalsh(K).min() > -1e-9 * np.abs(K).max()
    assert np.linalg.eigvalsh(M).min() > 0
    assert np.isclose(M.sum(), area)
    # stiffness is scale invariant in 2D, mass scales with area
    np.testing.assert_allclose(element_stiffness(3.0 * p + 1.0), K, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(element_mass(2.0 * p), 4.0 * M, rtol=1e-12)


def test_inverted_triangle_rejected():
    mesh = Mesh(REF[[0, 2, 1]], np.array([[0, 1, 2]]), np.zeros((0, 2), dtype=np.int64), ())
    with pytest.raises(AssemblyError):
        assemble_stiffness(mesh)


def test_l_shape_counts_and_totals():
    mesh = generate_l_shaped_mesh(0.2)
    mesh.validate()
    assert (mesh.n_vertices, mesh.n_triangles) == (225, 384)
    assert mesh.area() == pytest.approx(3.0, abs=1e-12)
    assert mesh.max_edge_length() <= 0.2
    assert set(mesh.labels) == {"bottom", "right", "step_top", "step_side", "top", "left"}
    M = assemble_mass(mesh)
    S = assemble_stiffness(mesh, 1.11e-4)
    assert abs(M.sum() - 3.0) < 1e-10
    assert np.abs(S @ np.ones(mesh.n_vertices)).max() < 1e-15
    assert abs(S - S.T).max() == 0 and abs(M - M.T).max() == 0


@pytest.mark.parametrize("b, c, lam", [(1.0, 0.0, 1.0), (0.3, -2.0, 0.5), (0.0, 1.0, 1.11e-4)])
def test_dirichlet_energy_of_linear_fields_is_exact(b, c, lam):
    mesh = generate_l_shaped_mesh(0.25)
    S = assemble_stiffness(mesh, lam)
    x = 2.0 + b * mesh.vertices[:, 0] + c * mesh.vertices[:, 1]
    assert x @ S @ x == pytest.approx(lam * (b * b + c * c) * mesh.area(), rel=1e-12, abs=1e-15)


def test_load_of_linear_forcing_equals_mass_times_nodal_values():
    mesh = generate_rectangle_mesh(2.0, 1.0, 0.3)
    f = lambda pts, t: 1.0 + 2.0 * pts[:, 0] - pts[:, 1] + t
    u = assemble_load(mesh, f, t=0.5)
    nodal = f(mesh.vertices, 0.5)
    np.testing.assert_allclose(u, assemble_mass(mesh) @ nodal, rtol=1e-12)
    np.testing.assert_allclose(assemble_load(mesh, 3.0), 3.0 * assemble_mass(mesh) @ np.ones(mesh.n_vertices))


def test_robin_terms():
    mesh = generate_l_shaped_mesh(0.2)
    S0 = assemble_stiffness(mesh, 1e-3)
    S1 = assemble_stiffness(mesh, 1e-3, [("top", 10.0, 300.0)])
    one = np.ones(mesh.n_vertices)
    # top edge of the L has length 1
    assert one @ (S1 - S0) @ one == pytest.approx(10.0, rel=1e-12)
    u = assemble_load(mesh, None, 0.0, [("top", 10.0, 300.0)])
    assert u.sum() == pytest.approx(3000.0, rel=1e-12)
    assert set(np.flatnonzero(u)) == set(mesh.boundary_vertices(["top"]).tolist())
    with pytest.raises(ValueError):
        assemble_stiffness(mesh, 1.0, [("nowhere", 1.0)])


def test_refinement():
    mesh = generate_l_shaped_mesh(0.2)
    fine = refine_uniform(mesh)
    fine.validate()
    assert fine.n_triangles == 4 * mesh.n_triangles
    assert fine.area() == pytest.approx(mesh.area(), abs=1e-12)
    np.testing.assert_array_equal(fine.vertices[:mesh.n_vertices], mesh.vertices)
    assert fine.max_edge_length() == pytest.approx(mesh.max_edge_length() / 2)
    assert set(fine.labels) == set(mesh.labels)
    ratio = generate_l_shaped_mesh(0.1).n_triangles / mesh.n_triangles
    assert 3.5 <= ratio <= 4.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2), st.floats(0, 1))
def test_eval_field_reproduces_linear_functions(x, y):
    mesh = generate_rectangle_mesh(2.0, 1.0, 0.3)
    coeffs = 1.5 - 0.5 * mesh.vertices[:, 0] + 3.0 * mesh.vertices[:, 1]
    assert eval_field(mesh, coeffs, [x, y]) == pytest.approx(1.5 - 0.5 * x + 3.0 * y, abs=1e-9)


def test_point_evaluation_at_vertices_and_outside():
    mesh = generate_l_shaped_mesh(0.2)
    W = interpolation_matrix(mesh, mesh.vertices[:10])
    np.testing.assert_array_equal(W.toarray()[:, :10], np.eye(10))
    assert np.allclose(W.sum(axis=1), 1.0)
    with pytest.raises(OutOfDomainError):
        eval_field(mesh, np.zeros(mesh.n_vertices), [1.5, 1.5])


def test_dirichlet_elimination_reproduces_linear_steady_state():
    mesh = generate_rectangle_mesh(2.0, 1.0, 0.25)
    fem = assemble_system(mesh, 1.0)
    red = apply_essential_bc(fem, mesh, [("left", 300.0), ("right", 320.0)])
    x = red.expand(spla.spsolve(red.stiffness.tocsc(), red.load))
    np.testing.assert_allclose(x, 300.0 + 10.0 * mesh.vertices[:, 0], atol=1e-9)
    assert red.n + red.fixed.size == mesh.n_vertices


def test_dirichlet_conflict():
    mesh = generate_rectangle_mesh(1.0, 1.0, 0.5)
    fem = assemble_system(mesh, 1.0)
    with pytest.raises(ConstraintConflictError):
        apply_essential_bc(fem, mesh, [("left", 1.0), ("bottom", 2.0)])
    red = apply_essential_bc(fem, mesh, [("left", 1.0), ("bottom", 1.0)])
    assert red.values.tolist() == [1.0] * red.fixed.size


def test_mesh_file_roundtrip(tmp_path):
    mesh = generate_l_shaped_mesh(0.3)
    path = tmp_path / "m.txt"
    write_mesh(mesh, path)
    head = path.read_text().splitlines()[0].split()
    assert int(head[0]) == mesh.n_vertices and int(head[2]) == mesh.n_triangles
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    assert back.edge_labels == mesh.edge_labels
