"""Triangular meshes and piecewise-linear finite elements.

Structured triangulations of rectilinear plates, uniform refinement,
closed-form P1 assembly of mass/stiffness/load, point evaluation of
FE fields and elimination of essential (Dirichlet) boundary conditions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "FeSystem",
    "ReducedSystem",
    "MeshError",
    "AssemblyError",
    "OutOfDomainError",
    "ConstraintConflictError",
    "generate_rectangle_mesh",
    "generate_l_shaped_mesh",
    "refine_uniform",
    "element_mass",
    "element_stiffness",
    "edge_mass",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_load",
    "assemble_system",
    "locate_points",
    "interpolation_matrix",
    "eval_field",
    "apply_essential_bc",
    "write_mesh",
    "read_mesh",
]

_GEOM_TOL = 1e-9


class MeshError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


class ConstraintConflictError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of a polygon.

    Attributes:
        vertices: (n, 2) float array of coordinates in meters.
        triangles: (t, 3) int array, counter-clockwise vertex triples.
        edges: (b, 2) int array of boundary edges.
        edge_labels: length-b tuple naming the polygon side of each edge.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "edge_labels", tuple(str(s) for s in self.edge_labels))
        if len(self.edge_labels) != len(self.edges):
            raise MeshError("one label per boundary edge is required")
        for arr in (self.vertices, self.triangles, self.edges):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def boundary_edges(self) -> list[tuple[int, int, str]]:
        return [(int(a), int(b), lab) for (a, b), lab in zip(self.edges, self.edge_labels)]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.edge_labels))

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(math.fsum(self.signed_areas()))

    def max_edge_length(self) -> float:
        p = self.vertices[self.triangles]
        lengths = [np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)]
        return float(np.max(lengths))

    def boundary_vertices(self, labels: Iterable[str] | None = None) -> np.ndarray:
        """Sorted vertex ids on the boundary (optionally only on the named sides)."""
        if labels is None:
            mask = np.ones(len(self.edges), dtype=bool)
        else:
            wanted = set(labels)
            mask = np.array([lab in wanted for lab in self.edge_labels], dtype=bool)
        if not mask.any():
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.edges[mask].ravel())

    def adjacency(self) -> sp.csr_matrix:
        """Boolean vertex adjacency (including the diagonal), i.e. the P1 sparsity pattern."""
        t = self.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        data = np.ones(rows.size, dtype=np.int8)
        A = sp.coo_matrix((data, (rows, cols)), shape=(self.n_vertices,) * 2).tocsr()
        A.data[:] = 1
        return A

    def vertex_triangles(self) -> list[np.ndarray]:
        """For each vertex, the ids of the triangles containing it."""
        order = np.argsort(self.triangles.ravel(), kind="stable")
        verts = self.triangles.ravel()[order]
        tris = order // 3
        bounds = np.searchsorted(verts, np.arange(self.n_vertices + 1))
        return [tris[bounds[i]:bounds[i + 1]] for i in range(self.n_vertices)]

    def validate(self) -> None:
        """Raise MeshError if any structural invariant is violated."""
        n = self.n_vertices
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshError("triangle vertex index out of range")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise MeshError("boundary edge vertex index out of range")
        areas = self.signed_areas()
        bad = np.flatnonzero(areas <= 0)
        if bad.size:
            raise MeshError(f"triangle {int(bad[0])} has non-positive signed area {areas[bad[0]]:.3e}")
        counts = _edge_triangle_counts(self.triangles)
        for a, b in self.edges:
            key = (min(a, b), max(a, b))
            if counts.get(key, 0) != 1:
                raise MeshError(f"boundary edge {key} belongs to {counts.get(key, 0)} triangles")


@dataclass(frozen=True, eq=False)
class FeSystem:
    """Mass and stiffness matrices of a P1 discretization."""

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.mass.shape[0]


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """System with Dirichlet vertices eliminated.

    ``free`` maps reduced indices to full vertex ids, ``fixed`` lists the
    constrained vertices and ``values`` their prescribed values.  The
    coupling blocks ``mass_coupling`` (M_fb) and ``stiffness_coupling``
    (S_fb) move boundary data to the right-hand side; ``load`` is the
    constant contribution ``-S_fb g``.
    """

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    free: np.ndarray
    fixed: np.ndarray
    values: np.ndarray
    mass_coupling: sp.csr_matrix
    stiffness_coupling: sp.csr_matrix
    load: np.ndarray

    @property
    def n(self) -> int:
        return self.free.size

    def expand(self, reduced: np.ndarray, values: np.ndarray | None = None) -> np.ndarray:
        """Full vertex vector from reduced coefficients plus boundary values."""
        values = self.values if values is None else values
        reduced = np.asarray(reduced, dtype=float)
        out = np.empty((self.free.size + self.fixed.size,) + reduced.shape[1:])
        out[self.free] = reduced
        out[self.fixed] = values.reshape((-1,) + (1,) * (reduced.ndim - 1))
        return out


def _edge_triangle_counts(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for i in range(3):
            a, b = int(tri[i]), int(tri[(i + 1) % 3])
            key = (a, b) if a < b else (b, a)
            counts[key] = counts.get(key, 0) + 1
    return counts


# --------------------------------------------------------------------------- #
# mesh generation

def _cells_per_length(length: float, edge_target: float) -> int:
    # cell legs <= edge_target/sqrt(2) so that the diagonal is <= edge_target
    return max(1, math.ceil(length * math.sqrt(2.0) / edge_target - 1e-12))


def _grid_mesh(xs: np.ndarray, ys: np.ndarray, cell_inside: np.ndarray,
               sides: Sequence[tuple[str, tuple[float, float], tuple[float, float]]]) -> Mesh:
    """Triangulate the cells of a tensor grid flagged in ``cell_inside``."""
    nx, ny = xs.size - 1, ys.size - 1
    used = np.zeros((ny + 1, nx + 1), dtype=bool)
    for j, i in zip(*np.nonzero(cell_inside)):
        used[j:j + 2, i:i + 2] = True
    ids = -np.ones_like(used, dtype=np.int64)
    ids[used] = np.arange(int(used.sum()))
    jj, ii = np.nonzero(used)
    vertices = np.column_stack([xs[ii], ys[jj]])

    tris = []
    for j, i in zip(*np.nonzero(cell_inside)):
        v00, v10 = ids[j, i], ids[j, i + 1]
        v01, v11 = ids[j + 1, i], ids[j + 1, i + 1]
        tris.append((v00, v10, v11))
        tris.append((v00, v11, v01))
    triangles = np.array(tris, dtype=np.int64)

    counts = _edge_triangle_counts(triangles)
    edges, labels = [], []
    for tri in triangles:
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            if counts[(min(a, b), max(a, b))] != 1:
                continue
            mid = 0.5 * (vertices[a] + vertices[b])
            edges.append((a, b))
            labels.append(_side_label(mid, sides))
    mesh = Mesh(vertices, triangles, np.array(edges, dtype=np.int64).reshape(-1, 2), tuple(labels))
    return mesh


def _side_label(point: np.ndarray, sides) -> str:
    for name, p0, p1 in sides:
        a, b = np.asarray(p0, float), np.asarray(p1, float)
        d = b - a
        s = float(np.dot(point - a, d) / np.dot(d, d))
        if -_GEOM_TOL <= s <= 1 + _GEOM_TOL and np.linalg.norm(a + s * d - point) < _GEOM_TOL:
            return name
    raise MeshError(f"boundary point {point} lies on no polygon side")


def generate_rectangle_mesh(width: float, height: float, edge_target: float) -> Mesh:
    """Structured mesh of [0, width] x [0, height] with max edge <= edge_target.

    Sides are labelled ``bottom``, ``right``, ``top`` and ``left``.
    """
    if not edge_target > 0:
        raise ValueError("edge_target must be positive")
    if not (width > 0 and height > 0):
        raise ValueError("width and height must be positive")
    nx = _cells_per_length(width, edge_target)
    ny = _cells_per_length(height, edge_target)
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    sides = [
        ("bottom", (0, 0), (width, 0)),
        ("right", (width, 0), (width, height)),
        ("top", (width, height), (0, height)),
        ("left", (0, height), (0, 0)),
    ]
    return _grid_mesh(xs, ys, np.ones((ny, nx), dtype=bool), sides)


L_SHAPE_SIDES = ("bottom", "right", "step_top", "step_side", "top", "left")


def generate_l_shaped_mesh(edge_target: float, size: float = 2.0) -> Mesh:
    """Structured mesh of the L-shaped plate [0,s]x[0,s/2] U [0,s/2]x[s/2,s].

    The upper-right quadrant is cut out.  Sides, counter-clockwise from the
    origin: ``bottom`` (y=0), ``right`` (x=s), ``step_top`` (y=s/2, x>s/2),
    ``step_side`` (x=s/2, y>s/2), ``top`` (y=s) and ``left`` (x=0).
    """
    if not edge_target > 0:
        raise ValueError("edge_target must be positive")
    if not size > 0:
        raise ValueError("size must be positive")
    half = 0.5 * size
    k = _cells_per_length(half, edge_target)
    xs = np.linspace(0.0, size, 2 * k + 1)
    ys = np.linspace(0.0, size, 2 * k + 1)
    inside = np.ones((2 * k, 2 * k), dtype=bool)
    inside[k:, k:] = False
    sides = [
        ("bottom", (0, 0), (size, 0)),
        ("right", (size, 0), (size, half)),
        ("step_top", (size, half), (half, half)),
        ("step_side", (half, half), (half, size)),
        ("top", (half, size), (0, size)),
        ("left", (0, size), (0, 0)),
    ]
    return _grid_mesh(xs, ys, inside, sides)


def l_shape_polygon(size: float = 2.0) -> np.ndarray:
    h = 0.5 * size
    return np.array([(0, 0), (size, 0), (size, h), (h, h), (h, size), (0, size)], dtype=float)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints."""
    n = mesh.n_vertices
    midpoint_id: dict[tuple[int, int], int] = {}
    new_vertices = [v for v in mesh.vertices]

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint_id:
            midpoint_id[key] = n + len(midpoint_id)
            new_vertices.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
        return midpoint_id[key]

    tris = []
    for a, b, c in mesh.triangles.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    edges, labels = [], []
    for (a, b), lab in zip(mesh.edges.tolist(), mesh.edge_labels):
        m = midpoint_id[(a, b) if a < b else (b, a)]
        edges.extend([(a, m), (m, b)])
        labels.extend([lab, lab])
    return Mesh(np.array(new_vertices), np.array(tris, dtype=np.int64),
                np.array(edges, dtype=np.int64), tuple(labels))


# --------------------------------------------------------------------------- #
# element matrices

def _element_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Areas and barycentric gradients, shape (t,) and (t, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    areas = mesh.signed_areas()
    bad = np.flatnonzero(~(areas > 0))
    if bad.size:
        raise AssemblyError(f"triangle {int(bad[0])} is degenerate or inverted (area {areas[bad[0]]:.3e})")
    # grad(phi_i) = rot90(p_k - p_j) / (2 area) for (i, j, k) cyclic
    grads = np.empty((p.shape[0], 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        e = p[:, k] - p[:, j]
        grads[:, i, 0] = -e[:, 1]
        grads[:, i, 1] = e[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])


def element_mass(points: np.ndarray) -> np.ndarray:
    """3x3 P1 mass block of a single triangle."""
    pts = np.asarray(points, dtype=float)
    area = 0.5 * ((pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                  - (pts[1, 1] - pts[0, 1]) * (pts[2, 0] - pts[0, 0]))
    return area / 12.0 * _MASS_REF


def element_stiffness(points: np.ndarray, diffusivity: float = 1.0) -> np.ndarray:
    """3x3 P1 stiffness block ``diffusivity * area * G G^T`` of a single triangle."""
    m = Mesh(np.asarray(points, dtype=float), np.array([[0, 1, 2]]), np.zeros((0, 2)), ())
    areas, grads = _element_geometry(m)
    return diffusivity * areas[0] * grads[0] @ grads[0].T


def edge_mass(length: float) -> np.ndarray:
    return length / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def _scatter(n: int, conn: np.ndarray, blocks: np.ndarray) -> sp.csr_matrix:
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    # coo -> csr sums duplicates in input order, so traversal order is fixed
    return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    areas, _ = _element_geometry(mesh)
    blocks = areas[:, None, None] / 12.0 * _MASS_REF[None]
    return _scatter(mesh.n_vertices, mesh.triangles, blocks)


def _robin_edges(mesh: Mesh, robin_terms) -> list[tuple[np.ndarray, float, float]]:
    """Group boundary edges by Robin term: list of (edges, nu, x_ext)."""
    out = []
    if not robin_terms:
        return out
    labels = np.array(mesh.edge_labels, dtype=object)
    for term in robin_terms:
        label, nu = term[0], float(term[1])
        x_ext = float(term[2]) if len(term) > 2 else 0.0
        if nu < 0:
            raise ValueError(f"Robin coefficient on {label!r} must be non-negative")
        mask = labels == label
        if not mask.any():
            raise ValueError(f"unknown boundary label {label!r}")
        out.append((mesh.edges[mask], nu, x_ext))
    return out


def assemble_stiffness(mesh: Mesh, diffusivity: float = 1.0,
                       robin_terms: Sequence[tuple] | None = None) -> sp.csr_matrix:
    """P1 stiffness ``diffusivity * grad-grad`` plus Robin edge mass terms.

    ``robin_terms`` is a sequence of ``(label, nu)`` or ``(label, nu, x_ext)``;
    the external value is ignored here (see :func:`assemble_load`).
    """
    if not diffusivity > 0:
        raise ValueError("diffusivity must be positive")
    areas, grads = _element_geometry(mesh)
    blocks = diffusivity * areas[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    S = _scatter(mesh.n_vertices, mesh.triangles, blocks)
    for edges, nu, _ in _robin_edges(mesh, robin_terms):
        lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
        eblocks = nu * lengths[:, None, None] / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])[None]
        S = S + _scatter(mesh.n_vertices, edges, eblocks)
    return S.tocsr()


def assemble_system(mesh: Mesh, diffusivity: float, robin_terms=None) -> FeSystem:
    return FeSystem(assemble_mass(mesh), assemble_stiffness(mesh, diffusivity, robin_terms))


def assemble_load(mesh: Mesh, forcing: Callable | float | None = None, t: float = 0.0,
                  robin_terms: Sequence[tuple] | None = None) -> np.ndarray:
    """Load vector ``int phi_i f`` plus Robin contributions ``int phi_i nu x_ext``.

    ``forcing`` may be None, a constant, or ``f(points, t)`` evaluated at an
    (m, 2) array of points.  Element integrals use the edge-midpoint rule,
    exact for f linear (indeed quadratic) on each element.
    """
    n = mesh.n_vertices
    u = np.zeros(n)
    if forcing is not None:
        areas, _ = _element_geometry(mesh)
        p = mesh.vertices[mesh.triangles]
        mids = np.stack([0.5 * (p[:, 0] + p[:, 1]), 0.5 * (p[:, 1] + p[:, 2]), 0.5 * (p[:, 2] + p[:, 0])], axis=1)
        if callable(forcing):
            fm = np.asarray(forcing(mids.reshape(-1, 2), t), dtype=float).reshape(-1, 3)
        else:
            fm = np.full(mids.shape[:2], float(forcing))
        # phi_i at midpoints: 1/2 on the two adjacent midpoints, 0 on the opposite one
        # midpoints order: (01, 12, 20)
        w = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
        contrib = (areas / 3.0)[:, None] * (fm @ w.T)
        np.add.at(u, mesh.triangles, contrib)
    for edges, nu, x_ext in _robin_edges(mesh, robin_terms):
        lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
        c = nu * x_ext * 0.5 * lengths
        np.add.at(u, edges[:, 0], c)
        np.add.at(u, edges[:, 1], c)
    return u


# --------------------------------------------------------------------------- #
# point location and evaluation

def locate_points(mesh: Mesh, points: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric weights for each point.

    Returns ``(tri_ids, weights)`` with weights of shape (m, 3).  Points on
    shared edges go to the lowest-numbered containing triangle.  Raises
    OutOfDomainError for points outside every triangle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    P = mesh.vertices[mesh.triangles]
    v0, v1, v2 = P[:, 0], P[:, 1], P[:, 2]
    det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])
    tri_ids = np.empty(len(pts), dtype=np.int64)
    weights = np.empty((len(pts), 3))
    for start in range(0, len(pts), 256):
        chunk = pts[start:start + 256]
        dx = chunk[:, None, 0] - v0[None, :, 0]
        dy = chunk[:, None, 1] - v0[None, :, 1]
        l1 = ((v2[:, 1] - v0[:, 1]) * dx - (v2[:, 0] - v0[:, 0]) * dy) / det
        l2 = (-(v1[:, 1] - v0[:, 1]) * dx + (v1[:, 0] - v0[:, 0]) * dy) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        found = inside.any(axis=1)
        if not found.all():
            bad = chunk[np.flatnonzero(~found)[0]]
            raise OutOfDomainError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
        first = inside.argmax(axis=1)
        r = np.arange(len(chunk))
        w = np.column_stack([l0[r, first], l1[r, first], l2[r, first]])
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        # snap near-vertex points so that phi_j(p_i) = delta_ij holds exactly
        w[np.abs(w) < tol] = 0.0
        w[np.abs(w - 1.0) < tol] = 1.0
        tri_ids[start:start + len(chunk)] = first
        weights[start:start + len(chunk)] = w
    return tri_ids, weights


def interpolation_matrix(mesh: Mesh, points: np.ndarray) -> sp.csr_matrix:
    """Sparse (m, n) matrix whose row i holds phi^T(points[i])."""
    tri_ids, weights = locate_points(mesh, points)
    rows = np.repeat(np.arange(len(tri_ids)), 3)
    cols = mesh.triangles[tri_ids].ravel()
    W = sp.coo_matrix((weights.ravel(), (rows, cols)), shape=(len(tri_ids), mesh.n_vertices)).tocsr()
    W.eliminate_zeros()
    return W


def eval_field(mesh: Mesh, coeffs: np.ndarray, point) -> float | np.ndarray:
    """Evaluate ``phi^T(p) coeffs`` at one point (scalar) or an (m, 2) array."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != mesh.n_vertices:
        raise ValueError(f"expected {mesh.n_vertices} coefficients, got {coeffs.shape[0]}")
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    tri_ids, weights = locate_points(mesh, pts.reshape(-1, 2))
    vals = np.einsum("mk,mk...->m...", weights, coeffs[mesh.triangles[tri_ids]])
    return float(vals[0]) if single and vals.ndim == 1 else vals


# --------------------------------------------------------------------------- #
# essential boundary conditions

def apply_essential_bc(system: FeSystem, mesh: Mesh,
                       dirichlet: Sequence[tuple[str, float]]) -> ReducedSystem:
    """Eliminate Dirichlet vertices.

    Vertices shared between a Dirichlet side and a natural side are
    constrained.  A vertex shared by two Dirichlet sides with different
    values raises ConstraintConflictError.
    """
    n = system.n
    prescribed: dict[int, float] = {}
    known = set(mesh.edge_labels)
    for label, value in dirichlet:
        if label not in known:
            raise ValueError(f"unknown boundary label {label!r}")
        for v in mesh.boundary_vertices([label]).tolist():
            if v in prescribed and prescribed[v] != float(value):
                raise ConstraintConflictError(
                    f"vertex {v} receives conflicting Dirichlet values {prescribed[v]} and {value}")
            prescribed[v] = float(value)
    fixed = np.array(sorted(prescribed), dtype=np.int64)
    values = np.array([prescribed[v] for v in fixed.tolist()], dtype=float)
    free_mask = np.ones(n, dtype=bool)
    free_mask[fixed] = False
    free = np.flatnonzero(free_mask)
    M = system.mass.tocsr()
    S = system.stiffness.tocsr()
    S_fb = S[free][:, fixed]
    M_fb = M[free][:, fixed]
    load = -(S_fb @ values) if fixed.size else np.zeros(free.size)
    return ReducedSystem(
        mass=M[free][:, free].tocsr(),
        stiffness=S[free][:, free].tocsr(),
        free=free,
        fixed=fixed,
        values=values,
        mass_coupling=M_fb.tocsr(),
        stiffness_coupling=S_fb.tocsr(),
        load=np.asarray(load, dtype=float),
    )


# --------------------------------------------------------------------------- #
# text format

def write_mesh(mesh: Mesh, path) -> None:
    """Write ``vertices T triangles B edges`` header then one record per line."""
    lines = [f"{mesh.n_vertices} vertices {mesh.n_triangles} triangles {len(mesh.edges)} edges"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines += [f"{a} {b} {lab}" for (a, b), lab in zip(mesh.edges.tolist(), mesh.edge_labels)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    with open(path, encoding="ascii") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    head = lines[0]
    if len(head) != 6 or head[1] != "vertices" or head[3] != "triangles" or head[5] != "edges":
        raise MeshError(f"{path}: malformed header {' '.join(head)!r}")
    nv, nt, nb = int(head[0]), int(head[2]), int(head[4])
    body = lines[1:]
    if len(body) != nv + nt + nb:
        raise MeshError(f"{path}: expected {nv + nt + nb} records, found {len(body)}")
    verts = np.array([[float(a), float(b)] for a, b in body[:nv]], dtype=float)
    tris = np.array([[int(a) for a in r] for r in body[nv:nv + nt]], dtype=np.int64)
    edges = np.array([[int(r[0]), int(r[1])] for r in body[nv + nt:]], dtype=np.int64)
    labels = tuple(r[2] for r in body[nv + nt:])
    return Mesh(verts, tris, edges.reshape(-1, 2), labels)
