"""Overlapping domain decomposition of a triangular mesh.

Each subdomain is a union of triangles.  A vertex of subdomain ``m`` is
*internal* when every triangle touching it belongs to the subdomain (so its
FE row only involves subdomain vertices); the remaining subdomain vertices
form the interface and are each handed to one neighbour in which they are
internal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

__all__ = [
    "Decomposition",
    "DecompositionError",
    "LocalBlocks",
    "AugmentedSystem",
    "decompose",
    "rectangle_seed_partition",
    "extract_local_blocks",
    "build_augmented",
    "dump_decomposition",
    "load_decomposition",
]


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Index sets of an overlapping decomposition.

    Attributes:
        n_vertices: size of the global mesh.
        triangles: per node, sorted triangle ids forming the subdomain.
        vertices: per node, sorted ids of all subdomain vertices.
        internal: per node, sorted ids of internal vertices (the local state).
        interface: per node, mapping neighbour ``j`` -> sorted ids assigned to ``j``.
        outer_boundary: per node, internal vertices lying on the global boundary.
    """

    n_vertices: int
    triangles: tuple[np.ndarray, ...]
    vertices: tuple[np.ndarray, ...]
    internal: tuple[np.ndarray, ...]
    interface: tuple[dict[int, np.ndarray], ...]
    outer_boundary: tuple[np.ndarray, ...]

    @property
    def node_count(self) -> int:
        return len(self.internal)

    def neighbors(self, m: int) -> list[int]:
        """In-neighbourhood of ``m`` (including ``m`` itself), sorted."""
        return sorted(set(self.interface[m]) | {m})

    @property
    def links(self) -> list[tuple[int, int]]:
        """Directed links ``(j, m)``: ``j`` sends boundary data to ``m``."""
        return [(j, m) for m in range(self.node_count) for j in sorted(self.interface[m])]

    @cached_property
    def offsets(self) -> np.ndarray:
        sizes = [len(ix) for ix in self.internal]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def augmented_dim(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def augmented_index(self) -> np.ndarray:
        """Global vertex id of each augmented coordinate (node-major)."""
        return np.concatenate(self.internal).astype(np.int64) if self.internal else np.zeros(0, np.int64)

    @cached_property
    def copies(self) -> list[list[tuple[int, int]]]:
        """For each global vertex, the list of ``(node, local index)`` holding it."""
        out: list[list[tuple[int, int]]] = [[] for _ in range(self.n_vertices)]
        for m, ix in enumerate(self.internal):
            for loc, v in enumerate(ix.tolist()):
                out[v].append((m, loc))
        return out

    def local_position(self, m: int, vertices: np.ndarray) -> np.ndarray:
        """Positions of global ``vertices`` inside node ``m``'s state vector."""
        ix = self.internal[m]
        pos = np.searchsorted(ix, vertices)
        if np.any(pos >= ix.size) or np.any(ix[np.minimum(pos, ix.size - 1)] != vertices):
            raise DecompositionError(f"vertices not internal to node {m}")
        return pos

    @cached_property
    def send_positions(self) -> dict[tuple[int, int], np.ndarray]:
        """``(j, m)`` -> positions in node j's state of the vertices in J_mj."""
        return {(j, m): self.local_position(j, self.interface[m][j]) for j, m in self.links}

    def duplicate(self, x: np.ndarray) -> np.ndarray:
        """Augmented vector holding one copy of ``x`` per node that owns each vertex."""
        return np.asarray(x)[self.augmented_index]

    def split(self, xt: np.ndarray) -> list[np.ndarray]:
        o = self.offsets
        return [xt[o[m]:o[m + 1]] for m in range(self.node_count)]

    def gather_first(self, xt: np.ndarray) -> np.ndarray:
        """Global vector taking, for each vertex, its first augmented copy."""
        first = np.full(self.n_vertices, -1, dtype=np.int64)
        idx = self.augmented_index
        for k in range(idx.size - 1, -1, -1):
            first[idx[k]] = k
        return np.asarray(xt)[first]

    def gather_mean(self, xt: np.ndarray) -> np.ndarray:
        """Global vector averaging all copies of each vertex."""
        xt = np.asarray(xt, dtype=float)
        idx = self.augmented_index
        counts = np.bincount(idx, minlength=self.n_vertices).astype(float)
        out = np.zeros((self.n_vertices,) + xt.shape[1:])
        np.add.at(out, idx, xt)
        return out / counts.reshape((-1,) + (1,) * (xt.ndim - 1))

    def check(self) -> None:
        """Raise DecompositionError if any partition law fails."""
        covered = np.zeros(self.n_vertices, dtype=bool)
        for m in range(self.node_count):
            own = set(self.internal[m].tolist())
            covered[self.internal[m]] = True
            seen = set(own)
            for j, ix in self.interface[m].items():
                if j == m:
                    raise DecompositionError(f"node {m} lists itself as interface neighbour")
                s = set(ix.tolist())
                if s & seen:
                    raise DecompositionError(f"interface sets of node {m} overlap")
                seen |= s
                if not s <= set(self.internal[j].tolist()):
                    raise DecompositionError(f"J_{m}{j} is not internal to node {j}")
            if seen != set(self.vertices[m].tolist()):
                raise DecompositionError(f"node {m}: internal and interface sets do not cover the subdomain")
        if not covered.all():
            raise DecompositionError(f"vertex {int(np.flatnonzero(~covered)[0])} is internal to no node")


def rectangle_seed_partition(mesh: Mesh, blocks: Sequence[Sequence[float]]) -> np.ndarray:
    """Assign each vertex to the first block ``(x0, x1, y0, y1)`` containing it."""
    v = mesh.vertices
    owner = np.full(mesh.n_vertices, -1, dtype=np.int64)
    tol = 1e-9
    for m, (x0, x1, y0, y1) in enumerate(blocks):
        inside = (v[:, 0] >= x0 - tol) & (v[:, 0] <= x1 + tol) & (v[:, 1] >= y0 - tol) & (v[:, 1] <= y1 + tol)
        owner[(owner < 0) & inside] = m
    if np.any(owner < 0):
        bad = int(np.flatnonzero(owner < 0)[0])
        raise DecompositionError(f"vertex {bad} at {tuple(v[bad])} lies in no seed block")
    return owner


def decompose(mesh: Mesh, seed_partition, overlap_layers: int = 1) -> Decomposition:
    """Grow overlapping subdomains from a vertex seed partition.

    Subdomain ``m`` starts as the triangles touching its seed vertices and
    is grown by ``overlap_layers`` element layers.  Interface vertices go to
    the lowest-numbered other node in which they are internal.
    """
    seed = np.asarray(seed_partition, dtype=np.int64)
    if seed.shape != (mesh.n_vertices,):
        raise DecompositionError("seed partition must assign every vertex")
    if overlap_layers < 1:
        raise DecompositionError("overlap_layers must be >= 1")
    n_nodes = int(seed.max()) + 1 if seed.size else 0
    if seed.min() < 0 or any(not np.any(seed == m) for m in range(n_nodes)):
        raise DecompositionError("seed partition must have N non-empty parts labelled 0..N-1")

    vert_tris = mesh.vertex_triangles()
    tris = mesh.triangles
    tri_sets, vert_sets, internal = [], [], []
    for m in range(n_nodes):
        in_tri = np.zeros(mesh.n_triangles, dtype=bool)
        for v in np.flatnonzero(seed == m):
            in_tri[vert_tris[v]] = True
        for _ in range(overlap_layers):
            touched = np.zeros(mesh.n_vertices, dtype=bool)
            touched[tris[in_tri].ravel()] = True
            in_tri |= touched[tris].any(axis=1)
        verts = np.unique(tris[in_tri].ravel())
        own = np.array([v for v in verts.tolist() if in_tri[vert_tris[v]].all()], dtype=np.int64)
        tri_sets.append(np.flatnonzero(in_tri))
        vert_sets.append(verts)
        internal.append(own)

    internal_mask = np.zeros((n_nodes, mesh.n_vertices), dtype=bool)
    for m, own in enumerate(internal):
        internal_mask[m, own] = True

    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[mesh.edges.ravel()] = True

    interface, outer = [], []
    for m in range(n_nodes):
        groups: dict[int, list[int]] = {}
        for v in np.setdiff1d(vert_sets[m], internal[m]).tolist():
            owners = [j for j in np.flatnonzero(internal_mask[:, v]).tolist() if j != m]
            if not owners:
                raise DecompositionError(
                    f"interface vertex {v} of node {m} is internal to no other subdomain")
            groups.setdefault(owners[0], []).append(v)
        interface.append({j: np.array(sorted(vs), dtype=np.int64) for j, vs in sorted(groups.items())})
        outer.append(internal[m][on_boundary[internal[m]]])

    dec = Decomposition(
        n_vertices=mesh.n_vertices,
        triangles=tuple(tri_sets),
        vertices=tuple(vert_sets),
        internal=tuple(internal),
        interface=tuple(interface),
        outer_boundary=tuple(outer),
    )
    dec.check()
    return dec


# --------------------------------------------------------------------------- #
# local blocks and augmented system

@dataclass(frozen=True, eq=False)
class LocalBlocks:
    """Rows J_m of the global M, S split by column into J_m and each J_mj."""

    node: int
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    mass_coupling: dict[int, sp.csr_matrix]
    stiffness_coupling: dict[int, sp.csr_matrix]


def extract_local_blocks(M, S, dec: Decomposition, m: int) -> LocalBlocks:
    M = sp.csr_matrix(M)
    S = sp.csr_matrix(S)
    rows = dec.internal[m]
    Mr, Sr = M[rows], S[rows]
    Mc, Sc = {}, {}
    for j, cols in dec.interface[m].items():
        Mc[j] = Mr[:, cols].tocsr()
        Sc[j] = Sr[:, cols].tocsr()
    return LocalBlocks(m, Mr[:, rows].tocsr(), Sr[:, rows].tocsr(), Mc, Sc)


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """Split ``M~ = M_D + M_F``, ``S~ = S_D + S_F`` of the stacked local systems."""

    mass_diag: sp.csr_matrix
    stiffness_diag: sp.csr_matrix
    mass_coupling: sp.csr_matrix
    stiffness_coupling: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.mass_diag.shape[0]

    @property
    def mass(self) -> sp.csr_matrix:
        return (self.mass_diag + self.mass_coupling).tocsr()

    @property
    def stiffness(self) -> sp.csr_matrix:
        return (self.stiffness_diag + self.stiffness_coupling).tocsr()


def build_augmented(M, S, dec: Decomposition) -> AugmentedSystem:
    blocks = [extract_local_blocks(M, S, dec, m) for m in range(dec.node_count)]
    n = dec.augmented_dim
    o = dec.offsets
    MD = sp.block_diag([b.mass for b in blocks], format="csr") if blocks else sp.csr_matrix((0, 0))
    SD = sp.block_diag([b.stiffness for b in blocks], format="csr") if blocks else sp.csr_matrix((0, 0))

    def coupling(attr: str) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for b in blocks:
            m = b.node
            for j, blk in getattr(b, attr).items():
                coo = blk.tocoo()
                pos = dec.send_positions[(j, m)]
                rows.append(coo.row + o[m])
                cols.append(pos[coo.col] + o[j])
                vals.append(coo.data)
        if not rows:
            return sp.csr_matrix((n, n))
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()

    return AugmentedSystem(MD, SD, coupling("mass_coupling"), coupling("stiffness_coupling"))


# --------------------------------------------------------------------------- #
# text dump

def dump_decomposition(dec: Decomposition, path=None) -> str:
    """Text dump: per node its vertex list, internal set and interface sets."""
    lines = [f"nodes {dec.node_count} vertices {dec.n_vertices} augmented {dec.augmented_dim}"]
    for m in range(dec.node_count):
        lines.append(f"node {m}")
        lines.append("vertices " + " ".join(map(str, dec.vertices[m].tolist())))
        lines.append("internal " + " ".join(map(str, dec.internal[m].tolist())))
        for j, ix in dec.interface[m].items():
            lines.append(f"interface {j} " + " ".join(map(str, ix.tolist())))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    return text


def load_decomposition(text: str, mesh: Mesh) -> Decomposition:
    """Inverse of :func:`dump_decomposition` (triangles rebuilt from the mesh)."""
    verts, internal, interface = [], [], []
    n_vertices = None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "nodes":
            n_vertices = int(parts[3])
        elif key == "node":
            interface.append({})
        elif key == "vertices":
            verts.append(np.array(parts[1:], dtype=np.int64))
        elif key == "internal":
            internal.append(np.array(parts[1:], dtype=np.int64))
        elif key == "interface":
            interface[-1][int(parts[1])] = np.array(parts[2:], dtype=np.int64)
        else:
            raise DecompositionError(f"unrecognised record {key!r}")
    if n_vertices != mesh.n_vertices:
        raise DecompositionError("dump does not match the mesh")
    vmask = [np.isin(np.arange(mesh.n_vertices), v) for v in verts]
    vert_tris = mesh.vertex_triangles()
    tri_sets = []
    for m, own in enumerate(internal):
        t = np.unique(np.concatenate([vert_tris[v] for v in own.tolist()])) if own.size else np.zeros(0, np.int64)
        tri_sets.append(t[vmask[m][mesh.triangles[t]].all(axis=1)])
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[mesh.edges.ravel()] = True
    dec = Decomposition(mesh.n_vertices, tuple(tri_sets), tuple(verts), tuple(internal),
                        tuple(interface), tuple(ix[on_boundary[ix]] for ix in internal))
    dec.check()
    return dec
