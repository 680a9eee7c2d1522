"""Backward-Euler state-space models: centralized, local (hybrid Euler) and L-step composed."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomposition import Decomposition, LocalBlocks, extract_local_blocks
from .mesh import FeSystem, Mesh, interpolation_matrix

__all__ = [
    "CentralModel",
    "LocalModel",
    "GlobalComposedModel",
    "MeasurementError",
    "discretize_central",
    "discretize_local",
    "discretize_local_omega",
    "build_measurement",
    "local_models",
    "stack_local",
    "compose_L_steps",
    "dump_matrix",
]


class MeasurementError(ValueError):
    pass


def _factor(A) -> spla.SuperLU:
    # natural ordering keeps the factorization (and hence every solve) deterministic
    return spla.splu(sp.csc_matrix(A), permc_spec="NATURAL")


def _solve(lu: spla.SuperLU, rhs) -> np.ndarray:
    rhs = rhs.toarray() if sp.issparse(rhs) else np.asarray(rhs, dtype=float)
    if rhs.size == 0:
        return np.zeros(rhs.shape)
    return lu.solve(rhs)


@dataclass(frozen=True, eq=False)
class CentralModel:
    """``x_{k+1} = A x_k + B u_k + w_k``, ``y_k = C x_k + v_k``.

    ``B`` is never stored; :meth:`input_response` solves with the factored
    ``M + dt S`` instead.
    """

    A: np.ndarray
    dt: float
    factor: spla.SuperLU = field(repr=False)
    C: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def input_response(self, u: np.ndarray) -> np.ndarray:
        return self.dt * _solve(self.factor, u)

    @property
    def B(self) -> np.ndarray:
        """Dense ``(M + dt S)^{-1} dt`` built column by column (small systems only)."""
        return self.input_response(np.eye(self.n))

    def with_noise(self, C, Q, R) -> "CentralModel":
        return replace(self, C=np.asarray(C, float), Q=np.asarray(Q, float), R=np.asarray(R, float))


def discretize_central(system: FeSystem | tuple, dt: float) -> CentralModel:
    """Backward Euler: ``(M + dt S) A = M``."""
    if not dt > 0:
        raise ValueError("integration step must be positive")
    M, S = (system.mass, system.stiffness) if isinstance(system, FeSystem) else system
    M = sp.csc_matrix(M)
    S = sp.csc_matrix(S)
    lu = _factor(M + dt * S)
    A = _solve(lu, M)
    return CentralModel(A=A, dt=float(dt), factor=lu)


@dataclass(frozen=True, eq=False)
class LocalModel:
    """Node ``m`` recursion

    ``x_l = A x_{l-1} + A_prev x_{l-2} + sum_j (A_j p_j^{l-1} + Abar_j p_j^{l-2}) + B u_l``

    where ``p_j`` are the neighbour values on J_mj.  ``A_prev`` is only
    present for the relaxed (omega < 1) scheme.  Coupling matrices are
    stored compactly with one column per vertex of J_mj.
    """

    node: int
    A: np.ndarray
    coupling: dict[int, np.ndarray]
    coupling_delayed: dict[int, np.ndarray]
    delta: float
    factor: spla.SuperLU = field(repr=False)
    input_scale: float = 1.0
    A_prev: np.ndarray | None = None
    C: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    sensors: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def input_response(self, u: np.ndarray) -> np.ndarray:
        return self.input_scale * self.delta * _solve(self.factor, u)

    @property
    def B(self) -> np.ndarray:
        return self.input_response(np.eye(self.n))


def discretize_local(blocks: LocalBlocks, delta: float) -> LocalModel:
    """Hybrid Euler local model for one node (implicit own terms, delayed couplings)."""
    return discretize_local_omega(blocks, delta, 1.0)


def discretize_local_omega(blocks: LocalBlocks, delta: float, omega: float) -> LocalModel:
    """Relaxed hybrid Euler local model.

    Multiplying the relaxed scheme by ``omega * delta`` gives
    ``(M + w d S) x_{l+1} = (2-w) M x_l - (1-w) M x_{l-1}
    - w (d S_F + M_F) x_l + w M_F x_{l-1} + w d u``; ``omega = 1`` is the
    plain hybrid Euler scheme.
    """
    if not delta > 0:
        raise ValueError("consensus step must be positive")
    if not 0.0 < omega <= 1.0:
        raise ValueError(f"omega must lie in (0, 1], got {omega}")
    Mmm = sp.csc_matrix(blocks.mass)
    Smm = sp.csc_matrix(blocks.stiffness)
    lu = _factor(Mmm + omega * delta * Smm)
    A = (2.0 - omega) * _solve(lu, Mmm)
    A_prev = None if omega == 1.0 else -(1.0 - omega) * _solve(lu, Mmm)
    coupling, delayed = {}, {}
    for j in sorted(blocks.mass_coupling):
        Mmj = blocks.mass_coupling[j]
        Smj = blocks.stiffness_coupling[j]
        coupling[j] = omega * _solve(lu, -delta * Smj - Mmj)
        delayed[j] = omega * _solve(lu, Mmj)
    return LocalModel(node=blocks.node, A=A, coupling=coupling, coupling_delayed=delayed,
                      delta=float(delta), factor=lu, input_scale=float(omega), A_prev=A_prev)


def build_measurement(mesh: Mesh, sensors, dec: Decomposition | None = None):
    """Point-sampling matrix ``C`` and, with a decomposition, per-node ``C^m``.

    A sensor is assigned to node ``m`` when every vertex carrying a
    non-zero interpolation weight is internal to ``m``; overlap sensors are
    therefore seen by several nodes.  Returns ``C`` alone, or
    ``(C, [(C^m, sensor_ids^m), ...])``.
    """
    pts = np.atleast_2d(np.asarray(sensors, dtype=float))
    try:
        C = interpolation_matrix(mesh, pts)
    except ValueError as exc:
        raise MeasurementError(str(exc)) from exc
    C = C.toarray()
    if dec is None:
        return C
    per_node = []
    for m in range(dec.node_count):
        own = dec.internal[m]
        mask = np.zeros(mesh.n_vertices, dtype=bool)
        mask[own] = True
        ids = [i for i in range(len(pts)) if mask[np.flatnonzero(C[i])].all()]
        Cm = C[np.ix_(ids, own)] if ids else np.zeros((0, own.size))
        per_node.append((Cm, np.array(ids, dtype=np.int64)))
    covered = np.zeros(len(pts), dtype=bool)
    for _, ids in per_node:
        covered[ids] = True
    if not covered.all():
        i = int(np.flatnonzero(~covered)[0])
        raise MeasurementError(f"sensor {i} at {tuple(pts[i])} is not internal to any node")
    return C, per_node


def local_models(M, S, dec: Decomposition, delta: float, omega: float = 1.0) -> list[LocalModel]:
    return [discretize_local_omega(extract_local_blocks(M, S, dec, m), delta, omega)
            for m in range(dec.node_count)]


def stack_local(models: Sequence[LocalModel], dec: Decomposition):
    """Dense augmented ``(A_D, A_F, Abar_F)`` assembled from the local models."""
    n = dec.augmented_dim
    o = dec.offsets
    AD = np.zeros((n, n))
    AF = np.zeros((n, n))
    AbF = np.zeros((n, n))
    for mod in models:
        m = mod.node
        rows = slice(o[m], o[m + 1])
        AD[rows, rows] = mod.A
        for j, blk in mod.coupling.items():
            cols = o[j] + dec.send_positions[(j, m)]
            AF[rows, cols] += blk
            AbF[rows, cols] += mod.coupling_delayed[j]
    return AD, AF, AbF


@dataclass(eq=False)
class GlobalComposedModel:
    """One-sampling-interval map of the stacked consensus recursion.

    ``x_{q,L} = A_D^L x_{q,0} + A_FL x_{q,0} + B_L U_q + D_L W_q`` with the
    delay buffer initialised to ``x_{q,-1} = x_{q,0}``.
    """

    A_D: np.ndarray
    A_F: np.ndarray
    Abar_F: np.ndarray
    L: int
    A_D_L: np.ndarray
    A_FL: np.ndarray
    _input: np.ndarray = field(repr=False)

    @property
    def transition(self) -> np.ndarray:
        return self.A_D_L + self.A_FL

    def _unroll_injection(self, G: np.ndarray) -> np.ndarray:
        n = self.A_D.shape[0]
        blocks = []
        step = self.A_D + self.A_F
        for ell in range(1, self.L + 1):
            # zero state before round ell, injection at round ell
            x_prev2 = np.zeros((n, G.shape[1]))
            x_prev = np.zeros((n, G.shape[1]))
            x = G.copy()
            for _ in range(ell + 1, self.L + 1):
                x_prev2, x_prev = x_prev, x
                x = step @ x_prev + self.Abar_F @ x_prev2
            blocks.append(x)
        return np.hstack(blocks)

    @cached_property
    def B_L(self) -> np.ndarray:
        return self._unroll_injection(self._input)

    @cached_property
    def D_L(self) -> np.ndarray:
        return self._unroll_injection(np.eye(self.A_D.shape[0]))


def _simulate(step: np.ndarray, delayed: np.ndarray, x0: np.ndarray, L: int) -> np.ndarray:
    x_prev, x = x0, x0
    for _ in range(L):
        x_prev, x = x, step @ x + delayed @ x_prev
    return x


def compose_L_steps(models: Sequence[LocalModel], dec: Decomposition, L: int) -> GlobalComposedModel:
    """Compose L consensus rounds by simulating the recursion on basis vectors."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if any(mod.A_prev is not None for mod in models):
        raise ValueError("composition is defined for the omega = 1 scheme")
    AD, AF, AbF = stack_local(models, dec)
    n = AD.shape[0]
    eye = np.eye(n)
    full = _simulate(AD + AF, AbF, eye, L)
    ADL = np.linalg.matrix_power(AD, L) if n else AD
    o = dec.offsets
    Bt = np.zeros((n, n))
    for mod in models:
        sl = slice(o[mod.node], o[mod.node + 1])
        Bt[sl, sl] = mod.B
    return GlobalComposedModel(A_D=AD, A_F=AF, Abar_F=AbF, L=L, A_D_L=ADL, A_FL=full - ADL, _input=Bt)


def dump_matrix(path, A, comment: str = "") -> None:
    """Matrix-market dump for debugging."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A) if not sp.issparse(A) else A, comment=comment)
