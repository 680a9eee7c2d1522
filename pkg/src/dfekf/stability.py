"""Stability analysis of the consensus discretization and of the distributed filter.

Covers zero-stability of the hybrid Euler scheme (with a companion-matrix
cross-check), relaxation-factor selection, the steady-state Riccati
fixed point of the stacked filter, the covariance-boost condition and the
spectral radius of the error dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomposition import AugmentedSystem

__all__ = [
    "StabilityReport",
    "ZeroStability",
    "OmegaChoice",
    "RiccatiResult",
    "GammaCheck",
    "ConsistencyResult",
    "InternalConsistencyError",
    "ObservabilityError",
    "ConvergenceError",
    "zero_stability",
    "zero_stability_companion",
    "rho_omega",
    "select_omega",
    "observability",
    "steady_riccati",
    "riccati_residual",
    "weighted_norm",
    "check_gamma_condition",
    "error_dynamics",
    "consistency_order",
    "augmented_noise",
]


class InternalConsistencyError(RuntimeError):
    pass


class ObservabilityError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


def _spectral_radius(A: np.ndarray) -> float:
    if A.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _coupling_operator(aug: AugmentedSystem) -> np.ndarray:
    """Dense ``M_D^{-1} M_F``."""
    lu = spla.splu(sp.csc_matrix(aug.mass_diag), permc_spec="NATURAL")
    return lu.solve(aug.mass_coupling.toarray())


# --------------------------------------------------------------------------- #
# zero-stability

@dataclass(frozen=True)
class ZeroStability:
    rho: float
    stable: bool
    converged: bool = True
    method: str = "dense"


def zero_stability(aug: AugmentedSystem, tol: float = 1e-12, maxiter: int = 20000,
                   dense_below: int = 64) -> ZeroStability:
    """Spectral radius of ``M_D^{-1} M_F`` from the solve-apply operator.

    Arnoldi (ARPACK) is used above ``dense_below`` states; a non-convergent
    iteration is reported as inconclusive with the last Ritz estimate.
    """
    n = aug.dim
    if aug.mass_coupling.nnz == 0 or n == 0:
        return ZeroStability(0.0, True)
    if n < dense_below:
        rho = _spectral_radius(_coupling_operator(aug))
        return ZeroStability(rho, rho < 1.0)
    lu = spla.splu(sp.csc_matrix(aug.mass_diag), permc_spec="NATURAL")
    MF = aug.mass_coupling.tocsr()
    op = spla.LinearOperator((n, n), matvec=lambda v: lu.solve(MF @ v), dtype=float)
    v0 = np.random.default_rng(0).standard_normal(n)
    try:
        vals = spla.eigs(op, k=min(6, n - 2), which="LM", v0=v0, tol=tol, maxiter=maxiter,
                         return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        last = exc.eigenvalues
        rho = float(np.max(np.abs(last))) if len(last) else float("nan")
        return ZeroStability(rho, False, converged=False, method="arnoldi")
    rho = float(np.max(np.abs(vals)))
    return ZeroStability(rho, rho < 1.0, method="arnoldi")


def zero_stability_companion(aug: AugmentedSystem, reference: ZeroStability | None = None,
                             tol: float = 1e-8) -> ZeroStability:
    """Spectral radius of the two-step companion matrix without its unit eigenvalues.

    The companion ``[[I, -X], [0, -X]]`` has ``n`` eigenvalues equal to one
    from the identity block; the remaining ones are the spectrum of ``-X``.
    With ``reference`` given, disagreement beyond ``tol`` raises
    :class:`InternalConsistencyError`.
    """
    n = aug.dim
    X = _coupling_operator(aug) if n else np.zeros((0, 0))
    Z = np.zeros((n, n))
    comp = np.block([[np.eye(n), -X], [Z, -X]])
    ev = np.linalg.eigvals(comp) if n else np.zeros(0)
    order = np.argsort(np.abs(ev - 1.0), kind="stable")
    rest = ev[order[n:]]
    rho = float(np.max(np.abs(rest))) if rest.size else 0.0
    # eigenvalues of defective blocks are only accurate to ~sqrt(eps)
    if reference is not None and reference.converged:
        if abs(rho - reference.rho) > tol * max(1.0, reference.rho) or (rho < 1.0) != reference.stable:
            raise InternalConsistencyError(
                f"companion radius {rho!r} disagrees with operator radius {reference.rho!r}")
    return ZeroStability(rho, rho < 1.0, method="companion")


def rho_omega(X: np.ndarray, omega: float) -> float:
    """``rho(omega X - (1 - omega) I)``, the zero-stability radius of the relaxed scheme."""
    n = X.shape[0]
    return _spectral_radius(omega * X - (1.0 - omega) * np.eye(n))


@dataclass(frozen=True)
class OmegaChoice:
    omega: float
    rho: float
    rho_omega: float
    from_bound: bool
    stable: bool


def select_omega(aug_or_X, safety: float = 0.05, grid: float = 1e-3) -> OmegaChoice:
    """Relaxation factor for the hybrid Euler scheme.

    Returns 1 when the plain scheme is zero-stable.  Otherwise takes the
    largest grid value with ``max(omega * rho, 1 - omega) <= 1 - safety``
    and recomputes the exact radius.  The max-bound is only guaranteed when
    the spectrum of ``M_D^{-1} M_F`` lies in the right half plane, so if
    the exact radius is not below one the grid is searched on the exact
    radius instead; ``stable`` is False when no grid value works (an
    eigenvalue with real part <= -1 cannot be relaxed away).
    """
    if not 0.0 < safety < 1.0:
        raise ValueError("safety margin must lie in (0, 1)")
    X = aug_or_X if isinstance(aug_or_X, np.ndarray) else _coupling_operator(aug_or_X)
    rho = _spectral_radius(X)
    if rho < 1.0:
        return OmegaChoice(1.0, rho, rho, True, True)
    steps = int(round(1.0 / grid))
    omegas = [k / steps for k in range(steps, 0, -1)]
    target = 1.0 - safety
    pick = next((w for w in omegas if max(w * rho, 1.0 - w) <= target + 1e-15), None)
    if pick is not None:
        r = rho_omega(X, pick)
        if r < 1.0:
            return OmegaChoice(pick, rho, r, True, True)
    ev = np.linalg.eigvals(X)
    for w in omegas:
        r = float(np.max(np.abs(w * ev - (1.0 - w))))
        if r <= target:
            return OmegaChoice(w, rho, r, False, True)
    w = pick if pick is not None else omegas[-1]
    return OmegaChoice(w, rho, rho_omega(X, w), pick is not None, False)


# --------------------------------------------------------------------------- #
# observability

def observability(A: np.ndarray, C: np.ndarray, tol: float = 1e-8,
                  cluster_tol: float = 1e-9) -> tuple[bool, float]:
    """Popov-Belevitch-Hautus test on the eigenvectors of ``A``.

    Eigenvalues closer than ``cluster_tol`` (relative) are grouped and
    ``C`` must have full column rank on each eigenspace.  Returns the
    verdict and the smallest normalised singular value found.  This avoids
    forming the (numerically rank-deficient) Kalman observability matrix.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    n = A.shape[0]
    if n == 0:
        return True, np.inf
    if C.shape[0] == 0:
        return False, 0.0
    if np.allclose(A, A.T):
        w, V = np.linalg.eigh(A)
    else:
        w, V = np.linalg.eig(A)
    scale = max(1.0, float(np.max(np.abs(w))))
    cnorm = np.linalg.norm(C, 2)
    order = np.argsort(w.real, kind="stable")
    w, V = w[order], V[:, order]
    worst = np.inf
    i = 0
    while i < n:
        j = i + 1
        while j < n and abs(w[j] - w[i]) <= cluster_tol * scale:
            j += 1
        Vc = V[:, i:j]
        Vc = np.linalg.qr(Vc)[0] if j - i > 1 else Vc / np.linalg.norm(Vc)
        sv = np.linalg.svd(C @ Vc, compute_uv=False)
        smin = float(sv[-1]) / cnorm if sv.size >= j - i else 0.0
        worst = min(worst, smin)
        i = j
    return worst > tol, worst


def local_observability(A: np.ndarray, C: np.ndarray, M: np.ndarray | None = None,
                        K: np.ndarray | None = None, tol: float = 1e-8) -> tuple[bool, float]:
    """Observability of ``(A^m, C^m)`` with ``A^m = K^{-1} M``.

    When the symmetric factors are supplied the eigenvectors come from the
    generalized symmetric problem ``M v = theta K v``, which is exact and
    real; otherwise the dense test is used.
    """
    if M is None or K is None:
        return observability(A, C, tol)
    theta, V = sla.eigh(M, K)
    C = np.asarray(C, dtype=float)
    if C.shape[0] == 0:
        return False, 0.0
    cnorm = np.linalg.norm(C, 2)
    worst = np.inf
    i, n = 0, theta.size
    while i < n:
        j = i + 1
        while j < n and abs(theta[j] - theta[i]) <= 1e-9 * max(1.0, abs(theta[i])):
            j += 1
        Vc = np.linalg.qr(V[:, i:j])[0]
        sv = np.linalg.svd(C @ Vc, compute_uv=False)
        worst = min(worst, float(sv[-1]) / cnorm if sv.size >= j - i else 0.0)
        i = j
    return worst > tol, worst


# --------------------------------------------------------------------------- #
# steady-state Riccati

@dataclass(eq=False)
class RiccatiResult:
    P: np.ndarray
    gain: np.ndarray
    P_pred: np.ndarray
    iterations: int
    residual: float


def _phi(A: np.ndarray, Q: np.ndarray, L: int, gamma: float) -> np.ndarray:
    Phi = np.zeros_like(Q)
    term = Q.copy()
    for i in range(L):
        Phi += gamma ** (2 * i) * term
        term = A @ term @ A.T
    return Phi


def _correct_cov(Pp: np.ndarray, C: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if C.shape[0] == 0:
        return Pp, np.zeros((Pp.shape[0], 0))
    Sinn = R + C @ Pp @ C.T
    cf = sla.cho_factor(0.5 * (Sinn + Sinn.T))
    K = sla.cho_solve(cf, C @ Pp).T
    P = Pp - K @ C @ Pp
    return 0.5 * (P + P.T), K


def riccati_residual(P: np.ndarray, A_L: np.ndarray, Phi: np.ndarray, C: np.ndarray, R: np.ndarray,
                     gamma_L: float) -> float:
    """Relative residual of ``P^{-1} = (g^2 A_L P A_L^T + Phi)^{-1} + C^T R^{-1} C`` (information form)."""
    Pp = gamma_L ** 2 * A_L @ P @ A_L.T + Phi
    info = np.linalg.inv(0.5 * (Pp + Pp.T)) + C.T @ np.linalg.solve(R, C)
    rhs = np.linalg.inv(0.5 * (info + info.T))
    return float(np.linalg.norm(P - rhs) / np.linalg.norm(P))


def steady_riccati(A_D: np.ndarray, L: int, gamma: float, Q: np.ndarray, C: np.ndarray,
                   R: np.ndarray, tol: float = 1e-10, max_iter: int = 100000,
                   P0: np.ndarray | None = None, check_observability: bool = True) -> RiccatiResult:
    """Fixed point of the stacked covariance recursion over one sampling interval.

    ``gamma`` is the per-round boost.  The iterate is the posterior
    covariance; each step applies ``L`` boosted predictions followed by the
    correction.  Returns the posterior ``P``, the gain ``P C^T R^{-1}`` and
    the steady prediction covariance.
    """
    A_D = np.asarray(A_D, dtype=float)
    n = A_D.shape[0]
    A_L = np.linalg.matrix_power(A_D, L)
    if check_observability:
        ok, smin = observability(A_L, C)
        if not ok:
            raise ObservabilityError(f"(A_D^L, C) is not observable (min singular value {smin:.3e})")
    Phi = _phi(A_D, np.asarray(Q, dtype=float), L, gamma)
    gL2 = gamma ** (2 * L)
    P = np.eye(n) if P0 is None else np.array(P0, dtype=float)
    for it in range(1, max_iter + 1):
        Pp = gL2 * A_L @ P @ A_L.T + Phi
        Pn, K = _correct_cov(0.5 * (Pp + Pp.T), C, R)
        change = np.linalg.norm(Pn - P) / np.linalg.norm(P)
        P = Pn
        if change < tol:
            break
    else:
        res = riccati_residual(P, A_L, Phi, C, R, gamma ** L)
        raise ConvergenceError(f"Riccati iteration did not converge in {max_iter} steps", res)
    Pp = gL2 * A_L @ P @ A_L.T + Phi
    _, K = _correct_cov(0.5 * (Pp + Pp.T), C, R)
    res = riccati_residual(P, A_L, Phi, C, R, gamma ** L)
    return RiccatiResult(P, K, Pp, it, res)


# --------------------------------------------------------------------------- #
# gamma condition and error dynamics

def _sqrtm_spd(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    if w.min() <= 0:
        raise ValueError("weight must be positive definite")
    s = np.sqrt(w)
    return (V * s) @ V.T, (V / s) @ V.T


def weighted_norm(X: np.ndarray, W: np.ndarray) -> float:
    """Operator norm induced by ``|v|_W = sqrt(v^T W v)``.

    Equals ``sqrt(lambda_max(W^{-1/2} X^T W X W^{-1/2}))``.
    """
    Wh, Wih = _sqrtm_spd(W)
    G = Wih @ X.T @ W @ X @ Wih
    return float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (G + G.T))[-1], 0.0)))


@dataclass(frozen=True)
class GammaCheck:
    bound: float
    gamma_L: float
    passed: bool
    contraction: float


def check_gamma_condition(P: np.ndarray, A_D: np.ndarray, A_FL: np.ndarray, L: int, gamma: float,
                          gain: np.ndarray | None = None, C: np.ndarray | None = None) -> GammaCheck:
    """Sufficient covariance-boost condition ``gamma^L > |I + (A_D^L)^{-1} A_FL|``.

    The norm is weighted by the information matrix ``P^{-1}``: the Riccati
    fixed point gives ``P >= gamma^{2L} G P G^T`` with
    ``G = (I - K C) A_D^L``, i.e. ``|G| <= gamma^{-L}`` in that norm.  With
    ``gain`` and ``C`` supplied, ``contraction`` reports ``gamma^L |G|``.
    """
    n = A_D.shape[0]
    A_L = np.linalg.matrix_power(A_D, L)
    X = np.eye(n) + np.linalg.solve(A_L, A_FL)
    W = np.linalg.inv(0.5 * (P + P.T))
    bound = weighted_norm(X, W)
    gL = gamma ** L
    contraction = float("nan")
    if gain is not None and C is not None:
        G = (np.eye(n) - gain @ C) @ A_L
        contraction = gL * weighted_norm(G, W)
    return GammaCheck(bound, gL, gL > bound, contraction)


def error_dynamics(gain: np.ndarray, C: np.ndarray, A_D: np.ndarray, A_FL: np.ndarray, L: int) -> float:
    """``rho((I - K C)(A_D^L + A_FL))``."""
    n = A_D.shape[0]
    A_L = np.linalg.matrix_power(A_D, L)
    return _spectral_radius((np.eye(n) - gain @ C) @ (A_L + A_FL))


# --------------------------------------------------------------------------- #
# consistency order

@dataclass(frozen=True)
class ConsistencyResult:
    slope: float
    deltas: tuple[float, ...]
    errors: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        e = self.errors
        return tuple(e[i] / e[i + 1] for i in range(len(e) - 1))


def _manufactured(n: int, period: float) -> tuple[Callable, Callable]:
    idx = np.arange(n)
    a = 1.0 + 0.5 * np.cos(0.7 * idx)
    b = 0.5 * np.sin(1.3 * idx + 0.2)
    w = 2.0 * np.pi / period

    def xi(t):
        return a * np.cos(w * t) + b * np.sin(2 * w * t)

    def dxi(t):
        return -w * a * np.sin(w * t) + 2 * w * b * np.cos(2 * w * t)

    return xi, dxi


def consistency_order(aug: AugmentedSystem, horizon: float = 1.0, delta0: float = 0.05,
                      halvings: int = 4, solution: tuple[Callable, Callable] | None = None) -> ConsistencyResult:
    """Empirical global order of the hybrid Euler scheme.

    A manufactured trajectory ``xi`` is made exact by the forcing
    ``u = M~ xi' + S~ xi``; the scheme is integrated to ``horizon`` at
    ``delta0 / 2^k`` and the log-log slope of the terminal error is fitted.
    """
    MD, SD = aug.mass_diag.tocsc(), aug.stiffness_diag.tocsc()
    MF, SF = aug.mass_coupling.tocsr(), aug.stiffness_coupling.tocsr()
    Mt, St = (MD + MF).tocsr(), (SD + SF).tocsr()
    xi, dxi = solution if solution is not None else _manufactured(aug.dim, horizon)
    deltas, errors = [], []
    for k in range(halvings + 1):
        d = delta0 / 2 ** k
        steps = int(round(horizon / d))
        lu = spla.splu((MD + d * SD).tocsc(), permc_spec="NATURAL")
        x_prev, x = xi(-d), xi(0.0)
        for l in range(steps):
            t1 = (l + 1) * d
            u = Mt @ dxi(t1) + St @ xi(t1)
            rhs = d * u + MD @ x - MF @ (x - x_prev) - d * (SF @ x)
            x_prev, x = x, lu.solve(rhs)
        deltas.append(d)
        errors.append(float(np.linalg.norm(x - xi(steps * d)) / np.sqrt(aug.dim)))
    slope = float(np.polyfit(np.log(deltas), np.log(errors), 1)[0])
    return ConsistencyResult(slope, tuple(deltas), tuple(errors))


# --------------------------------------------------------------------------- #
# report

def augmented_noise(models, dec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block-diagonal ``(C~, Q~, R~)`` stacked from local models."""
    Cs = sla.block_diag(*[m.C for m in models])
    Qs = sla.block_diag(*[m.Q for m in models])
    Rs = sla.block_diag(*[m.R for m in models])
    return np.asarray(Cs), np.asarray(Qs), np.asarray(Rs)


@dataclass(eq=False)
class StabilityReport:
    """Collected stability quantities; ``verdicts`` maps check name to pass/fail."""

    rho_zero: float
    omega_used: float
    rho_omega: float
    P_star: np.ndarray | None = None
    gamma_bound: float = float("nan")
    gamma_L_actual: float = float("nan")
    rho_error: float = float("nan")
    extras: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    informational: tuple = ("gamma_condition",)

    @property
    def ok(self) -> bool:
        return all(v for k, v in self.verdicts.items() if k not in self.informational)

    def to_text(self) -> str:
        lines = [
            f"rho_zero = {self.rho_zero!r}",
            f"omega_used = {self.omega_used!r}",
            f"rho_omega = {self.rho_omega!r}",
            f"gamma_bound = {self.gamma_bound!r}",
            f"gamma_L_actual = {self.gamma_L_actual!r}",
            f"rho_error = {self.rho_error!r}",
        ]
        for k, v in self.extras.items():
            lines.append(f"{k} = {v!r}")
        for k, v in self.verdicts.items():
            tag = " (sufficient condition, informational)" if k in self.informational else ""
            lines.append(f"verdict.{k} = {'pass' if v else 'fail'}{tag}")
        lines.append(f"overall = {'pass' if self.ok else 'fail'}")
        return "\n".join(lines) + "\n"
