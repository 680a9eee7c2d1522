"""Centralized finite-element Kalman filter."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .model import CentralModel

__all__ = [
    "FilterState",
    "NumericalError",
    "kalman_gain",
    "correct",
    "predict",
    "run",
    "covariance_schedule",
    "run_with_gains",
    "write_trajectory_csv",
]

PRIOR = "prior"
POSTERIOR = "posterior"


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class FilterState:
    """Estimate and covariance at step ``k``.

    ``x`` may carry trailing batch dimensions (one column per Monte Carlo
    run); ``P`` is shared by all columns or None when gains are precomputed.
    """

    x: np.ndarray
    P: np.ndarray | None
    phase: str = PRIOR
    k: int = 1


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def kalman_gain(P: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``P C^T (R + C P C^T)^{-1}`` via a Cholesky solve."""
    if C.shape[0] == 0:
        return np.zeros((P.shape[0], 0))
    PCt = P @ C.T
    Sinn = R + C @ PCt
    Sinn = 0.5 * (Sinn + Sinn.T)
    try:
        cf = np.linalg.cholesky(Sinn)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    # K = PCt Sinn^{-1}  <=>  Sinn K^T = PCt^T
    Kt = np.linalg.solve(cf.T, np.linalg.solve(cf, PCt.T))
    return Kt.T


def correct(state: FilterState, y, C, R, gain: np.ndarray | None = None) -> FilterState:
    """Measurement update; with ``gain`` given only the estimate is updated."""
    if state.phase != PRIOR:
        raise ValueError("correction expects a prior state")
    C = np.asarray(C, dtype=float)
    y = np.asarray(y, dtype=float)
    if C.shape[0] == 0 or y.size == 0:
        return replace(state, phase=POSTERIOR)
    if gain is None:
        if state.P is None:
            raise ValueError("covariance required to compute the gain")
        gain = kalman_gain(state.P, C, np.asarray(R, dtype=float))
        P = _symmetrize(state.P - gain @ C @ state.P)
    else:
        P = None if state.P is None else _symmetrize(state.P - gain @ C @ state.P)
    x = state.x + gain @ (y - C @ state.x)
    return FilterState(x, P, POSTERIOR, state.k)


def predict(state: FilterState, A, B=None, u=None, Q=None) -> FilterState:
    """Time update ``x <- A x + B u``, ``P <- A P A^T + Q``.

    ``B`` may be a matrix or a callable mapping ``u`` to ``B u``.
    """
    if state.phase != POSTERIOR:
        raise ValueError("prediction expects a posterior state")
    x = A @ state.x
    if u is not None and B is not None:
        Bu = B(u) if callable(B) else B @ u
        x = x + (Bu if Bu.ndim == x.ndim else Bu.reshape(Bu.shape + (1,) * (x.ndim - Bu.ndim)))
    P = None
    if state.P is not None:
        P = A @ state.P @ A.T
        if Q is not None:
            P = P + Q
        P = _symmetrize(P)
    return FilterState(x, P, PRIOR, state.k + 1)


def _substeps(model: CentralModel, sample_period: float) -> int:
    ratio = sample_period / model.dt
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
        raise ValueError("sampling period must be a positive multiple of the integration step")
    return steps


def run(model: CentralModel, measurements, x0, P0, sample_period: float,
        inputs=None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the filter over a measurement stream.

    Args:
        measurements: (Q, S) array, row q holding the samples at ``t_{q+1}``.
        x0, P0: prior at the first sampling instant.
        sample_period: ``T_s``; corrections occur every ``T_s / dt`` steps.
        inputs: optional callable ``k -> u_k`` (global step index from 0).

    Returns:
        posterior estimates (Q, n) and the list of posterior covariances.
    """
    ys = np.asarray(measurements, dtype=float)
    if ys.ndim != 2 or ys.shape[1] != model.C.shape[0]:
        raise ValueError("measurement stream does not match the sensor count")
    P0 = np.asarray(P0, dtype=float)
    if not np.allclose(P0, P0.T) or np.linalg.eigvalsh(P0).min() <= 0:
        raise ValueError("initial covariance must be symmetric positive definite")
    steps = _substeps(model, sample_period)
    state = FilterState(np.array(x0, dtype=float), P0, PRIOR, 1)
    estimates, covs = [], []
    k = 0
    for q in range(ys.shape[0]):
        state = correct(state, ys[q], model.C, model.R)
        estimates.append(state.x.copy())
        covs.append(state.P)
        for _ in range(steps):
            u = inputs(k) if inputs is not None else None
            state = predict(state, model.A, model.input_response, u, model.Q)
            state = replace(state, phase=POSTERIOR)
            k += 1
        state = replace(state, phase=PRIOR)
    return np.array(estimates), covs


def covariance_schedule(model: CentralModel, P0, n_samples: int, sample_period: float) -> list[np.ndarray]:
    """Gains of the first ``n_samples`` corrections.

    The covariance recursion of a linear filter does not depend on the data,
    so the gains can be shared by every Monte Carlo run.
    """
    steps = _substeps(model, sample_period)
    P = np.asarray(P0, dtype=float)
    A, Q, C, R = model.A, model.Q, model.C, model.R
    gains = []
    for _ in range(n_samples):
        K = kalman_gain(P, C, R)
        gains.append(K)
        P = _symmetrize(P - K @ C @ P)
        for _ in range(steps):
            P = _symmetrize(A @ P @ A.T + Q)
    return gains


def run_with_gains(model: CentralModel, gains: Sequence[np.ndarray], measurements, x0,
                   sample_period: float) -> np.ndarray:
    """Estimate-only recursion; ``measurements`` is (Q, S) or (Q, S, R) for R runs."""
    steps = _substeps(model, sample_period)
    ys = np.asarray(measurements, dtype=float)
    x = np.array(x0, dtype=float)
    if ys.ndim == 3 and x.ndim == 1:
        x = np.repeat(x[:, None], ys.shape[2], axis=1)
    A, C = model.A, model.C
    out = np.empty((ys.shape[0],) + x.shape)
    for q in range(ys.shape[0]):
        x = x + gains[q] @ (ys[q] - C @ x)
        out[q] = x
        for _ in range(steps):
            x = A @ x
    return out


def write_trajectory_csv(path, times: Iterable[float], estimates: np.ndarray,
                         vertex_ids: np.ndarray | None = None) -> None:
    """CSV with columns ``time, vertex, estimate`` (17 significant digits)."""
    estimates = np.asarray(estimates, dtype=float)
    ids = np.arange(estimates.shape[1]) if vertex_ids is None else np.asarray(vertex_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "vertex", "estimate"])
        for t, row in zip(times, estimates):
            for v, val in zip(ids.tolist(), row.tolist()):
                w.writerow([repr(float(t)), v, repr(val)])
