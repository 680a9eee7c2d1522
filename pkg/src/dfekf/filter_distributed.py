"""Distributed FE Kalman filter with parallel-Schwarz consensus.

Every node corrects its local estimate with the sensors it sees, then runs
``L`` synchronous consensus rounds.  In each round nodes first post their
interface values to the neighbours that need them (send phase), and only
after all posts have landed does any node compute (barrier), so the result
does not depend on the order or concurrency of node execution.
"""
from __future__ import annotations

import csv
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .decomposition import Decomposition
from .filter_central import kalman_gain
from .model import LocalModel

__all__ = [
    "NodeState",
    "BoundaryMessage",
    "ProtocolError",
    "Transport",
    "InProcessTransport",
    "init_nodes",
    "local_correct",
    "send_boundary_data",
    "consensus_round",
    "run_sampling_cycle",
    "gather_global_estimate",
    "ConsensusNetwork",
    "write_node_trajectory_csv",
]

PRIOR = "prior"
POSTERIOR = "posterior"


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class BoundaryMessage:
    """Interface data sent by node ``sender`` to node ``receiver``.

    ``values`` and ``values_delayed`` hold the sender's estimates at rounds
    ``l-1`` and ``l-2`` on the vertices of J_{receiver,sender};
    ``cov_diag`` holds the matching diagonal of the sender's covariance
    (transmitted for diagnostics only).
    """

    sender: int
    receiver: int
    round: int
    values: np.ndarray
    values_delayed: np.ndarray
    cov_diag: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


class Transport:
    """Message transport boundary; subclasses deliver :class:`BoundaryMessage`."""

    def send(self, msg: BoundaryMessage) -> None:
        raise NotImplementedError

    def collect(self, receiver: int) -> list[BoundaryMessage]:
        raise NotImplementedError


class InProcessTransport(Transport):
    """Per-node mailboxes with an optional message trace."""

    def __init__(self, trace: bool = False):
        self.mailboxes: dict[int, list[BoundaryMessage]] = {}
        self._last_round: dict[tuple[int, int], tuple[int, int]] = {}
        self.cycle = 0
        self.trace: list[tuple[int, int, int, int, int]] | None = [] if trace else None
        self.cov_log: list[tuple[int, int, int, int, float]] = []

    def send(self, msg: BoundaryMessage) -> None:
        key = (msg.sender, msg.receiver)
        stamp = (self.cycle, msg.round)
        if key in self._last_round and stamp <= self._last_round[key]:
            raise ProtocolError(f"round tag {msg.round} from {msg.sender} to {msg.receiver} is not increasing")
        self._last_round[key] = stamp
        self.mailboxes.setdefault(msg.receiver, []).append(msg)
        if self.trace is not None:
            self.trace.append((self.cycle, msg.round, msg.sender, msg.receiver, msg.size))
            if msg.cov_diag is not None:
                self.cov_log.append((self.cycle, msg.round, msg.sender, msg.receiver, float(np.max(msg.cov_diag))))

    def collect(self, receiver: int) -> list[BoundaryMessage]:
        return self.mailboxes.pop(receiver, [])

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "round", "sender", "receiver", "payload_size"])
            for row in self.trace or []:
                w.writerow(row)


@dataclass(eq=False)
class NodeState:
    """Local filter state of one node.

    ``x`` is the current estimate (round ``l-1`` during consensus) and
    ``x_delayed`` the one before it (round ``l-2``).  Both may carry a
    trailing batch dimension.
    """

    node: int
    x: np.ndarray
    P: np.ndarray | None
    x_delayed: np.ndarray | None = None
    phase: str = PRIOR
    inbox: list[BoundaryMessage] = field(default_factory=list)


def init_nodes(dec: Decomposition, x0, P0_scale: float | None) -> list[NodeState]:
    """Nodes initialised from a global prior vector (or one column per run)."""
    x0 = np.asarray(x0, dtype=float)
    nodes = []
    for m, ix in enumerate(dec.internal):
        P = None if P0_scale is None else P0_scale * np.eye(ix.size)
        nodes.append(NodeState(m, x0[ix].copy(), P))
    return nodes


def local_correct(node: NodeState, y, C, R, gain: np.ndarray | None = None) -> NodeState:
    """Local Kalman update; nodes without sensors keep their prior."""
    if node.phase != PRIOR:
        raise ValueError(f"node {node.node}: correction expects a prior state")
    C = np.asarray(C, dtype=float)
    if C.shape[0] == 0:
        return replace(node, phase=POSTERIOR, inbox=[])
    y = np.asarray(y, dtype=float)
    P = node.P
    if gain is None:
        if P is None:
            raise ValueError("covariance required to compute the gain")
        gain = kalman_gain(P, C, np.asarray(R, dtype=float))
    if P is not None:
        P = P - gain @ C @ P
        P = 0.5 * (P + P.T)
    x = node.x + gain @ (y - C @ node.x)
    return NodeState(node.node, x, P, None, POSTERIOR, [])


def send_boundary_data(nodes: Sequence[NodeState], dec: Decomposition, ell: int,
                       transport: Transport) -> None:
    """Send phase of round ``ell``: node j posts its J_mj values to each m."""
    for j, m in dec.links:
        node = nodes[j]
        pos = dec.send_positions[(j, m)]
        delayed = node.x if node.x_delayed is None else node.x_delayed
        cov = None if node.P is None else np.diag(node.P)[pos].copy()
        transport.send(BoundaryMessage(j, m, ell, node.x[pos].copy(), delayed[pos].copy(), cov))


def _compute(node: NodeState, model: LocalModel, inbox: list[BoundaryMessage], ell: int,
             gamma_step: float, expected: Sequence[int], u_local) -> NodeState:
    by_sender = {}
    for msg in inbox:
        if msg.round != ell:
            raise ProtocolError(f"node {node.node} got a round-{msg.round} message during round {ell}")
        if msg.sender in by_sender:
            raise ProtocolError(f"node {node.node} got two messages from {msg.sender}")
        by_sender[msg.sender] = msg
    missing = [j for j in expected if j not in by_sender]
    if missing:
        raise ProtocolError(f"node {node.node} is missing boundary data from {missing} in round {ell}")
    x = model.A @ node.x
    if model.A_prev is not None:
        prev = node.x if node.x_delayed is None else node.x_delayed
        x = x + model.A_prev @ prev
    for j in expected:
        msg = by_sender[j]
        x = x + model.coupling[j] @ msg.values + model.coupling_delayed[j] @ msg.values_delayed
    if u_local is not None:
        Bu = model.input_response(u_local)
        x = x + (Bu if Bu.ndim == x.ndim else Bu[:, None])
    P = node.P
    if P is not None:
        P = gamma_step ** 2 * (model.A @ P @ model.A.T)
        if model.Q is not None:
            P = P + model.Q
        P = 0.5 * (P + P.T)
    return NodeState(node.node, x, P, node.x, node.phase, [])


def consensus_round(nodes: Sequence[NodeState], models: Sequence[LocalModel], dec: Decomposition,
                    ell: int, transport: Transport, gamma_step: float = 1.0,
                    u=None, executor: Executor | None = None) -> list[NodeState]:
    """One synchronous round: all sends, barrier, then independent node updates.

    ``u`` is an optional global load vector for this round.
    """
    send_boundary_data(nodes, dec, ell, transport)
    inboxes = [transport.collect(m) for m in range(len(nodes))]
    expected = [sorted(dec.interface[m]) for m in range(len(nodes))]
    u_loc = [None if u is None else np.asarray(u)[dec.internal[m]] for m in range(len(nodes))]

    def work(m: int) -> NodeState:
        return _compute(nodes[m], models[m], inboxes[m], ell, gamma_step, expected[m], u_loc[m])

    if executor is None:
        return [work(m) for m in range(len(nodes))]
    return list(executor.map(work, range(len(nodes))))


def run_sampling_cycle(nodes: Sequence[NodeState], models: Sequence[LocalModel], dec: Decomposition,
                       y_nodes: Sequence[np.ndarray], L: int, gamma: float = 1.0,
                       transport: Transport | None = None, inputs: Callable | None = None,
                       gains: Sequence[np.ndarray] | None = None,
                       executor: Executor | None = None) -> tuple[list[NodeState], list[NodeState]]:
    """Correction followed by ``L`` consensus rounds.

    ``gamma`` is the total boost per sampling interval; each round inflates
    the covariance by ``gamma**(2/L)``.  ``inputs(ell)`` may supply the
    global load at round ``ell``.  Returns ``(posteriors, next priors)``.
    """
    transport = InProcessTransport() if transport is None else transport
    post = []
    for m, node in enumerate(nodes):
        mod = models[m]
        g = None if gains is None else gains[m]
        post.append(local_correct(node, y_nodes[m], mod.C, mod.R, g))
    gamma_step = gamma ** (1.0 / L)
    cur = [replace(n, x_delayed=None) for n in post]
    for ell in range(1, L + 1):
        cur = consensus_round(cur, models, dec, ell, transport, gamma_step,
                              None if inputs is None else inputs(ell), executor)
    if isinstance(transport, InProcessTransport):
        transport.cycle += 1
    priors = [NodeState(n.node, n.x, n.P, None, PRIOR, []) for n in cur]
    return post, priors


def gather_global_estimate(nodes: Sequence[NodeState], dec: Decomposition) -> np.ndarray:
    """Global field averaging every node copy of each vertex."""
    xt = np.concatenate([n.x for n in nodes], axis=0)
    return dec.gather_mean(xt)


class ConsensusNetwork:
    """Distributed filter over a fixed decomposition.

    ``models`` are the local models for the default round count ``L``.
    Measurements are global (Q, S) arrays, or (Q, S, R) for ``R`` batched
    runs; each node reads the rows of its own sensors.  ``L_override``
    maps a sample index to a different round count for that interval, in
    which case ``model_factory(L)`` must build the matching local models.
    """

    def __init__(self, models: Sequence[LocalModel], dec: Decomposition, L: int, gamma: float = 1.0,
                 executor: Executor | None = None, trace: bool = False,
                 L_override: Mapping[int, int] | None = None,
                 model_factory: Callable[[int], Sequence[LocalModel]] | None = None):
        if L < 1:
            raise ValueError("L must be >= 1")
        self.dec = dec
        self.L = int(L)
        self.gamma = float(gamma)
        self.executor = executor
        self.transport = InProcessTransport(trace=trace)
        self.L_override = dict(L_override or {})
        if any(v < 1 for v in self.L_override.values()):
            raise ValueError("L must be >= 1")
        if self.L_override and model_factory is None:
            raise ValueError("per-interval L requires a model factory")
        self._models = {self.L: list(models)}
        self._factory = model_factory

    @property
    def models(self) -> list[LocalModel]:
        return self._models[self.L]

    def rounds(self, q: int) -> int:
        return self.L_override.get(q, self.L)

    def models_for(self, L: int) -> list[LocalModel]:
        if L not in self._models:
            self._models[L] = list(self._factory(L))
        return self._models[L]

    def _local_measurements(self, yq: np.ndarray) -> list[np.ndarray]:
        return [yq[mod.sensors] for mod in self.models]

    def _cycle(self, nodes, q, yq, gains=None):
        L = self.rounds(q)
        return run_sampling_cycle(nodes, self.models_for(L), self.dec, self._local_measurements(yq),
                                  L, self.gamma, self.transport, gains=gains, executor=self.executor)

    def run(self, measurements, x0, P0_scale: float) -> tuple[np.ndarray, list[list[np.ndarray]]]:
        """Full recursion with covariances; returns gathered posteriors and per-node P."""
        ys = np.asarray(measurements, dtype=float)
        nodes = init_nodes(self.dec, x0, P0_scale)
        out, covs = [], []
        for q in range(ys.shape[0]):
            post, nodes = self._cycle(nodes, q, ys[q])
            out.append(gather_global_estimate(post, self.dec))
            covs.append([n.P for n in post])
        return np.array(out), covs

    def covariance_schedule(self, P0_scale: float, n_samples: int) -> list[list[np.ndarray]]:
        """Per-sample, per-node gains; independent of the measured values."""
        Ps = [P0_scale * np.eye(mod.n) for mod in self.models]
        sched = []
        for q in range(n_samples):
            L = self.rounds(q)
            gamma_step = self.gamma ** (1.0 / L)
            gains = []
            for m, mod in enumerate(self.models_for(L)):
                P = Ps[m]
                if mod.C.shape[0]:
                    K = kalman_gain(P, mod.C, mod.R)
                    P = P - K @ mod.C @ P
                    P = 0.5 * (P + P.T)
                else:
                    K = np.zeros((mod.n, 0))
                gains.append(K)
                for _ in range(L):
                    P = gamma_step ** 2 * (mod.A @ P @ mod.A.T) + mod.Q
                    P = 0.5 * (P + P.T)
                Ps[m] = P
            sched.append(gains)
        return sched

    def run_with_gains(self, schedule, measurements, x0) -> np.ndarray:
        """Estimate-only run using precomputed gains; supports batched measurements."""
        ys = np.asarray(measurements, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        if ys.ndim == 3 and x0.ndim == 1:
            x0 = np.repeat(x0[:, None], ys.shape[2], axis=1)
        nodes = init_nodes(self.dec, x0, None)
        out = np.empty((ys.shape[0],) + x0.shape)
        for q in range(ys.shape[0]):
            post, nodes = self._cycle(nodes, q, ys[q], gains=schedule[q])
            out[q] = gather_global_estimate(post, self.dec)
        return out


def write_node_trajectory_csv(path, dec: Decomposition, node: int, times, estimates) -> None:
    """Per-node CSV with columns ``time, vertex, estimate``."""
    ids = dec.internal[node]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "vertex", "estimate"])
        for t, row in zip(times, estimates):
            for v, val in zip(ids.tolist(), np.asarray(row, dtype=float).tolist()):
                w.writerow([repr(float(t)), v, repr(val)])
