import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from dfekf import filter_central as fc
from dfekf import filter_distributed as fd
from dfekf.decomposition import Decomposition, decompose
from dfekf.model import LocalModel, build_measurement, discretize_central, local_models

SENSORS = np.array([[0.1, 0.2], [0.3, 0.7], [0.45, 0.5], [0.55, 0.45], [0.7, 0.2], [0.9, 0.8]])


def _network(square, L, gamma=1.1, executor=None, trace=False, **kw):
    mesh, fem, dec = square
    _, per = build_measurement(mesh, SENSORS, dec)
    mods = [replace(m, C=per[i][0], Q=0.25 * np.eye(m.n), R=0.01 * np.eye(len(per[i][1])), sensors=per[i][1])
            for i, m in enumerate(local_models(fem.mass, fem.stiffness, dec, 60.0 / L))]
    return fd.ConsensusNetwork(mods, dec, L, gamma, executor=executor, trace=trace, **kw)


def _factory(square):
    return lambda L: _network(square, L).models


def test_single_node_matches_central(square, rng):
    mesh, fem, _ = square
    n = mesh.n_vertices
    dec = decompose(mesh, np.zeros(n, dtype=int), 1)
    C, per = build_measurement(mesh, SENSORS, dec)
    central = discretize_central(fem, 6.0).with_noise(C, 0.25 * np.eye(n), 0.01 * np.eye(6))
    mods = [replace(m, C=per[0][0], Q=0.25 * np.eye(n), R=0.01 * np.eye(6), sensors=per[0][1])
            for m in local_models(fem.mass, fem.stiffness, dec, 6.0)]
    ys = 300 + rng.normal(size=(30, 6))
    xc, Pc = fc.run(central, ys, np.full(n, 305.0), 20 * np.eye(n), 60.0)
    xd, Pd = fd.ConsensusNetwork(mods, dec, 10, 1.0).run(ys, np.full(n, 305.0), 20.0)
    assert np.max(np.abs(xc - xd)) < 1e-10
    assert np.max(np.abs(Pc[-1] - Pd[-1][0])) < 1e-10


def test_local_correct_matches_central_correct(rng):
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    C, R, y = np.array([[1.0, 0.5]]), np.array([[0.2]]), np.array([1.3])
    a = fc.correct(fc.FilterState(np.array([0.1, -0.2]), P), y, C, R)
    b = fd.local_correct(fd.NodeState(0, np.array([0.1, -0.2]), P), y, C, R)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.P, b.P)
    empty = fd.local_correct(fd.NodeState(0, np.array([1.0]), np.eye(1)), np.zeros(0), np.zeros((0, 1)), None)
    assert empty.phase == "posterior" and empty.x.tolist() == [1.0]


def _scalar(a):
    dec = Decomposition(1, (np.array([0]),), (np.array([0]),), (np.array([0]),), ({},), (np.zeros(0, np.int64),))
    mod = LocalModel(0, np.array([[a]]), {}, {}, 1.0, None, Q=np.zeros((1, 1)), C=np.zeros((0, 1)),
                     R=np.zeros((0, 0)), sensors=np.zeros(0, np.int64))
    return dec, mod


@pytest.mark.parametrize("L", [1, 2, 10])
def test_total_boost_is_gamma_squared(L):
    dec, mod = _scalar(0.9)
    nodes = [fd.NodeState(0, np.array([1.0]), np.array([[2.0]]))]
    _, nxt = fd.run_sampling_cycle(nodes, [mod], dec, [np.zeros(0)], L, gamma=1.3)
    assert nxt[0].P[0, 0] == pytest.approx(1.3 ** 2 * 0.9 ** (2 * L) * 2.0, rel=1e-12)
    assert nxt[0].x[0] == pytest.approx(0.9 ** L)


def test_first_round_reuses_payload_and_locality(square):
    net = _network(square, 3, trace=True)
    dec = net.dec
    nodes = fd.init_nodes(dec, np.linspace(300, 310, dec.n_vertices), 1.0)
    tr = fd.InProcessTransport(trace=True)
    fd.send_boundary_data(nodes, dec, 1, tr)
    for m in range(dec.node_count):
        for msg in tr.collect(m):
            np.testing.assert_array_equal(msg.values, msg.values_delayed)
            assert msg.size == dec.interface[m][msg.sender].size
            np.testing.assert_array_equal(msg.values, np.linspace(300, 310, dec.n_vertices)[dec.interface[m][msg.sender]])
    assert all(size == dec.interface[recv][send].size for _, _, send, recv, size in tr.trace)


def test_missing_message_is_a_protocol_error(square):
    net = _network(square, 2)
    nodes = fd.init_nodes(net.dec, np.full(net.dec.n_vertices, 300.0), 1.0)

    class Lossy(fd.InProcessTransport):
        def send(self, msg):
            if msg.sender != 0:
                super().send(msg)

    with pytest.raises(fd.ProtocolError):
        fd.consensus_round(nodes, net.models, net.dec, 1, Lossy())
    tr = fd.InProcessTransport()
    tr.send(fd.BoundaryMessage(0, 1, 2, np.zeros(1), np.zeros(1)))
    with pytest.raises(fd.ProtocolError):
        tr.send(fd.BoundaryMessage(0, 1, 2, np.zeros(1), np.zeros(1)))


def test_covariances_do_not_depend_on_data(square, rng):
    net = _network(square, 2)
    n = net.dec.n_vertices
    _, c1 = net.run(300 + rng.normal(size=(5, 6)), np.full(n, 305.0), 20.0)
    _, c2 = net.run(310 + 5 * rng.normal(size=(5, 6)), np.full(n, 300.0), 20.0)
    for a, b in zip(c1[-1], c2[-1]):
        np.testing.assert_array_equal(a, b)
        assert np.array_equal(a, a.T) and np.linalg.eigvalsh(a).min() > 0


def test_batched_gains_match_full_run_and_threads(square, rng):
    ys = 300 + rng.normal(size=(12, 6, 3))
    n = square[0].n_vertices
    x0 = np.full(n, 305.0)
    net = _network(square, 4)
    sched = net.covariance_schedule(20.0, 12)
    batch = net.run_with_gains(sched, ys, x0)
    for r in range(3):
        full, _ = net.run(ys[:, :, r], x0, 20.0)
        np.testing.assert_allclose(batch[:, :, r], full, atol=1e-10, rtol=0)
    with ThreadPoolExecutor(4) as ex:
        threaded = _network(square, 4, executor=ex).run_with_gains(sched, ys, x0)
    np.testing.assert_array_equal(threaded, batch)


def test_schwarz_copies_converge_with_more_rounds(square):
    _, fem, dec = square
    x = 300 + 5 * np.sin(3 * square[0].vertices[:, 0])
    spreads = []
    for L in (1, 2, 10):
        mods = local_models(fem.mass, fem.stiffness, dec, 600.0 / L)
        nodes = [fd.NodeState(m, x[ix].copy(), None, phase="posterior") for m, ix in enumerate(dec.internal)]
        for ell in range(1, L + 1):
            nodes = fd.consensus_round(nodes, mods, dec, ell, fd.InProcessTransport())
        xt = np.concatenate([nd.x for nd in nodes])
        spreads.append(max(np.ptp([xt[dec.offsets[m] + i] for m, i in c]) for c in dec.copies if len(c) > 1))
    assert spreads[0] >= spreads[1] >= spreads[2]


def test_gather_examples(square):
    dec = square[2]
    nodes = [fd.NodeState(m, np.full(ix.size, 299.0 if m == 0 else 301.0), None) for m, ix in enumerate(dec.internal)]
    g = fd.gather_global_estimate(nodes, dec)
    shared = [v for v, c in enumerate(dec.copies) if len(c) == 2]
    assert np.all(g[shared] == 300.0)


def test_per_interval_round_override(square, rng):
    ys = 300 + rng.normal(size=(6, 6))
    n = square[0].n_vertices
    x0 = np.full(n, 305.0)
    base = _network(square, 1, L_override={q: 2 for q in range(6)}, model_factory=_factory(square))
    ref = _network(square, 2)
    np.testing.assert_allclose(base.run(ys, x0, 20.0)[0], ref.run(ys, x0, 20.0)[0], atol=1e-12)
    with pytest.raises(ValueError):
        _network(square, 1, L_override={0: 2})


def test_node_trajectory_csv(tmp_path, square):
    dec = square[2]
    fd.write_node_trajectory_csv(tmp_path / "n.csv", dec, 1, [100.0], [np.zeros(dec.internal[1].size)])
    rows = list(csv.reader(open(tmp_path / "n.csv")))
    assert rows[0] == ["time", "vertex", "estimate"] and len(rows) == 1 + dec.internal[1].size
