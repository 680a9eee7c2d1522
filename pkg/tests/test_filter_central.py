import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfekf import filter_central as fc
from dfekf.model import build_measurement, discretize_central


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.01, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 2), st.floats(0, 2))
def test_scalar_step_by_hand(p, r, x, y, a, q):
    s = fc.correct(fc.FilterState(np.array([x]), np.array([[p]])), np.array([y]), np.eye(1), np.array([[r]]))
    k = p / (p + r)
    assert s.x[0] == pytest.approx(x + k * (y - x), rel=1e-12, abs=1e-12)
    assert s.P[0, 0] == pytest.approx(p * r / (p + r), rel=1e-12)
    n = fc.predict(s, np.array([[a]]), Q=np.array([[q]]))
    assert n.phase == "prior" and n.k == 2
    assert n.P[0, 0] == pytest.approx(a * a * s.P[0, 0] + q, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_covariance_stays_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    n, m = 5, 2
    G = rng.normal(size=(n, n))
    P = G @ G.T + 0.1 * np.eye(n)
    C = rng.normal(size=(m, n))
    s = fc.FilterState(np.zeros(n), P)
    for _ in range(4):
        s = fc.correct(s, rng.normal(size=m), C, 0.5 * np.eye(m))
        assert np.array_equal(s.P, s.P.T)
        assert np.linalg.eigvalsh(s.P).min() > -1e-10
        s = fc.predict(s, 0.9 * np.eye(n), Q=0.1 * np.eye(n))


def test_phase_and_empty_measurements():
    s = fc.FilterState(np.ones(2), np.eye(2))
    same = fc.correct(s, np.zeros(0), np.zeros((0, 2)), np.zeros((0, 0)))
    assert same.phase == "posterior" and np.array_equal(same.x, s.x)
    with pytest.raises(ValueError):
        fc.predict(s, np.eye(2))
    with pytest.raises(ValueError):
        fc.correct(same, np.zeros(1), np.ones((1, 2)), np.eye(1))
    with pytest.raises(fc.NumericalError):
        fc.correct(fc.FilterState(np.zeros(2), np.zeros((2, 2))), np.zeros(1), np.ones((1, 2)), np.zeros((1, 1)))


def test_gain_schedule_matches_full_run(square, rng):
    mesh, fem, _ = square
    n = mesh.n_vertices
    C = build_measurement(mesh, np.array([[0.2, 0.2], [0.8, 0.5], [0.4, 0.9]]))
    model = discretize_central(fem, 10.0).with_noise(C, 0.5 * np.eye(n), 0.01 * np.eye(3))
    ys = 300 + rng.normal(size=(20, 3, 4))
    x0 = np.full(n, 305.0)
    gains = fc.covariance_schedule(model, 20 * np.eye(n), 20, 50.0)
    batch = fc.run_with_gains(model, gains, ys, x0, 50.0)
    for r in range(4):
        full, covs = fc.run(model, ys[:, :, r], x0, 20 * np.eye(n), 50.0)
        np.testing.assert_allclose(batch[:, :, r], full, rtol=0, atol=1e-10)
    with pytest.raises(ValueError):
        fc.run(model, ys[:, :, 0], x0, 20 * np.eye(n), 55.0)


def test_trajectory_csv(tmp_path):
    path = tmp_path / "t.csv"
    fc.write_trajectory_csv(path, [100.0, 200.0], np.array([[1.0, 2.0], [3.0, 0.1]]))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["time", "vertex", "estimate"]
    assert rows[-1] == ["200.0", "1", "0.1"] and len(rows) == 5
