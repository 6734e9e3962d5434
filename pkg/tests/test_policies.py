import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpbandit.core import AlgoParams, DataError, InvalidParameterError, make_rng
from rpbandit.policies import (
    BCMABRP,
    CBRAP,
    DEFAULT_REFRESH,
    EpsilonGreedy,
    LinearTS,
    LinUCB,
    PosteriorState,
    RandomPolicy,
    bcmab_select,
    cbrap_select,
    compute_nu,
    epsilon_greedy_select,
    linucb_select,
    random_select,
    sample_parameter,
)
from rpbandit.projection import ProjectionMatrix, build_projection


def ridge_oracle(zs, rs, lam):
    zs = np.asarray(zs, dtype=np.float64).reshape(len(rs), -1)
    d = zs.shape[1]
    Z = lam * np.eye(d) + zs.T @ zs
    return np.linalg.solve(Z, zs.T @ np.asarray(rs, dtype=np.float64))


def ball(gen, shape):
    X = gen.standard_normal(shape) * 0.3
    return X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1.0)


def crafted_state(psi_hat):
    s = PosteriorState(len(psi_hat), 1.0)
    s.b = np.asarray(psi_hat, dtype=np.float64).copy()
    s.psi_hat = s.Z_inv @ s.b
    return s


# --- compute_nu --------------------------------------------------------------

def test_nu_only_prior_term():
    p = AlgoParams(d=3, lam=4.0, R=0.0, epsilon=1e-12, L_z=1.0)
    for t in (1, 10, 1000):
        assert compute_nu(t, p, include_distortion=False) == 2.0


def test_nu_first_round_oracle():
    # Independent arithmetic: R sqrt(4 d ln((2 + 2)/0.1)) + 1 + 0.1 sqrt(1)
    expected = math.sqrt(16.0 * math.log(40.0)) + 1.0 + 0.1
    p = AlgoParams(d=4, lam=1.0, delta=0.1, epsilon=0.1, R=1.0, L_z=1.0, L_psi=1.0)
    assert compute_nu(1, p) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(8.782582330559366, abs=1e-12)


@given(st.integers(1, 10_000), st.integers(1, 50))
def test_nu_increasing(t, dt):
    p = AlgoParams(d=6, epsilon=0.1, L_z=1.0)
    assert compute_nu(t + dt, p) > compute_nu(t, p)


def test_nu_rejects_round_zero():
    with pytest.raises(InvalidParameterError):
        compute_nu(0, AlgoParams(d=2, L_z=1.0))


# --- posterior update ----------------------------------------------------------

def test_one_step_closed_form():
    s = PosteriorState(2, 1.0)
    s.update(np.array([1.0, 0.0]), 1.0)
    np.testing.assert_array_equal(s.Z, [[2, 0], [0, 1]])
    np.testing.assert_array_equal(s.b, [1, 0])
    np.testing.assert_allclose(s.psi_hat, [0.5, 0.0], atol=1e-15)
    assert s.t == 2


def test_batch_oracle_200_steps():
    gen = make_rng(5, "test").gen
    zs = gen.standard_normal((200, 6)) / np.sqrt(6)
    rs = gen.random(200)
    s = PosteriorState(6, 1.5)
    for z, r in zip(zs, rs):
        s.update(z, r)
    assert np.max(np.abs(s.psi_hat - ridge_oracle(zs, rs, 1.5))) <= 1e-8


def test_zero_update_only_advances_t():
    s = PosteriorState(3, 2.0)
    s.update(np.ones(3) * 0.3, 1.0)
    before = s.copy()
    s.update(np.zeros(3), 0.0)
    assert s.t == before.t + 1
    for a in ("Z", "Z_inv", "b", "psi_hat"):
        np.testing.assert_array_equal(getattr(s, a), getattr(before, a))


def test_update_rejects_nonfinite():
    s = PosteriorState(2)
    with pytest.raises(DataError):
        s.update(np.array([np.nan, 0.0]), 1.0)
    with pytest.raises(DataError):
        s.update(np.array([0.1, 0.0]), float("inf"))


def test_periodic_refresh():
    s = PosteriorState(3, 1.0, refresh_every=10)
    gen = make_rng(1, "test").gen
    for _ in range(35):
        s.update(gen.standard_normal(3) * 0.3, 1.0)
    assert s.refreshes >= 3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 500), st.integers(1, 8), st.floats(1.0, 5.0), st.integers(0, 2**32 - 1))
def test_batch_oracle_property(length, d, lam, seed):
    gen = np.random.default_rng(seed)
    zs = gen.standard_normal((length, d))
    zs /= np.maximum(np.linalg.norm(zs, axis=1, keepdims=True), 1.0)
    rs = gen.random(length)
    s = PosteriorState(d, lam)
    for z, r in zip(zs, rs):
        s.update(z, r)
    assert np.max(np.abs(s.psi_hat - ridge_oracle(zs, rs, lam))) <= 1e-8
    assert np.max(np.abs(s.Z @ s.Z_inv - np.eye(d))) <= 1e-6
    assert np.max(np.abs(s.psi_hat - s.Z_inv @ s.b)) <= 1e-9
    np.testing.assert_array_equal(s.Z, s.Z.T)
    assert np.linalg.eigvalsh(s.Z).min() >= lam - 1e-6


def test_state_bytes_roundtrip():
    s = PosteriorState(4, 1.0)
    gen = make_rng(2, "test").gen
    for _ in range(20):
        s.update(gen.standard_normal(4) * 0.2, float(gen.random() < 0.5))
    t = PosteriorState.from_bytes(s.to_bytes())
    assert t.to_bytes() == s.to_bytes()
    with pytest.raises(DataError):
        PosteriorState.from_bytes(b"XXXX" + s.to_bytes()[4:])


# --- sampling ------------------------------------------------------------------

def test_sample_nu_zero_is_mean():
    s = crafted_state([0.3, -0.2])
    np.testing.assert_array_equal(sample_parameter(s, 0.0, make_rng(0, "posterior")), s.psi_hat)


def test_sample_covariance_identity():
    s = PosteriorState(3, 1.0)
    rng = make_rng(41, "posterior")
    draws = np.array([sample_parameter(s, 1.0, rng) for _ in range(50_000)])
    assert np.max(np.abs(np.cov(draws.T) - np.eye(3))) <= 0.05


def test_sample_one_dim_std():
    s = PosteriorState(1, 4.0)
    s.b = np.array([8.0])
    s.psi_hat = s.Z_inv @ s.b
    assert s.psi_hat[0] == 2.0
    rng = make_rng(42, "posterior")
    draws = np.array([sample_parameter(s, 2.0, rng)[0] for _ in range(50_000)])
    assert 0.98 <= draws.std(ddof=1) <= 1.02
    assert abs(draws.mean() - 2.0) <= 0.02


def test_sample_rejects_negative_nu():
    with pytest.raises(InvalidParameterError):
        sample_parameter(PosteriorState(2), -1.0, make_rng(0, "posterior"))


# --- selection rules -----------------------------------------------------------

def test_bcmab_single_arm():
    P = ProjectionMatrix.identity(2)
    d = bcmab_select(PosteriorState(2), np.array([[0.3, 0.1]]), P, 5.0, make_rng(0, "policy"))
    assert d.arm == 0


def test_bcmab_full_tie():
    P = ProjectionMatrix.identity(2)
    X = np.array([[0.3, 0.1], [0.5, 0.5], [0.0, 0.2]])
    d = bcmab_select(PosteriorState(2), X, P, 0.0, make_rng(0, "policy"))
    assert d.arm == 0 and np.all(d.index_values == 0)


def test_bcmab_crafted():
    s = crafted_state([1.0, 0.0])
    X = np.array([[0.5, 0.0], [0.9, 0.0], [0.2, 0.9]])
    d = bcmab_select(s, X, ProjectionMatrix.identity(2), 0.0, make_rng(0, "policy"))
    assert d.arm == 1
    np.testing.assert_allclose(d.index_values, [0.5, 0.9, 0.2])


def test_bcmab_empty():
    with pytest.raises(InvalidParameterError):
        bcmab_select(PosteriorState(2), np.zeros((0, 2)), ProjectionMatrix.identity(2), 1.0,
                     make_rng(0, "policy"))


@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_bcmab_scale_invariance(c, seed):
    gen = np.random.default_rng(seed)
    P = ProjectionMatrix.from_entries(gen.standard_normal((3, 6)) / np.sqrt(3))
    X = ball(gen, (7, 6))
    s = crafted_state(gen.standard_normal(3))
    base = bcmab_select(s, X, P, 0.0, make_rng(seed, "policy"))
    scaled = crafted_state(c * s.b)
    assert bcmab_select(scaled, X, P, 0.0, make_rng(seed, "policy")).arm == base.arm


@given(st.integers(0, 10_000))
def test_bcmab_adding_arm_keeps_order(seed):
    gen = np.random.default_rng(seed)
    P = ProjectionMatrix.from_entries(gen.standard_normal((3, 6)) / np.sqrt(3))
    X = ball(gen, (5, 6))
    extra = np.vstack([X, ball(gen, (1, 6))])
    s = PosteriorState(3)
    a = bcmab_select(s, X, P, 1.0, make_rng(seed, "policy")).index_values
    b = bcmab_select(s, extra, P, 1.0, make_rng(seed, "policy")).index_values
    np.testing.assert_array_equal(np.argsort(a, kind="stable"), np.argsort(b[:5], kind="stable"))


def test_linucb_examples():
    X = np.array([[0.3, 0.1], [0.5, 0.5]])
    assert linucb_select(PosteriorState(2), X, 0.0).arm == 0
    assert linucb_select(PosteriorState(2), np.array([[1.0, 0.0], [0.0, 0.0]]), 1.0).arm == 0
    d = linucb_select(crafted_state([1.0, 0.0]), np.array([[0.6, 0.0], [0.8, 0.6]]), 0.5)
    np.testing.assert_allclose(d.index_values, [0.9, 1.3], atol=1e-12)
    assert d.arm == 1
    with pytest.raises(InvalidParameterError):
        linucb_select(PosteriorState(2), X, -0.1)


def test_cbrap_examples():
    P = ProjectionMatrix.identity(2)
    s = crafted_state([0.2, -0.4])
    X = np.array([[0.1, 0.3], [0.6, 0.0], [0.0, -0.5]])
    np.testing.assert_array_equal(cbrap_select(s, X, P, 0.0).index_values, X @ s.psi_hat)
    d = cbrap_select(PosteriorState(2), np.array([[1.0, 0.0], [0.0, 0.0]]), P, 2.0)
    np.testing.assert_allclose(d.index_values, [2.0, 0.0])
    assert d.arm == 0
    d = cbrap_select(crafted_state([0.0, 1.0]), np.array([[0.0, 0.5], [0.9, 0.0]]), P, 1.0)
    np.testing.assert_allclose(d.index_values, [1.0, 0.9], atol=1e-12)
    assert d.arm == 0


def test_shared_state_consistency():
    gen = make_rng(9, "test").gen
    P = build_projection(10, 4, 0.25, make_rng(9, "projection"))
    a, b = PosteriorState(4), PosteriorState(4)
    for _ in range(60):
        X = ball(gen, (5, 10))
        arm = bcmab_select(a, X, P, 1.0, make_rng(0, "policy")).arm
        cbrap_select(b, X, P, 1.0)
        r = float(gen.random() < 0.5)
        z = P.apply(X[arm])
        a.update(z, r)
        b.update(z, r)
        for attr in ("Z", "b", "psi_hat"):
            np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))


def test_epsilon_greedy_examples():
    rng = make_rng(0, "policy")
    assert epsilon_greedy_select([0.2, 0.8, 0.5], 0.0, rng).arm == 1
    assert epsilon_greedy_select([0.4, 0.4, 0.4], 0.0, rng).arm == 0
    with pytest.raises(InvalidParameterError):
        epsilon_greedy_select([], 0.1, rng)
    with pytest.raises(InvalidParameterError):
        epsilon_greedy_select([0.1], 1.5, rng)


def test_epsilon_one_uniform():
    rng = make_rng(77, "policy")
    arms = [epsilon_greedy_select(np.zeros(4), 1.0, rng).arm for _ in range(50_000)]
    freq = np.bincount(arms, minlength=4) / 50_000
    assert np.all((freq >= 0.24) & (freq <= 0.26))


def test_random_select():
    assert random_select(1, make_rng(0, "policy")).arm == 0
    rng = make_rng(78, "policy")
    arms = [random_select(10, rng).arm for _ in range(100_000)]
    freq = np.bincount(arms, minlength=10) / 100_000
    assert np.all((freq >= 0.09) & (freq <= 0.11))
    a = [random_select(10, make_rng(3, "policy")).arm for _ in range(1)]
    b = [random_select(10, make_rng(3, "policy")).arm for _ in range(1)]
    assert a == b
    with pytest.raises(InvalidParameterError):
        random_select(0, rng)


# --- policy objects ------------------------------------------------------------

def test_linear_ts_matches_bcmab_with_identity():
    n = 5
    p = AlgoParams(d=n, L_z=1.0)
    gen = make_rng(3, "test").gen
    ts = LinearTS(n, p, make_rng(3, "policy"), include_distortion=True)
    rp = BCMABRP(n, p, make_rng(3, "policy"), projection=ProjectionMatrix.identity(n))
    for _ in range(100):
        X = ball(gen, (6, n))
        a, b = ts.select(X).arm, rp.select(X).arm
        assert a == b
        r = float(gen.random() < 0.5)
        ts.update(a, X, r)
        rp.update(b, X, r)


def test_linear_ts_update_oracle():
    ts = LinearTS(2, AlgoParams(d=1, L_z=1.0), make_rng(0, "policy"))
    ts.update(0, np.array([[1.0, 0.0]]), 1.0)
    np.testing.assert_allclose(ts.state.psi_hat, [0.5, 0.0])
    gen = make_rng(4, "test").gen
    ts = LinearTS(4, AlgoParams(d=1, L_z=1.0), make_rng(0, "policy"))
    zs, rs = [], []
    for _ in range(200):
        X = ball(gen, (3, 4))
        r = gen.random()
        ts.update(1, X, r)
        zs.append(X[1])
        rs.append(r)
    assert np.max(np.abs(ts.state.psi_hat - ridge_oracle(zs, rs, 1.0))) <= 1e-8


def test_linear_ts_nu_uses_n_and_no_distortion():
    p = AlgoParams(d=2, epsilon=0.5, L_z=1.0)
    ts = LinearTS(6, p, make_rng(0, "policy"))
    assert ts.nu() == pytest.approx(compute_nu(1, AlgoParams(d=6, epsilon=0.5, L_z=1.0),
                                               include_distortion=False))


def test_bcmab_auto_lz_freezes():
    p = AlgoParams(d=3)
    pol = BCMABRP(8, p, make_rng(0, "policy"), projection_rng=make_rng(0, "projection"))
    gen = make_rng(0, "test").gen
    for _ in range(60):
        X = ball(gen, (4, 8))
        pol.update(pol.select(X).arm, X, 1.0)
    frozen = pol.L_z
    X = np.ones((4, 8)) / np.sqrt(8)
    pol.update(pol.select(X).arm, X, 1.0)
    assert pol.L_z == frozen >= 1.0


def test_bcmab_snapshot_restore():
    p = AlgoParams(d=3, L_z=1.0)
    gen = make_rng(1, "test").gen
    a = BCMABRP(8, p, make_rng(1, "policy"), projection_rng=make_rng(1, "projection"))
    for _ in range(30):
        X = ball(gen, (4, 8))
        a.update(a.select(X).arm, X, 1.0)
    raw = a.snapshot()
    b = BCMABRP(8, p, make_rng(99, "policy"), projection=a.P)
    b.restore(raw)
    for _ in range(30):
        X = ball(gen, (4, 8))
        da, db = a.select(X), b.select(X)
        assert da.arm == db.arm
        a.update(da.arm, X, 0.0)
        b.update(db.arm, X, 0.0)


def test_bcmab_rejects_bad_projection():
    with pytest.raises(InvalidParameterError):
        BCMABRP(8, AlgoParams(d=3), make_rng(0, "policy"), projection=ProjectionMatrix.identity(8))


def test_decision_attains_max():
    gen = make_rng(6, "test").gen
    pols = [
        BCMABRP(8, AlgoParams(d=3, L_z=1.0), make_rng(0, "policy"), projection_rng=make_rng(0, "projection")),
        LinUCB(8),
        CBRAP(8, 3, make_rng(0, "projection")),
        EpsilonGreedy(5, 0.0, make_rng(0, "policy")),
    ]
    for _ in range(40):
        X = ball(gen, (5, 8))
        for pol in pols:
            dec = pol.select(X)
            assert dec.index_values[dec.arm] == dec.index_values.max()
            assert dec.arm == int(np.argmax(dec.index_values))
            pol.update(dec.arm, X, float(gen.random() < 0.5))


def test_egreedy_means_and_random_policy():
    eg = EpsilonGreedy(3, 0.0, make_rng(0, "policy"))
    X = np.zeros((3, 2))
    eg.update(2, X, 1.0)
    eg.update(1, X, 0.0)
    np.testing.assert_array_equal(eg.means, [0.0, 0.0, 1.0])
    assert eg.select(X).arm == 2
    assert RandomPolicy(make_rng(0, "policy")).select(np.zeros((1, 2))).arm == 0


def test_default_refresh_constant():
    assert DEFAULT_REFRESH == 500
