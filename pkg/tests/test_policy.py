import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safeshed.errors import ConfigError
from safeshed.policy import (
    PolicyBundle,
    PolicyParams,
    RunningStats,
    act,
    initial_params,
    merge_stats,
    n_params,
    normalize,
    theta_checksum,
    update_stats,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def stream_stats(rows):
    s = RunningStats.empty(len(rows[0]))
    for r in rows:
        s = update_stats(s, r)
    return s


class TestNormalize:
    def test_identity_initially(self):
        s = np.array([0.3, -2.0])
        assert np.array_equal(normalize(s, RunningStats.empty(2)), s)

    def test_arithmetic(self):
        # count 2 with m2 = 0.5 gives population std 0.5
        stats = RunningStats(2, np.array([1.0]), np.array([0.5]))
        assert normalize([2.0], stats)[0] == pytest.approx(2.0)

    def test_zero_variance_floor(self):
        stats = stream_stats([[1.0, 2.0], [1.0, 4.0]])
        out = normalize([1.5, 3.0], stats)
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.5 / 1e-8)


class TestStats:
    def test_two_values(self):
        s = stream_stats([[1.0], [3.0]])
        assert s.mean[0] == 2.0 and s.std[0] == 1.0

    def test_single_value(self):
        s = stream_stats([[5.0]])
        assert s.mean[0] == 5.0 and s.std[0] == 1.0

    def test_repeated_vector(self):
        s = stream_stats([[2.0, -1.0]] * 5)
        assert np.all(s.m2 == 0) and np.all(s.std == 0)

    @settings(max_examples=60)
    @given(arrays(np.float64, st.tuples(st.integers(2, 300), st.integers(1, 4)), elements=finite))
    def test_matches_two_pass(self, data):
        s = stream_stats(list(data))
        assert s.count == data.shape[0]
        np.testing.assert_allclose(s.mean, data.mean(axis=0), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(s.std, data.std(axis=0), rtol=1e-10, atol=1e-8)

    def test_long_stream(self):
        data = np.random.default_rng(0).normal(0.9, 0.2, size=(10_000, 7))
        s = stream_stats(list(data))
        np.testing.assert_allclose(s.mean, data.mean(axis=0), rtol=1e-10)
        np.testing.assert_allclose(s.std, data.std(axis=0), rtol=1e-10)

    @settings(max_examples=60)
    @given(arrays(np.float64, st.tuples(st.integers(2, 100), st.just(3)), elements=finite), st.integers(0, 100))
    def test_merge_equals_stream(self, data, cut):
        cut = cut % (data.shape[0] + 1)
        a = stream_stats(list(data[:cut])) if cut else RunningStats.empty(3)
        b = stream_stats(list(data[cut:])) if cut < data.shape[0] else RunningStats.empty(3)
        m = merge_stats(a, b)
        ref = stream_stats(list(data))
        assert m.count == ref.count
        np.testing.assert_allclose(m.mean, ref.mean, rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(m.m2, ref.m2, rtol=1e-9, atol=1e-6)


class TestAct:
    def test_zero_weights(self):
        p = PolicyParams("linear", 7, 3, np.zeros(n_params("linear", 7, 3)))
        assert np.array_equal(act(p, np.ones(7)), np.full(3, -0.1))

    def test_arithmetic(self):
        theta = np.zeros(n_params("linear", 3, 1))
        theta[0] = 1.0
        a = act(PolicyParams("linear", 3, 1, theta), np.array([0.5, 7.0, -3.0]))
        assert a[0] == pytest.approx(-0.1 * (math.tanh(0.5) + 1.0), abs=1e-15)
        assert a[0] == pytest.approx(-0.14621, abs=1e-5)

    def test_limits(self):
        theta = np.zeros(n_params("linear", 1, 1))
        hi = act(PolicyParams("linear", 1, 1, theta + np.array([0.0, 50.0])), np.zeros(1))[0]
        lo = act(PolicyParams("linear", 1, 1, theta + np.array([0.0, -50.0])), np.zeros(1))[0]
        # y -> +inf saturates at the full 20 % block, y -> -inf at no shedding
        assert hi == pytest.approx(-0.2) and lo == pytest.approx(0.0, abs=1e-15)

    def test_mlp_layout(self):
        rng = np.random.default_rng(1)
        p = initial_params("mlp", 7, 3, rng, scale=0.5, hidden=5)
        s = rng.normal(size=7)
        th = p.theta
        W1 = th[:35].reshape(5, 7)
        b1 = th[35:40]
        W2 = th[40:55].reshape(3, 5)
        b2 = th[55:58]
        y = W2 @ np.tanh(W1 @ s + b1) + b2
        np.testing.assert_allclose(act(p, s), -0.1 * (np.tanh(y) + 1), rtol=0, atol=1e-15)

    def test_nonfinite_rejected(self):
        theta = np.zeros(n_params("linear", 2, 1))
        theta[0] = np.nan
        with pytest.raises(ValueError):
            act(PolicyParams("linear", 2, 1, theta), np.zeros(2))

    def test_bad_sizes(self):
        with pytest.raises(ConfigError):
            PolicyParams("linear", 2, 1, np.zeros(5))
        with pytest.raises(ConfigError):
            n_params("cnn", 2, 1)

    @settings(max_examples=200)
    @given(arrays(np.float64, 24, elements=finite), arrays(np.float64, 7, elements=finite))
    def test_in_box(self, theta, s):
        a = act(PolicyParams("linear", 7, 3, theta), s)
        assert np.all(a >= -0.2) and np.all(a <= 0.0)
        assert np.array_equal(a, act(PolicyParams("linear", 7, 3, theta.copy()), s.copy()))


class TestBundle:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        p = initial_params("linear", 7, 3, rng, scale=0.3)
        stats = stream_stats(list(rng.normal(size=(20, 7))))
        b = PolicyBundle(p, stats, {"mode": "barrier", "lambda": 0.125})
        b.save(tmp_path / "p.json")
        c = PolicyBundle.load(tmp_path / "p.json")
        assert np.array_equal(c.params.theta, p.theta)
        assert np.array_equal(c.stats.mean, stats.mean) and np.array_equal(c.stats.m2, stats.m2)
        assert c.metadata == b.metadata
        obs = rng.normal(size=7)
        assert np.array_equal(c.act(obs), b.act(obs))
        assert (tmp_path / "p.json").read_text() == c.to_json()
        assert theta_checksum(c.params.theta) == theta_checksum(p.theta)

    def test_malformed(self):
        with pytest.raises(ConfigError):
            PolicyBundle.from_json('{"format": "other"}')
        with pytest.raises(ConfigError):
            PolicyBundle.from_json('{"format": "safeshed-policy", "version": 1}')
