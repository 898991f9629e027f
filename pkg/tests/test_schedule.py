import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffrec.errors import ConfigError, UsageError
from diffrec.schedule import build_schedule, posterior_mean, q_sample

from .oracles import grid_posterior_mean

sched_args = st.tuples(
    st.floats(1e-6, 1.0),
    st.floats(1e-5, 0.4),
    st.floats(0.41, 0.99),
    st.integers(1, 50),
)


def test_endpoints_exact():
    s = build_schedule(1e-4, 5e-4, 5e-3, 5)
    assert abs(s.one_minus_abar[1] - 1e-4 * 5e-4) <= 1e-15
    assert abs(s.one_minus_abar[5] - 1e-4 * 5e-3) <= 1e-15


def test_single_step_uses_min():
    s = build_schedule(0.5, 0.1, 0.3, 1)
    assert s.one_minus_abar[1] == pytest.approx(0.05)
    assert s.beta[1] == pytest.approx(0.05)


def test_zero_scale_is_identity():
    s = build_schedule(0.0, 0.1, 0.3, 4)
    assert s.degenerate
    np.testing.assert_array_equal(s.abar, np.ones(5))
    np.testing.assert_array_equal(s.beta, np.zeros(5))
    np.testing.assert_array_equal(s.loss_weight(np.arange(1, 5)), np.ones(4))
    x = np.array([[1.0, 0.0]])
    np.testing.assert_array_equal(q_sample(s, x, 3, np.ones_like(x)), x)


@pytest.mark.parametrize("args", [(-0.1, 0.1, 0.2, 5), (1.5, 0.1, 0.2, 5), (0.1, 0.3, 0.2, 5),
                                  (0.1, 0.0, 0.2, 5), (0.1, 0.1, 1.0, 5), (0.1, 0.1, 0.2, 0)])
def test_invalid_configs(args):
    with pytest.raises(ConfigError):
        build_schedule(*args)


def test_arrays_are_read_only():
    s = build_schedule(0.1, 0.1, 0.2, 3)
    with pytest.raises(ValueError):
        s.abar[1] = 0.0


@given(sched_args)
def test_schedule_invariants(a):
    s = build_schedule(*a)
    oma = s.one_minus_abar[1:]
    assert np.all(np.diff(oma) >= 0)
    assert np.all((s.abar[1:] > 0) & (s.abar[1:] < 1))
    np.testing.assert_allclose(np.cumprod(s.alpha[1:]), s.abar[1:], rtol=1e-10)
    assert np.all(s.beta[1:] >= 0) and np.all(s.beta[1:] < 1)
    assert np.all(s.posterior_var >= 0)


@given(sched_args)
def test_posterior_variance_below_beta(a):
    s = build_schedule(*a)
    assert np.all(s.posterior_var[2:] <= s.beta[2:] * (1 + 1e-12))


def test_forward_moments_monte_carlo():
    s = build_schedule(0.5, 0.1, 0.6, 4)
    rng = np.random.default_rng(0)
    n = 100_000
    x0 = np.array([[1.0, 0.0, 0.5]])
    for t in (1, 4):
        eps = rng.standard_normal((n, 3))
        xt = q_sample(s, np.repeat(x0, n, 0), t, eps)
        mu, var = np.sqrt(s.abar[t]) * x0[0], s.one_minus_abar[t]
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2 / (n - 1))
        assert np.all(np.abs(xt.mean(0) - mu) < 3 * se_mean)
        assert np.all(np.abs(xt.var(0, ddof=1) - var) < 3 * se_var)


@pytest.mark.parametrize("x_t,x0,t", [(0.7, 1.0, 2), (-0.3, 0.0, 3), (1.4, 1.0, 5)])
def test_posterior_mean_matches_grid_bayes(x_t, x0, t):
    s = build_schedule(1.0, 0.1, 0.5, 5)
    want = grid_posterior_mean(x_t, x0, s.alpha[t], s.abar[t - 1])
    got = posterior_mean(s, np.array([x_t]), np.array([x0]), t)[0]
    assert abs(got - want) < 1e-6


def test_posterior_mean_per_row_steps():
    s = build_schedule(1.0, 0.1, 0.5, 5)
    xt = np.array([[0.5, 0.1], [0.2, -0.4]])
    x0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    both = posterior_mean(s, xt, x0, np.array([2, 4]))
    np.testing.assert_allclose(both[0], posterior_mean(s, xt[:1], x0[:1], 2)[0])
    np.testing.assert_allclose(both[1], posterior_mean(s, xt[1:], x0[1:], 4)[0])


def test_posterior_mean_domain():
    s = build_schedule(1.0, 0.1, 0.5, 5)
    with pytest.raises(UsageError):
        posterior_mean(s, np.zeros(1), np.zeros(1), 1)
    with pytest.raises(UsageError):
        posterior_mean(s, np.zeros(1), np.zeros(1), 6)
    with pytest.raises(UsageError):
        posterior_mean(build_schedule(0.0, 0.1, 0.5, 5), np.zeros(1), np.zeros(1), 2)


@given(sched_args, st.floats(-2, 2))
def test_posterior_mean_noiseless_path(a, x0):
    s = build_schedule(*a)
    if s.steps < 2:
        return
    for t in range(2, s.steps + 1):
        cx, c0 = s.posterior_coefs(t)
        # x_t = sqrt(abar_t) x0 gives the noiseless mean sqrt(abar_{t-1}) x0
        got = cx * np.sqrt(s.abar[t]) * x0 + c0 * x0
        assert got == pytest.approx(np.sqrt(s.abar[t - 1]) * x0, abs=1e-9)


def test_snr_decreasing_and_weight_positive():
    s = build_schedule(1e-4, 5e-4, 5e-3, 5)
    snr = s.snr(np.arange(1, 6))
    assert np.all(np.diff(snr) < 0)
    w = s.loss_weight(np.arange(1, 6))
    assert w[0] == 1.0 and np.all(w[1:] > 0)
    np.testing.assert_allclose(w[1:], 0.5 * (snr[:-1] - snr[1:]), rtol=1e-9)
