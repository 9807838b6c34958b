import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svnr.denoiser import AnalyticDenoiser, GaussianPrior
from svnr.diffusion import (DiffusionState, forward_sample, forward_sample_correlated,
                            reverse_posterior, reverse_step, run_inference, run_inference_from_noise)
from svnr.metrics import empirical_corr
from svnr.noise_model import NoiseParams
from svnr.schedule import build_schedule, gamma_at
from svnr.timemap import estimate_timemap
from svnr.verify import corrupt_gamma

N = 100_000


def test_forward_zero_map(sched, rng):
    x0 = rng.uniform(-1, 1, (4, 4, 3))
    x_t, _ = forward_sample(x0, np.zeros((4, 4)), sched, rng)
    assert np.array_equal(x_t, x0)


def test_forward_variance_constant_and_ordered(sched):
    rng = np.random.default_rng(7)
    t = np.array([[0.3, 3.0]])
    x0 = np.zeros((N, 1, 2, 1))
    x_t, n = forward_sample(x0, t, sched, rng)
    var = x_t.var(axis=0, ddof=1).ravel()
    np.testing.assert_allclose(var, gamma_at(sched, t).ravel(), rtol=0.02)
    assert var[0] < var[1]
    np.testing.assert_array_equal(x_t, np.sqrt(gamma_at(sched, t))[None, ..., None] * n)


def test_correlated_at_source_time_is_y(sched, rng):
    x0 = rng.uniform(-1, 1, (8, 8, 3))
    T_map = rng.uniform(0, 3, (8, 8))
    n_src = rng.standard_normal(x0.shape)
    y = x0 + np.sqrt(gamma_at(sched, T_map))[..., None] * n_src
    x_t, eps = forward_sample_correlated(x0, n_src, T_map, T_map, sched, rng)
    assert np.array_equal(x_t, y)
    np.testing.assert_allclose(eps, n_src, atol=1e-12)


def test_correlated_at_zero_time(sched, rng):
    x0 = rng.uniform(-1, 1, (4, 4, 3))
    x_t, eps = forward_sample_correlated(x0, rng.standard_normal(x0.shape), np.full((4, 4), 2.0),
                                         np.zeros((4, 4)), sched, rng)
    assert np.array_equal(x_t, x0)
    assert np.all(eps[x_t == x0] * 0 == 0)


def test_correlated_rejects_t_above_T(sched, rng):
    with pytest.raises(ValueError):
        forward_sample_correlated(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.ones((1, 1)),
                                  np.full((1, 1), 2.0), sched, rng)


def test_correlated_statistics():
    # gamma_t / gamma_T = 0.25 gives corr 0.5, unit-variance eps
    s = build_schedule(2, 0.5, 0.5, 1.0)  # gamma_1 = 0.5, gamma_2 = 0.75
    rng = np.random.default_rng(11)
    T_level = 2.0
    t_level = float(np.interp(0.25 * 0.75, s.gamma, np.arange(3)))
    assert gamma_at(s, t_level) == pytest.approx(0.1875)
    x0 = np.zeros((N, 1, 1))
    n_src = rng.standard_normal(x0.shape)
    x_t, eps = forward_sample_correlated(x0, n_src, np.full((N, 1), T_level), np.full((N, 1), t_level), s, rng)
    assert np.var(eps) == pytest.approx(1.0, rel=0.02)
    corr = empirical_corr(eps.reshape(N, 1), n_src.reshape(N, 1))[0]
    assert corr == pytest.approx(0.5, abs=0.01)
    np.testing.assert_allclose(x_t, np.sqrt(gamma_at(s, t_level)) * eps, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(g_T=st.floats(1e-6, 50), frac=st.floats(0, 1))
def test_correlation_decomposition(g_T, frac):
    # (g_t / sqrt(g_T))^2 + g_t (1 - g_t / g_T) == g_t
    g_t = frac * g_T
    lhs = (g_t / np.sqrt(g_T)) ** 2 + g_t * (1 - g_t / g_T)
    assert lhs == pytest.approx(g_t, abs=1e-12 * max(1.0, g_T))


def test_reverse_posterior_closed_form(sched):
    t = 5
    x_t, x0 = np.full((1, 1, 1), 0.7), np.full((1, 1, 1), -0.2)
    post = reverse_posterior(sched, t, x_t, x0)
    g, gp = sched.gamma[t], sched.gamma[t - 1]
    eta = g - gp
    assert post.mu.item() == pytest.approx(gp / g * 0.7 + eta / g * -0.2, rel=1e-12)
    assert post.var.item() == pytest.approx(gp * (1 - gp / g), rel=1e-12)


def test_reverse_posterior_t1_and_t0(sched):
    x_t, x0 = np.full((1, 2, 1), 0.7), np.full((1, 2, 1), -0.2)
    post = reverse_posterior(sched, np.array([[1.0, 0.0]]), x_t, x0)
    assert post.mu.ravel().tolist() == [-0.2, 0.7]
    assert np.all(post.var == 0)


def test_reverse_posterior_corrupted_schedule(sched):
    import dataclasses
    g = sched.gamma.copy()
    g[10] = 0.0
    bad = dataclasses.replace(sched, gamma=g)
    with pytest.raises(ValueError):
        reverse_posterior(bad, 10, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    assert corrupt_gamma(sched).gamma[sched.T // 2] != sched.gamma[sched.T // 2]


def test_reverse_step_freeze(sched, rng):
    y = rng.uniform(-1, 1, (1, 3, 1))
    state = DiffusionState.start(y, np.array([[0.0, 1.0, 2.5]]))
    x0_hat = np.zeros_like(y)
    s1 = reverse_step(state, x0_hat, sched, rng)
    assert s1.x[0, 0, 0] == y[0, 0, 0]  # frozen from the start
    assert s1.x[0, 1, 0] == 0.0 and s1.frozen[0, 1]  # landed on zero -> x0_hat
    assert s1.t.tolist() == [[0.0, 0.0, 1.5]]
    s2 = reverse_step(s1, np.ones_like(y), sched, rng)
    assert s2.x[0, 1, 0] == 0.0  # bit-identical once frozen
    assert s2.t[0, 2] == 0.5 and not s2.frozen[0, 2]
    s3 = reverse_step(s2, np.ones_like(y), sched, rng)
    assert s3.x[0, 2, 0] == 1.0 and np.all(s3.frozen)
    with pytest.raises(ValueError):
        reverse_step(s3, x0_hat, sched, rng)


class Counter:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def predict(self, x_t, t_map, y):
        self.calls += 1
        return self.inner.predict(x_t, t_map, y)


def test_run_inference_noiseless_is_noop(sched, rng):
    y = rng.uniform(-1, 1, (6, 6, 3))
    d = Counter(AnalyticDenoiser(GaussianPrior(np.zeros(y.shape), np.ones(y.shape)), sched))
    out, steps = run_inference(y, NoiseParams(0, 0), sched, d, rng)
    assert steps == 0 and d.calls == 0 and np.array_equal(out, y)


@pytest.mark.parametrize("sr", [0.01, 0.2, 0.6])
def test_run_inference_step_count(asc_sched, sr):
    rng = np.random.default_rng(1)
    y = rng.uniform(-1, 1, (8, 8, 3))
    p = NoiseParams(sr, 0.1)
    d = Counter(AnalyticDenoiser(GaussianPrior(np.zeros(y.shape), np.full(y.shape, 0.3)), asc_sched))
    trace = []
    out, steps = run_inference(y, p, asc_sched, d, rng, trace=lambda k, st: trace.append(k))
    assert steps == d.calls == int(np.ceil(estimate_timemap(y, p, asc_sched).max()))
    assert trace == list(range(steps + 1))
    assert np.all(np.abs(out) <= 1.0)


def test_run_inference_deterministic(sched):
    y = np.random.default_rng(0).uniform(-1, 1, (5, 5, 3))
    d = AnalyticDenoiser(GaussianPrior(np.zeros(y.shape), np.full(y.shape, 0.3)), sched)
    p = NoiseParams(0.3, 0.2)
    a, _ = run_inference(y, p, sched, d, np.random.default_rng(4))
    b, _ = run_inference(y, p, sched, d, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_inference_from_noise_runs_all_steps():
    s = build_schedule(5, 0.1, 0.1, 1.0)
    y = np.zeros((2, 2, 3))
    d = Counter(AnalyticDenoiser(GaussianPrior(np.zeros(y.shape), np.full(y.shape, 0.1)), s))
    out, steps = run_inference_from_noise(y, s, d, np.random.default_rng(0))
    assert steps == 5 and d.calls == 5 and out.shape == y.shape
