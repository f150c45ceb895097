import math

import numpy as np
import pytest
from scipy import stats

from hetjm.diagnostics import split_rhat
from hetjm.sampler import (
    ChainState,
    DualAveraging,
    SamplerConfig,
    WelfordVariance,
    adaptation_windows,
    chain_rng,
    hamiltonian,
    leapfrog,
    nuts_transition,
    run,
    run_chains,
    sample_chain,
)


def gaussian(prec):
    prec = np.atleast_2d(prec)

    def logp_grad(x):
        g = -prec @ x
        return 0.5 * float(x @ g), g

    return logp_grad


def test_leapfrog_reversible_and_near_conservative(rng):
    f = gaussian(np.diag([1.0, 4.0]))
    q0, p0 = rng.standard_normal(2), rng.standard_normal(2)
    m = np.ones(2)
    q, p, lp, g = q0, p0, f(q0)[0], None
    for _ in range(20):
        q, p, lp, g = leapfrog(q, p, 0.1, m, f, g)
    H0, H1 = hamiltonian(f(q0)[0], p0, m), hamiltonian(lp, p, m)
    assert abs(H1 - H0) < 0.02
    for _ in range(20):
        q, p, lp, g = leapfrog(q, -p if _ == 0 else p, 0.1, m, f, g)
    np.testing.assert_allclose(q, q0, atol=1e-12)


def test_transition_preserves_standard_normal():
    """With a fixed step size NUTS must leave N(0, 1) invariant."""
    f = gaussian(np.eye(1))
    rng = np.random.default_rng(4)
    lp, g = f(np.zeros(1))
    state = ChainState(np.zeros(1), lp, g, 0.9, np.ones(1), rng)
    xs = np.empty(20000)
    for i in range(xs.size):
        nuts_transition(state, f)
        xs[i] = state.position[0]
    assert stats.kstest(xs[::5], "norm").pvalue > 1e-3
    assert abs(xs.mean()) < 0.05
    assert xs.var() == pytest.approx(1.0, rel=0.05)


def test_huge_step_diverges():
    f = gaussian(np.eye(3) * 1e4)
    lp, g = f(np.ones(3))
    state = ChainState(np.ones(3), lp, g, 1.0, np.ones(3), np.random.default_rng(0))
    _, _, _, diverged, _ = nuts_transition(state, f)
    assert diverged


def test_dual_averaging_converges():
    # acceptance falls linearly in log step size; target 0.8 sits at eps = 0.2
    da = DualAveraging(1.0, 0.8)
    eps = 1.0
    for _ in range(2000):
        eps = da.update(min(1.0, max(0.0, 0.8 - 0.3 * math.log(eps / 0.2))))
    assert da.final_step_size == pytest.approx(0.2, rel=0.05)


def test_welford_matches_numpy(rng):
    x = rng.standard_normal((500, 3)) * [1, 2, 3]
    w = WelfordVariance(3)
    for row in x:
        w.add(row)
    np.testing.assert_allclose(w.mean, x.mean(axis=0))
    n = 500
    expect = n / (n + 5) * x.var(axis=0, ddof=1) + 1e-3 * 5 / (n + 5)
    np.testing.assert_allclose(w.regularized_variance(), expect)


def test_adaptation_windows():
    start, end, ends = adaptation_windows(1000)
    assert (start, end) == (75, 950)
    assert ends == [100, 150, 250, 450, 950]
    start, end, ends = adaptation_windows(100)
    assert start == 15 and end == 90 and ends[-1] == 90
    assert adaptation_windows(10) == (10, 10, [])


def test_adapts_metric_to_scales():
    scales = np.array([0.1, 1.0, 10.0])
    f = gaussian(np.diag(1 / scales**2))
    res = sample_chain(f, np.zeros(3), SamplerConfig(n_chains=1, iters=1500, warmup=1000, seed=1))
    np.testing.assert_allclose(res["inv_mass"], scales**2, rtol=0.4)
    assert res["divergent"].sum() == 0


def test_correlated_gaussian():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    f = gaussian(np.linalg.inv(cov))
    cfg = SamplerConfig(n_chains=4, iters=2000, warmup=1000, seed=2)
    chains = run_chains(f, [np.zeros(2)] * 4, cfg)
    draws = np.stack([c["draws"] for c in chains])
    flat = draws.reshape(-1, 2)
    np.testing.assert_allclose(np.cov(flat.T), cov, atol=0.1)
    assert max(split_rhat(draws[:, :, j]) for j in range(2)) < 1.05


def test_same_seed_same_chain():
    f = gaussian(np.eye(2))
    cfg = SamplerConfig(n_chains=1, iters=300, warmup=150, seed=8)
    a = sample_chain(f, np.zeros(2), cfg)["draws"]
    b = sample_chain(f, np.zeros(2), cfg)["draws"]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_chain(f, np.zeros(2), cfg, chain=1)["draws"])


def test_chain_rng_independent_of_order():
    assert chain_rng(5, 2).random() == chain_rng(5, 2).random()


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(iters=100, warmup=100)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)


def test_bad_start_raises():
    def f(x):
        return -math.inf, np.zeros_like(x)

    with pytest.raises(RuntimeError):
        sample_chain(f, np.zeros(2), SamplerConfig(iters=40, warmup=20))


def test_model_run_reproducible_and_parallel_safe(small_cohort):
    cfg = SamplerConfig(n_chains=2, iters=60, warmup=30, seed=4)
    serial = run(small_cohort, config=cfg, workers=1)
    parallel = run(small_cohort, config=cfg, workers=2)
    assert serial == parallel
    assert serial.values.shape[:2] == (2, 30)
    assert "lp__" in serial.names and "Sigma_1_1" in serial.names
