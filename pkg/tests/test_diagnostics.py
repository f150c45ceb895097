import math

import numpy as np
import pytest
from scipy import stats

from hetjm.diagnostics import (
    AD_CASE0_CRITICAL,
    DrawsMatrix,
    anderson_darling,
    anderson_darling_pvalue,
    benefit_fraction,
    mcse_batch_means,
    posterior_predictive,
    pretreatment_residuals,
    split_rhat,
    summarize,
    variance_screen,
)
from hetjm.model import SubjectData


def rhat_by_hand(x):
    halves = [h for chain in x for h in (chain[: len(chain) // 2], chain[len(chain) // 2:])]
    n = len(halves[0])
    means = [sum(h) / n for h in halves]
    grand = sum(means) / len(means)
    B = n * sum((m - grand) ** 2 for m in means) / (len(means) - 1)
    W = sum(sum((v - m) ** 2 for v in h) / (n - 1) for h, m in zip(halves, means)) / len(halves)
    return math.sqrt(((n - 1) / n * W + B / n) / W)


def test_split_rhat_by_hand(rng):
    x = rng.standard_normal((3, 40)) + np.array([[0.0], [0.3], [0.1]])
    assert split_rhat(x) == pytest.approx(rhat_by_hand(x.tolist()), rel=1e-12)


def test_split_rhat_affine_invariant(rng):
    x = rng.standard_normal((4, 100))
    assert split_rhat(3.7 * x - 12.0) == pytest.approx(split_rhat(x), abs=1e-12)


def test_split_rhat_detects_disagreement(rng):
    x = rng.standard_normal((2, 500))
    x[1] += 3
    assert split_rhat(x) > 1.5
    trend = np.linspace(0, 5, 500) + rng.standard_normal((1, 500))
    assert split_rhat(trend) > 1.2


def test_split_rhat_constant_warns():
    with pytest.warns(RuntimeWarning):
        assert math.isnan(split_rhat(np.ones((2, 10))))


def test_mcse_iid(rng):
    x = rng.standard_normal(40000)
    assert mcse_batch_means(x) == pytest.approx(1 / math.sqrt(x.size), rel=0.15)


def test_mcse_ar1_exceeds_naive(rng):
    x = np.zeros(40000)
    e = rng.standard_normal(x.size)
    for i in range(1, x.size):
        x[i] = 0.9 * x[i - 1] + e[i]
    naive = x.std() / math.sqrt(x.size)
    # AR(1) inflation factor sqrt((1 + rho) / (1 - rho))
    assert mcse_batch_means(x) == pytest.approx(naive * math.sqrt(19), rel=0.25)


def test_summarize_columns(rng):
    vals = rng.standard_normal((2, 200, 2))
    d = DrawsMatrix(["a", "lp__"], vals)
    s = summarize(d)
    assert list(s) == ["a"]
    flat = vals[:, :, 0].ravel()
    assert s["a"]["mean"] == pytest.approx(flat.mean())
    assert s["a"]["q2.5"] == pytest.approx(np.quantile(flat, 0.025))
    assert s["a"]["sd"] == pytest.approx(flat.std(ddof=1))


def test_draws_matrix_validation():
    with pytest.raises(ValueError):
        DrawsMatrix(["a", "a"], np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        DrawsMatrix(["a"], np.full((1, 2, 1), np.nan))


def test_anderson_darling_formula(rng):
    x = rng.standard_normal(30)
    u = np.sort(stats.norm.cdf(x))
    n = u.size
    expect = -n - sum((2 * i - 1) * (math.log(u[i - 1]) + math.log(1 - u[n - i])) for i in range(1, n + 1)) / n
    assert anderson_darling(x) == pytest.approx(expect)


def test_anderson_darling_null_quantile(rng):
    a2 = np.array([anderson_darling(rng.standard_normal(100)) for _ in range(4000)])
    assert np.mean(a2 > AD_CASE0_CRITICAL[0.05]) == pytest.approx(0.05, abs=0.012)
    assert anderson_darling_pvalue(AD_CASE0_CRITICAL[0.05]) == pytest.approx(0.05, abs=0.002)
    assert anderson_darling_pvalue(AD_CASE0_CRITICAL[0.01]) == pytest.approx(0.01, abs=0.001)


def test_variance_screen_chi_square_null(rng):
    """Homoskedastic residuals give roughly uniform p-values."""
    pvals = []
    for _ in range(200):
        res = [rng.normal(scale=2.0, size=rng.integers(3, 9)) for _ in range(100)]
        pvals.append(variance_screen(res, n_mc=499, rng=rng).p_value)
    assert 0.02 <= np.mean(np.array(pvals) < 0.05) <= 0.10


def test_case0_pvalue_is_conservative_with_pooled_variance(rng):
    pvals = [
        variance_screen([rng.normal(size=6) for _ in range(100)], method="case0").p_value
        for _ in range(200)
    ]
    assert np.mean(np.array(pvals) < 0.05) < 0.02


def test_variance_screen_power(rng):
    res = [rng.normal(scale=math.exp(0.5 * c), size=10) for c in rng.normal(scale=math.sqrt(0.3), size=500)]
    out = variance_screen(res)
    assert out.reject and out.transformed.size == 500


def test_variance_screen_excludes_short():
    res = [np.array([1.0]), np.array([0.1, -0.2, 0.3]), np.array([0.5, -0.4])]
    out = variance_screen(res)
    assert out.n_excluded == 1
    with pytest.raises(ValueError):
        variance_screen([np.array([1.0]), np.array([0.1, 0.2])])


def test_pretreatment_residuals_exact_line():
    s = SubjectData("a", [1.0, 2.0, 3.0, 4.0], [3.0, 5.0, 7.0, 0.0], [0, 0, 1, 1], 4.0, 0)
    (r,) = pretreatment_residuals([s])
    np.testing.assert_allclose(r, 0.0, atol=1e-12)
    assert r.size == 3


def test_benefit_fraction_reference_inputs():
    assert benefit_fraction(0.01539, 0.3829, 0.5567, -2.640, 111.41) == pytest.approx(0.1441, abs=1e-3)
    assert benefit_fraction(0.05, 0.2, 0.5, -1000.0, 1.0) == pytest.approx(1.0)


def test_benefit_fraction_monotone_and_sign():
    means = np.linspace(-10, 10, 21)
    vals = [benefit_fraction(0.02, 0.3, 0.5, m, 4.0) for m in means]
    assert np.all(np.diff(vals) < 0)
    # gamma0 < 0 flips the inequality
    assert benefit_fraction(-0.02, 0.3, 0.5, 0.0, 4.0) == pytest.approx(stats.norm.sf(7.5 / 2))
    with pytest.raises(ValueError):
        benefit_fraction(0.0, 0.3, 0.5, 0.0, 1.0)


def test_posterior_predictive_degenerate_variance():
    s = SubjectData("7", [1.0, 2.0], [0.0, 0.0], [0, 1], 2.0, 0)
    names = ["sigma0", "nu", "b0_7", "b1_7", "b2_7", "b3_7", "c_7"]
    row = [1e-9, 0.0, 10.0, 1.0, -2.0, 0.5, 0.0]
    d = DrawsMatrix(names, np.array(row, dtype=float)[None, None, :])
    out = posterior_predictive(d, [s], 3, np.random.default_rng(0))
    # second occasion: previous treatment 0, so no shift yet
    np.testing.assert_allclose(out, [[11.0, 12.0]] * 3, atol=1e-6)
