import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from hetjm.model import (
    DESIGN_SIGMA,
    CovarianceSpec,
    FixedEffects,
    RandomEffects,
    SubjectData,
    TreatmentParams,
    baseline_hazard,
    conditional_mean,
    conditional_variance,
    cumulative_baseline_hazard,
    cumulative_hazard,
    hazard_at,
    hazard_segments,
    segment_index,
    treatment_probability,
    treatment_start,
    variance_hazard_ratio,
)


def brute_hazard(t, times, treatment, s, r, fixed):
    """Hazard at ``t`` written out directly from the model definition."""
    # covariates come from the last measurement strictly before t (t_0 = 0)
    j = 0
    for idx, tj in enumerate(times, start=1):
        if tj < t:
            j = idx
    tj = 0.0 if j == 0 else times[j - 1]
    z = 0 if j == 0 else treatment[j - 1]
    b0, b1, b2, b3 = r.b
    mu = b0 + b1 * tj + z * (b2 + b3 * (tj - s))
    var = fixed.sigma0**2 * math.exp(fixed.nu * z + r.c)
    k, xi = fixed.weibull_k, fixed.weibull_xi
    return k / xi * (t / xi) ** (k - 1) * math.exp(fixed.gamma0 * mu + fixed.gamma1 * math.log(var))


def test_conditional_mean_by_hand():
    r = RandomEffects(b=(10.0, 0.5, -2.0, -0.25), c=0.1)
    assert conditional_mean(r, 3.0, 0) == pytest.approx(11.5)
    # treated since s = 2: 10 + 1.5 - 2 - 0.25
    assert conditional_mean(r, 3.0, 1, s=2.0) == pytest.approx(9.25)


def test_conditional_variance():
    assert conditional_variance(2.0, 0.5, 0.3, 1) == pytest.approx(4.0 * math.exp(0.8))
    assert conditional_variance(2.0, 0.5, 0.3, 0) == pytest.approx(4.0 * math.exp(0.3))
    with pytest.raises(ValueError):
        conditional_variance(0.0, 0.5, 0.0, 0)


def test_treatment_probability():
    a = TreatmentParams(alpha0=-5.0, alpha1=0.05)
    assert treatment_probability(120.0, 0, a) == pytest.approx(norm.cdf(1.0))
    assert treatment_probability(-1e3, 1, a) == 1.0
    with pytest.raises(ValueError):
        treatment_probability(1.0, 2, a)


def test_weibull_baseline_against_scipy():
    k, xi = 1.5, 150.0
    t = np.array([0.5, 3.0, 40.0])
    from scipy.stats import weibull_min

    dist = weibull_min(k, scale=xi)
    np.testing.assert_allclose(baseline_hazard(k, xi, t), dist.pdf(t) / dist.sf(t), rtol=1e-12)
    np.testing.assert_allclose(cumulative_baseline_hazard(k, xi, t), -dist.logsf(t), rtol=1e-12)
    with pytest.raises(ValueError):
        baseline_hazard(-1.0, xi, t)


def test_hazard_ratio_identity():
    fixed = FixedEffects(gamma0=0.05, gamma1=0.38)
    ratio = hazard_at(fixed, 12.0, 4.0, 2.0) / hazard_at(fixed, 12.0, 1.0, 2.0)
    assert ratio == pytest.approx(variance_hazard_ratio(4.0, 1.0, 0.38))
    assert variance_hazard_ratio(4.0, 1.0, 0.38) == pytest.approx(math.exp(2 * 0.38 * math.log(2)))


def test_neg_k_log_xi():
    assert FixedEffects(weibull_k=1.5, weibull_xi=150.0).neg_k_log_xi == pytest.approx(-7.516, abs=1e-3)


def test_cumulative_hazard_against_quadrature(rng):
    fixed = FixedEffects(weibull_k=1.7, weibull_xi=30.0, gamma0=0.08, gamma1=0.3)
    for _ in range(20):
        times = np.sort(rng.uniform(0.1, 10, 6))
        switch = rng.integers(0, 7)
        treatment = (np.arange(6) >= switch).astype(int)
        s = treatment_start(times, treatment)
        r = RandomEffects.from_vector(rng.normal([12, 0.1, -0.3, -0.05, 0], [2, 0.07, 1, 0.12, 0.5]))
        T = rng.uniform(0.05, 12)
        seg = hazard_segments(times, treatment, s, r, fixed)
        breaks = [b for b in times if b < T]
        oracle, _ = integrate.quad(brute_hazard, 0, T, args=(times, treatment, s, r, fixed),
                                   points=breaks or None, epsabs=0, epsrel=1e-12, limit=200)
        assert cumulative_hazard(seg, fixed, T) == pytest.approx(oracle, rel=1e-9)


def test_segment_index_half_open():
    starts = np.array([0.0, 1.0, 2.5])
    assert segment_index(starts, 0.0) == 0
    assert segment_index(starts, 1.0) == 0
    assert segment_index(starts, 1.0 + 1e-12) == 1
    assert segment_index(starts, 9.0) == 2


def test_treatment_start():
    assert treatment_start([1.0, 2.0, 3.0], [0, 1, 1]) == 2.0
    assert treatment_start([1.0, 2.0, 3.0], [0, 0, 0]) == 3.0


def test_subject_validation():
    ok = dict(id="a", times=[1.0, 2.0], values=[1.0, 2.0], treatment=[0, 1], survival_time=2.0, event=0)
    SubjectData(**ok)
    with pytest.raises(ValueError, match="treatment non-decreasing"):
        SubjectData(**{**ok, "treatment": [1, 0]})
    with pytest.raises(ValueError, match="strictly increasing"):
        SubjectData(**{**ok, "times": [2.0, 2.0]})
    with pytest.raises(ValueError):
        SubjectData(**{**ok, "event": 2})
    with pytest.raises(ValueError):
        SubjectData(**{**ok, "survival_time": 0.5})


def test_previous_treatment():
    s = SubjectData("a", [1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 1], 3.0, 0)
    np.testing.assert_array_equal(s.previous_treatment, [0, 0, 1])


def test_covariance_roundtrip():
    spec = CovarianceSpec.from_covariance(DESIGN_SIGMA)
    np.testing.assert_allclose(spec.covariance, DESIGN_SIGMA, atol=1e-14)
    np.testing.assert_allclose(np.diag(spec.correlation), 1.0)
    with pytest.raises(ValueError):
        CovarianceSpec.from_covariance(-np.eye(5))
