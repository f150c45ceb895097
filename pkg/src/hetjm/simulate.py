"""Cohort simulation: random effects, treatment-adaptive profiles, survival.

Every subject draws from its own generator, seeded from the master seed and
the subject's position (``SeedSequence(seed, spawn_key=(i,))``), so a subject's
data does not depend on the cohort size or on scheduling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    DESIGN_SIGMA,
    CovarianceSpec,
    FixedEffects,
    HazardSegments,
    RandomEffects,
    SubjectData,
    TreatmentParams,
    conditional_mean,
    conditional_variance,
    hazard_segments,
    treatment_probability,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 100
    m_per_subject: int = 10
    covariance: CovarianceSpec = field(default_factory=lambda: CovarianceSpec.from_covariance(DESIGN_SIGMA))
    alpha: TreatmentParams = field(default_factory=TreatmentParams)
    fixed: FixedEffects = field(default_factory=FixedEffects)
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.m_per_subject < 1:
            raise ValueError("m_per_subject must be >= 1")
        if not isinstance(self.covariance, CovarianceSpec):
            object.__setattr__(self, "covariance", CovarianceSpec.from_covariance(self.covariance))

    @property
    def theta(self) -> np.ndarray:
        """Mean of the random effects; the log-variance deviation has mean zero."""
        return np.array([*self.fixed.beta, 0.0])


def reference_design(**overrides) -> SimConfig:
    """Reference simulation design (N = 100, m = 10, default effects and covariance)."""
    return replace(SimConfig(), **overrides)


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def draw_random_effects(theta, cov: CovarianceSpec, rng) -> RandomEffects:
    z = rng.standard_normal(len(theta))
    return RandomEffects.from_vector(np.asarray(theta, dtype=float) + cov.tau * (cov.chol_corr @ z))


def draw_measurement_times(m: int, rng) -> np.ndarray:
    """One time uniformly in ``[j, j+1)`` for each occasion ``j = 1..m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return np.arange(1, m + 1) + rng.random(m)


def simulate_longitudinal(r: RandomEffects, alpha: TreatmentParams, fixed: FixedEffects, times, rng):
    """Generate values and treatment indicators occasion by occasion.

    Returns ``(values, treatment, s)`` where ``s`` is the treatment start time
    (the last time if never treated).
    """
    times = np.asarray(times, dtype=float)
    m = times.size
    values = np.empty(m)
    treatment = np.zeros(m, dtype=np.int64)
    z_prev, s = 0, times[-1]
    for j, t in enumerate(times):
        mu = conditional_mean(r, t, z_prev, s)
        sd = np.sqrt(conditional_variance(fixed.sigma0, fixed.nu, r.c, z_prev))
        values[j] = mu + sd * rng.standard_normal()
        z = int(rng.random() < treatment_probability(values[j], z_prev, alpha))
        if z and not z_prev:
            s = t
        treatment[j] = z
        z_prev = z
    return values, treatment, float(s)


def _segment_tables(segments: HazardSegments, fixed: FixedEffects):
    starts = np.asarray(segments.starts, dtype=float)
    if starts.size == 0:
        raise ValueError("segment list is empty")
    k, xi = fixed.weibull_k, fixed.weibull_xi
    rate = np.exp(segments.log_relative_hazard(fixed))
    base_at_start = (starts / xi) ** k
    widths = np.diff(base_at_start)
    cum_at_start = np.concatenate(([0.0], np.cumsum(widths * rate[:-1])))
    return base_at_start, rate, cum_at_start


def simulate_survival_time(segments: HazardSegments, fixed: FixedEffects, rng, size=None):
    """Exact inverse-transform draw of the event time.

    A unit exponential ``E`` is located among the cumulative hazards at the
    segment starts and the Weibull cumulative baseline hazard is inverted
    within that segment.
    """
    base_at_start, rate, cum_at_start = _segment_tables(segments, fixed)
    e = rng.standard_exponential(size)
    j = np.searchsorted(cum_at_start, e, side="right") - 1
    base = base_at_start[j] + (e - cum_at_start[j]) / rate[j]
    t = fixed.weibull_xi * base ** (1.0 / fixed.weibull_k)
    return float(t) if size is None else t


def simulate_subject(index: int, config: SimConfig):
    """Simulate one subject; returns ``None`` if the event precedes the first visit."""
    rng = subject_rng(config.seed, index)
    r = draw_random_effects(config.theta, config.covariance, rng)
    times = draw_measurement_times(config.m_per_subject, rng)
    values, treatment, s = simulate_longitudinal(r, config.alpha, config.fixed, times, rng)
    t_star = simulate_survival_time(hazard_segments(times, treatment, s, r, config.fixed), config.fixed, rng)
    if t_star > times[-1]:
        survival_time, event, keep = times[-1], 0, times.size
    else:
        survival_time, event = t_star, 1
        keep = int(np.searchsorted(times, t_star, side="right"))
    if keep == 0:
        return None
    return SubjectData(
        id=str(index + 1),
        times=times[:keep],
        values=values[:keep],
        treatment=treatment[:keep],
        survival_time=survival_time,
        event=event,
    )


def simulate_cohort(config: SimConfig) -> list[SubjectData]:
    """Simulate ``n_subjects`` individuals.

    Measurements after an observed event are discarded; survivors past the
    last visit are censored there. Subjects whose event precedes their first
    visit have no longitudinal data and are left out (logged).
    """
    cohort = [simulate_subject(i, config) for i in range(config.n_subjects)]
    dropped = sum(s is None for s in cohort)
    if dropped:
        log.info("%d subject(s) had an event before the first measurement and were dropped", dropped)
    return [s for s in cohort if s is not None]


def cohort_summary(dataset) -> dict:
    n = len(dataset)
    return {
        "n_subjects": n,
        "treated_fraction": sum(int(s.treatment.any()) for s in dataset) / n,
        "event_fraction": sum(s.event for s in dataset) / n,
        "n_observations": sum(s.n_obs for s in dataset),
    }


def treated_fraction(config: SimConfig, n_subjects: int = 20000) -> float:
    """Monte Carlo fraction of subjects ever treated over the full follow-up.

    Survival truncation is ignored; this describes the treatment design only.
    """
    hits = 0
    for i in range(n_subjects):
        rng = subject_rng(config.seed, i)
        r = draw_random_effects(config.theta, config.covariance, rng)
        times = draw_measurement_times(config.m_per_subject, rng)
        _, treatment, _ = simulate_longitudinal(r, config.alpha, config.fixed, times, rng)
        hits += int(treatment[-1])
    return hits / n_subjects
