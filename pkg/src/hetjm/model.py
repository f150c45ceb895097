"""Domain types and the treatment, longitudinal and survival submodels.

Risk-factor trajectories follow a subject-specific linear growth model whose
level, slope and residual variance shift once treatment starts. The hazard is
Weibull, modulated by the current conditional mean and log residual variance.
Covariates entering the hazard are piecewise constant and left-continuous: the
interval starting at measurement ``j`` (``t_0 = 0``) uses the treatment state
``z_j`` and the conditional mean evaluated at ``t_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

N_EFFECTS = 5
EFFECT_NAMES = ("b0", "b1", "b2", "b3", "c")


def _finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite input: {v!r}")


@dataclass(frozen=True, eq=False)
class SubjectData:
    """Observed data for one individual.

    ``times``, ``values`` and ``treatment`` are aligned per measurement
    occasion; the baseline ``t_0 = 0`` with ``z_0 = 0`` is implicit.
    """

    id: str
    times: np.ndarray
    values: np.ndarray
    treatment: np.ndarray
    survival_time: float
    event: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        treatment = np.asarray(self.treatment, dtype=np.int64)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "survival_time", float(self.survival_time))
        object.__setattr__(self, "event", int(self.event))
        object.__setattr__(self, "id", str(self.id))

        m = times.size
        if m < 1 or values.size != m or treatment.size != m:
            raise ValueError(f"subject {self.id}: times, values and treatment need equal length >= 1")
        if times.ndim != 1 or values.ndim != 1 or treatment.ndim != 1:
            raise ValueError(f"subject {self.id}: sequences must be one-dimensional")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError(f"subject {self.id}: non-finite time or value")
        if times[0] <= 0 or np.any(np.diff(times) <= 0):
            raise ValueError(f"subject {self.id}: times must be positive and strictly increasing")
        if np.any((treatment != 0) & (treatment != 1)):
            raise ValueError(f"subject {self.id}: treatment indicators must be 0 or 1")
        if np.any(np.diff(treatment) < 0):
            raise ValueError(f"subject {self.id}: treatment non-decreasing rule violated")
        if self.event not in (0, 1):
            raise ValueError(f"subject {self.id}: event must be 0 or 1")
        if not math.isfinite(self.survival_time) or self.survival_time < times[0]:
            raise ValueError(f"subject {self.id}: survival_time must be finite and >= first measurement time")

    @property
    def n_obs(self) -> int:
        return int(self.times.size)

    @property
    def previous_treatment(self) -> np.ndarray:
        """``z_{j-1}`` for every occasion, with ``z_0 = 0``."""
        return np.concatenate(([0], self.treatment[:-1]))

    @property
    def treatment_start(self) -> float:
        return treatment_start(self.times, self.treatment)

    def __eq__(self, other):
        if not isinstance(other, SubjectData):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.treatment, other.treatment)
            and self.survival_time == other.survival_time
            and self.event == other.event
        )

    __hash__ = None


@dataclass(frozen=True)
class FixedEffects:
    """Population parameters of the longitudinal and survival submodels.

    ``gamma_treatment`` reserves a direct treatment term in the hazard. It is
    off (zero) in the main model and is not estimated by the sampler.
    """

    beta: tuple = (12.0, 0.1, -0.3, -0.05)
    nu: float = 0.5
    sigma0: float = 2.0
    gamma0: float = 0.05
    gamma1: float = 0.2
    weibull_k: float = 1.5
    weibull_xi: float = 150.0
    gamma_treatment: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != 4:
            raise ValueError("beta must have 4 entries")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not (self.weibull_k > 0 and self.weibull_xi > 0):
            raise ValueError("Weibull shape and scale must be positive")

    @property
    def neg_k_log_xi(self) -> float:
        return -self.weibull_k * math.log(self.weibull_xi)


@dataclass(frozen=True)
class TreatmentParams:
    alpha0: float = -5.0
    alpha1: float = 0.05

    def __post_init__(self):
        _finite(self.alpha0, self.alpha1)


@dataclass(frozen=True)
class RandomEffects:
    b: tuple
    c: float

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        if len(self.b) != 4:
            raise ValueError("b must have 4 entries")
        _finite(self.b, self.c)

    @classmethod
    def from_vector(cls, r) -> RandomEffects:
        r = np.asarray(r, dtype=float)
        return cls(b=tuple(r[:4]), c=float(r[4]))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.b, self.c])


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Random-effects covariance as scales and a correlation Cholesky factor."""

    tau: np.ndarray
    chol_corr: np.ndarray = field(default=None)

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        L = np.eye(tau.size) if self.chol_corr is None else np.asarray(self.chol_corr, dtype=float)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "chol_corr", L)
        if tau.ndim != 1 or L.shape != (tau.size, tau.size):
            raise ValueError("tau and chol_corr dimensions disagree")
        if not np.all(tau > 0):
            raise ValueError("all scales tau must be positive")
        if np.any(np.triu(L, 1) != 0) or np.any(np.diag(L) <= 0):
            raise ValueError("chol_corr must be lower triangular with positive diagonal")
        if not np.allclose(np.sum(L**2, axis=1), 1.0, rtol=0, atol=1e-10):
            raise ValueError("rows of chol_corr must have unit norm")

    @classmethod
    def from_covariance(cls, sigma) -> CovarianceSpec:
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("covariance must be symmetric")
        if not np.all(np.diag(sigma) > 0):
            raise ValueError("covariance diagonal must be positive")
        tau = np.sqrt(np.diag(sigma))
        corr = sigma / np.outer(tau, tau)
        try:
            L = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        L /= np.linalg.norm(L, axis=1)[:, None]
        return cls(tau=tau, chol_corr=L)

    @property
    def correlation(self) -> np.ndarray:
        return self.chol_corr @ self.chol_corr.T

    @property
    def covariance(self) -> np.ndarray:
        return self.tau[:, None] * self.correlation * self.tau[None, :]

    @property
    def chol_cov(self) -> np.ndarray:
        return self.tau[:, None] * self.chol_corr


# Reference simulation design: random-effects covariance of (b0, b1, b2, b3, c).
DESIGN_SIGMA = np.array(
    [
        [4.0, -0.02, -0.2, -0.05, 0.6],
        [-0.02, 0.005, -0.015, 0.005, 0.01],
        [-0.2, -0.015, 1.0, -0.02, -0.1],
        [-0.05, 0.005, -0.02, 0.015, -0.025],
        [0.6, 0.01, -0.1, -0.025, 0.3],
    ]
)


def treatment_probability(y_prev, z_prev, alpha: TreatmentParams) -> float:
    """Probability of being treated after observing ``y_prev``.

    Treatment is absorbing, so the result is exactly 1 once ``z_prev == 1``.
    """
    _finite(y_prev)
    if z_prev not in (0, 1):
        raise ValueError("z_prev must be 0 or 1")
    if z_prev == 1:
        return 1.0
    return float(ndtr(alpha.alpha0 + alpha.alpha1 * y_prev))


def conditional_mean(r: RandomEffects, t, z_prev, s=0.0) -> float:
    _finite(t, s, z_prev)
    b0, b1, b2, b3 = r.b
    return b0 + b1 * t + z_prev * (b2 + b3 * (t - s))


def conditional_variance(sigma0, nu, c, z_prev) -> float:
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    _finite(nu, c, z_prev)
    return sigma0**2 * math.exp(nu * z_prev + c)


def _check_weibull(k, xi, t):
    if not (k > 0 and xi > 0):
        raise ValueError("Weibull shape and scale must be positive")
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be non-negative")


def baseline_hazard(k, xi, t):
    """Weibull hazard ``(k/xi) (t/xi)^(k-1)``."""
    _check_weibull(k, xi, t)
    return (k / xi) * np.power(np.asarray(t, dtype=float) / xi, k - 1.0)


def cumulative_baseline_hazard(k, xi, t):
    _check_weibull(k, xi, t)
    return np.power(np.asarray(t, dtype=float) / xi, k)


def hazard_at(fixed: FixedEffects, mu, sigma2, t, z=0):
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    eta = fixed.gamma0 * mu + fixed.gamma1 * np.log(sigma2) + fixed.gamma_treatment * z
    return baseline_hazard(fixed.weibull_k, fixed.weibull_xi, t) * np.exp(eta)


def variance_hazard_ratio(sigma2_i, sigma2_j, gamma1) -> float:
    if not (sigma2_i > 0 and sigma2_j > 0):
        raise ValueError("variances must be positive")
    return math.exp(gamma1 * math.log(sigma2_i / sigma2_j))


def treatment_start(times, treatment) -> float:
    """Time of the first 0 -> 1 transition, or the last time if never treated."""
    times = np.asarray(times, dtype=float)
    started = np.flatnonzero(np.asarray(treatment) == 1)
    return float(times[started[0]] if started.size else times[-1])


class HazardSegments(NamedTuple):
    """Piecewise-constant hazard covariates.

    Segment ``j`` covers ``(starts[j], starts[j+1]]``; the last one extends to
    infinity.
    """

    starts: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    treatment: np.ndarray

    def log_relative_hazard(self, fixed: FixedEffects) -> np.ndarray:
        return fixed.gamma0 * self.mu + fixed.gamma1 * np.log(self.sigma2) + fixed.gamma_treatment * self.treatment


def hazard_segments(times, treatment, s, r: RandomEffects, fixed: FixedEffects) -> HazardSegments:
    """Left-endpoint covariates for ``[0, t_1], (t_1, t_2], ..., (t_m, inf)``."""
    times = np.asarray(times, dtype=float)
    starts = np.concatenate(([0.0], times))
    z = np.concatenate(([0], np.asarray(treatment, dtype=np.int64)))
    b0, b1, b2, b3 = r.b
    mu = b0 + b1 * starts + z * (b2 + b3 * (starts - s))
    sigma2 = fixed.sigma0**2 * np.exp(fixed.nu * z + r.c)
    return HazardSegments(starts, mu, sigma2, z)


def subject_segments(subject: SubjectData, r: RandomEffects, fixed: FixedEffects) -> HazardSegments:
    return hazard_segments(subject.times, subject.treatment, subject.treatment_start, r, fixed)


def cumulative_hazard(segments: HazardSegments, fixed: FixedEffects, T) -> float:
    """Integrated hazard over ``[0, T]`` for piecewise-constant covariates."""
    if not T >= 0:
        raise ValueError("T must be non-negative")
    starts = np.asarray(segments.starts, dtype=float)
    if starts.size == 0 or starts[0] != 0:
        raise ValueError("segments must start at time 0")
    ends = np.append(starts[1:], np.inf)
    lo = np.minimum(starts, T)
    hi = np.minimum(ends, T)
    k, xi = fixed.weibull_k, fixed.weibull_xi
    increments = cumulative_baseline_hazard(k, xi, hi) - cumulative_baseline_hazard(k, xi, lo)
    return float(np.sum(increments * np.exp(segments.log_relative_hazard(fixed))))


def segment_index(starts, t) -> int:
    """Index of the segment whose half-open interval ``(a, b]`` contains ``t``."""
    return max(int(np.searchsorted(starts, t, side="left")) - 1, 0)
