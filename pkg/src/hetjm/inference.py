"""Unconstrained parametrisation, priors and the joint log-posterior.

Random effects are non-centred: ``r_i = theta + diag(tau) L z_i`` with
``z_i ~ N(0, I)``. Fixed effects carry flat priors; ``sigma0`` a half-normal,
each ``tau_k`` a half-Cauchy, the correlation matrix an LKJ prior, and the
Weibull shape and scale uniform priors on ``(0, U]``. The bounded Weibull
parameters are sampled on the scaled-logit scale ``logit(value / U)`` so the
sampler never meets a hard wall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from ._kernels import I_ANG, I_LK, I_LTAU, I_LXI, K, N_ANGLES, N_GLOBAL, corr_cholesky, corr_unconstrain, log_bounded
from .model import (
    EFFECT_NAMES,
    CovarianceSpec,
    FixedEffects,
    RandomEffects,
    SubjectData,
    baseline_hazard,
    conditional_mean,
    conditional_variance,
    cumulative_hazard,
    segment_index,
    subject_segments,
)

GLOBAL_NAMES = (
    "beta0", "beta1", "beta2", "beta3", "nu", "log_sigma0", "gamma0", "gamma1",
    "logit_weibull_k", "logit_weibull_xi",
    *(f"log_tau_{k + 1}" for k in range(K)),
    *(f"corr_angle_{a + 1}" for a in range(N_ANGLES)),
)


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters.

    Weibull bounds left as ``None`` are set to ten times a standalone censored
    Weibull fit by :meth:`resolve`.
    """

    half_cauchy_scale: float = 2.5
    sigma0_halfnormal_scale: float = 100.0
    lkj_eta: float = 1.0
    weibull_bound_k: float | None = None
    weibull_bound_xi: float | None = None

    def __post_init__(self):
        if not (self.half_cauchy_scale > 0 and self.sigma0_halfnormal_scale > 0):
            raise ValueError("prior scales must be positive")
        if not self.lkj_eta >= 1:
            raise ValueError("lkj_eta must be >= 1")
        for bound in (self.weibull_bound_k, self.weibull_bound_xi):
            if bound is not None and not bound > 0:
                raise ValueError("Weibull bounds must be positive")

    def resolve(self, dataset) -> PriorConfig:
        if self.weibull_bound_k is not None and self.weibull_bound_xi is not None:
            return self
        k_hat, xi_hat = weibull_standalone_fit(dataset)
        return PriorConfig(
            half_cauchy_scale=self.half_cauchy_scale,
            sigma0_halfnormal_scale=self.sigma0_halfnormal_scale,
            lkj_eta=self.lkj_eta,
            weibull_bound_k=self.weibull_bound_k or 10.0 * k_hat,
            weibull_bound_xi=self.weibull_bound_xi or 10.0 * xi_hat,
        )


def weibull_standalone_fit(dataset) -> tuple[float, float]:
    """Censored-data maximum likelihood for Weibull ``(k, xi)``.

    The scale is profiled out; with no events the fit degenerates and
    ``k = 1`` with the total follow-up as scale is returned instead.
    """
    T = np.array([s.survival_time for s in dataset])
    D = np.array([s.event for s in dataset])
    d = D.sum()
    if d == 0:
        return 1.0, float(T.sum())
    log_T_events = np.log(T[D == 1]).sum()
    log_T = np.log(T)
    t_max = log_T.max()

    def negloglik(log_k):
        k = math.exp(log_k)
        # log sum T^k, shifted for stability
        log_sum = k * t_max + math.log(np.exp(k * (log_T - t_max)).sum())
        return -(d * log_k - d * (log_sum - math.log(d)) + (k - 1.0) * log_T_events - d)

    res = minimize_scalar(negloglik, bounds=(math.log(0.05), math.log(20.0)), method="bounded")
    k = math.exp(res.x)
    xi = math.exp((k * t_max + math.log(np.exp(k * (log_T - t_max)).sum()) - math.log(d)) / k)
    return k, xi


def _logit(p):
    return math.log(p) - math.log1p(-p)


class ParameterVector:
    """Flat unconstrained vector with named blocks.

    Length is ``25 + 5 N``: 10 scalar fixed-effect coordinates, 5 log scales,
    10 correlation angles and 5 standard-normal coordinates per subject.
    ``bounds`` are the Weibull prior bounds ``(U_k, U_xi)`` that define the
    scaled-logit coordinates of the shape and scale.
    """

    def __init__(self, values, n_subjects: int, bounds):
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size_for(n_subjects),):
            raise ValueError(f"expected {self.size_for(n_subjects)} values, got {values.shape}")
        self.values = values
        self.n_subjects = n_subjects
        self.bounds = (float(bounds[0]), float(bounds[1]))

    @staticmethod
    def size_for(n_subjects: int) -> int:
        return N_GLOBAL + K * n_subjects

    @classmethod
    def from_constrained(cls, fixed: FixedEffects, cov: CovarianceSpec, z_effects, bounds) -> ParameterVector:
        z_effects = np.atleast_2d(np.asarray(z_effects, dtype=float))
        if not (fixed.weibull_k < bounds[0] and fixed.weibull_xi < bounds[1]):
            raise ValueError("Weibull parameters must lie strictly inside their prior bounds")
        head = np.concatenate(
            [
                fixed.beta,
                [fixed.nu, math.log(fixed.sigma0), fixed.gamma0, fixed.gamma1,
                 _logit(fixed.weibull_k / bounds[0]), _logit(fixed.weibull_xi / bounds[1])],
                np.log(cov.tau),
                corr_unconstrain(cov.chol_corr),
            ]
        )
        return cls(np.concatenate([head, z_effects.ravel()]), z_effects.shape[0], bounds)

    @property
    def fixed(self) -> FixedEffects:
        v = self.values
        return FixedEffects(
            beta=tuple(v[:4]), nu=v[4], sigma0=math.exp(v[5]), gamma0=v[6], gamma1=v[7],
            weibull_k=math.exp(log_bounded(v[I_LK], self.bounds[0])),
            weibull_xi=math.exp(log_bounded(v[I_LXI], self.bounds[1])),
        )

    @property
    def covariance(self) -> CovarianceSpec:
        L, _ = corr_cholesky(self.values[I_ANG:I_ANG + N_ANGLES])
        return CovarianceSpec(tau=np.exp(self.values[I_LTAU:I_LTAU + K]), chol_corr=L)

    @property
    def corr_log_jacobian(self) -> float:
        return corr_cholesky(self.values[I_ANG:I_ANG + N_ANGLES])[1]

    @property
    def weibull_log_jacobian(self) -> float:
        """Log-Jacobian of both scaled-logit maps: ``sum log(U s (1 - s))``."""
        total = 0.0
        for idx, bound in ((I_LK, self.bounds[0]), (I_LXI, self.bounds[1])):
            u = self.values[idx]
            total += log_bounded(u, bound) + log_bounded(-u, 1.0)
        return total

    @property
    def z_effects(self) -> np.ndarray:
        return self.values[N_GLOBAL:].reshape(self.n_subjects, K)

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.values[:4], 0.0)

    def effects_matrix(self) -> np.ndarray:
        cov = self.covariance
        return self.theta + cov.tau * (self.z_effects @ cov.chol_corr.T)

    def random_effects(self) -> list[RandomEffects]:
        return [RandomEffects.from_vector(r) for r in self.effects_matrix()]


# ---- reference (per-subject) likelihood terms ------------------------------


def log_lik_longitudinal(subject: SubjectData, r: RandomEffects, fixed: FixedEffects) -> float:
    s = subject.treatment_start
    total = 0.0
    for t, y, z_prev in zip(subject.times, subject.values, subject.previous_treatment):
        mu = conditional_mean(r, t, z_prev, s)
        var = conditional_variance(fixed.sigma0, fixed.nu, r.c, z_prev)
        total += -0.5 * math.log(2 * math.pi) - 0.5 * math.log(var) - (y - mu) ** 2 / (2 * var)
    return total


def log_lik_survival(subject: SubjectData, r: RandomEffects, fixed: FixedEffects) -> float:
    """Event term ``D log hazard(T)`` minus the integrated hazard up to ``T``."""
    T = subject.survival_time
    if T < 0:
        raise ValueError("survival time must be non-negative")
    segments = subject_segments(subject, r, fixed)
    value = -cumulative_hazard(segments, fixed, T)
    if subject.event:
        j = segment_index(segments.starts, T)
        log_base = math.log(baseline_hazard(fixed.weibull_k, fixed.weibull_xi, T))
        value += log_base + segments.log_relative_hazard(fixed)[j]
    return value


def log_prior(params: ParameterVector, prior: PriorConfig) -> float:
    """Log prior density on the unconstrained scale, up to a constant.

    Includes the log-Jacobians of the exp, scaled-logit and correlation
    maps. Returns ``-inf`` if the Weibull parameters fall outside the prior
    bounds (possible only when ``params`` was built with other bounds).
    """
    if prior.weibull_bound_k is None or prior.weibull_bound_xi is None:
        raise ValueError("resolve the prior against a dataset before use")
    v = params.values
    fixed = params.fixed
    if fixed.weibull_k > prior.weibull_bound_k or fixed.weibull_xi > prior.weibull_bound_xi:
        return -math.inf
    cov = params.covariance
    lp = -fixed.sigma0**2 / (2 * prior.sigma0_halfnormal_scale**2) + v[5]
    lp += params.weibull_log_jacobian
    lp += float(np.sum(-np.log1p((cov.tau / prior.half_cauchy_scale) ** 2) + v[I_LTAU:I_LTAU + K]))
    lp += lkj_log_density(cov.chol_corr, prior.lkj_eta) + params.corr_log_jacobian
    lp += -0.5 * float(np.sum(params.z_effects**2))
    return lp


def lkj_log_density(chol_corr, eta) -> float:
    """Unnormalised LKJ log density ``(eta - 1) log det(Omega)``."""
    return 2.0 * (eta - 1.0) * float(np.sum(np.log(np.diag(chol_corr))))


def half_cauchy_logpdf(x, scale) -> float:
    return math.log(2.0 / (math.pi * scale)) - math.log1p((x / scale) ** 2)


# ---- packed posterior ------------------------------------------------------


class JointPosterior:
    """Log-posterior and gradient over a cohort, evaluated by the fast kernel."""

    def __init__(self, dataset, prior: PriorConfig | None = None, backend=None):
        dataset = list(dataset)
        if not dataset:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.prior = (prior or PriorConfig()).resolve(dataset)
        self.n_subjects = len(dataset)
        self.dim = ParameterVector.size_for(self.n_subjects)
        self._kernel = {"numba": _kernels.logp_grad_loop, "numpy": _kernels.logp_grad_numpy, None: _kernels.logp_grad}[backend]
        self._args = self._pack(dataset) + (
            float(self.prior.half_cauchy_scale),
            float(self.prior.sigma0_halfnormal_scale),
            float(self.prior.lkj_eta),
            float(self.prior.weibull_bound_k),
            float(self.prior.weibull_bound_xi),
        )

    @staticmethod
    def _pack(dataset):
        obs_ptr, seg_ptr = [0], [0]
        obs_t, obs_y, obs_p, obs_ts = [], [], [], []
        seg_a, seg_b, seg_q, seg_as = [], [], [], []
        sub_logT, sub_D = [], []
        for subj in dataset:
            s = subj.treatment_start
            obs_t.append(subj.times)
            obs_y.append(subj.values)
            obs_p.append(subj.previous_treatment.astype(float))
            obs_ts.append(subj.times - s)
            obs_ptr.append(obs_ptr[-1] + subj.n_obs)

            T = subj.survival_time
            starts = np.concatenate(([0.0], subj.times))
            z = np.concatenate(([0.0], subj.treatment.astype(float)))
            live = starts < T
            a = starts[live]
            b = np.minimum(np.append(starts[1:], np.inf), T)[live]
            seg_a.append(a)
            seg_b.append(b)
            seg_q.append(z[live])
            seg_as.append(a - s)
            seg_ptr.append(seg_ptr[-1] + a.size)
            if subj.event and (T <= 0 or a.size == 0):
                raise ValueError(f"subject {subj.id}: event at time zero")
            sub_logT.append(math.log(T) if T > 0 else -math.inf)
            sub_D.append(subj.event)
        cat = np.concatenate
        return (
            np.array(obs_ptr, dtype=np.int64), cat(obs_t), cat(obs_y), cat(obs_p), cat(obs_ts),
            np.array(seg_ptr, dtype=np.int64), cat(seg_a), cat(seg_b), cat(seg_q), cat(seg_as),
            np.array(sub_logT), np.array(sub_D, dtype=np.int64),
        )

    def __call__(self, x):
        """Return ``(log_posterior, gradient)`` at unconstrained ``x``."""
        lp, g = self._kernel(np.asarray(x, dtype=float), *self._args)
        return float(lp), g

    def logp(self, x) -> float:
        return float(self(x)[0])

    def grad(self, x) -> np.ndarray:
        lp, g = self(x)
        if not np.isfinite(lp):
            raise ValueError("gradient requested outside the support")
        return g

    @property
    def bounds(self):
        return self.prior.weibull_bound_k, self.prior.weibull_bound_xi

    def vector(self, x) -> ParameterVector:
        return ParameterVector(x, self.n_subjects, self.bounds)


def _values(params):
    return params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)


def log_posterior(params, dataset, prior: PriorConfig | None = None) -> float:
    return JointPosterior(dataset, prior).logp(_values(params))


def grad_log_posterior(params, dataset, prior: PriorConfig | None = None) -> np.ndarray:
    return JointPosterior(dataset, prior).grad(_values(params))


def log_posterior_reference(params: ParameterVector, dataset, prior: PriorConfig) -> float:
    """Sum of the per-subject reference terms and :func:`log_prior`."""
    prior = prior.resolve(dataset)
    lp = log_prior(params, prior)
    if not math.isfinite(lp):
        return lp
    fixed = params.fixed
    for subj, r in zip(dataset, params.random_effects()):
        lp += log_lik_longitudinal(subj, r, fixed) + log_lik_survival(subj, r, fixed)
    return lp


# ---- initialisation and output naming --------------------------------------


def initial_point(dataset, prior: PriorConfig, rng, jitter=0.1) -> np.ndarray:
    """Cheap consistent starting point.

    Pooled least squares for beta, pre-treatment residual variance for sigma0,
    the standalone Weibull fit, zero hazard coefficients and jittered
    standard-normal coordinates near zero.
    """
    y = np.concatenate([s.values for s in dataset])
    design = np.concatenate(
        [
            np.column_stack(
                [np.ones(s.n_obs), s.times, s.previous_treatment, s.previous_treatment * (s.times - s.treatment_start)]
            )
            for s in dataset
        ]
    )
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)

    ss, df, intercepts, slopes = 0.0, 0, [], []
    for s in dataset:
        pre = s.previous_treatment == 0
        if pre.sum() >= 3:
            X = np.column_stack([np.ones(pre.sum()), s.times[pre]])
            coef, res, *_ = np.linalg.lstsq(X, s.values[pre], rcond=None)
            ss += float(res[0]) if res.size else 0.0
            df += int(pre.sum()) - 2
            intercepts.append(coef[0])
            slopes.append(coef[1])
    sigma2 = ss / df if df > 0 and ss > 0 else float(np.var(y - design @ beta))
    tau0 = float(np.std(intercepts)) if len(intercepts) > 1 else 1.0
    tau1 = float(np.std(slopes)) if len(slopes) > 1 else 0.1
    tau = np.maximum([tau0, tau1, 0.5 * tau0, tau1, 0.5], 1e-2)

    k_hat, xi_hat = weibull_standalone_fit(dataset)
    u_k = _logit(min(k_hat / prior.weibull_bound_k, 0.5))
    u_xi = _logit(min(xi_hat / prior.weibull_bound_xi, 0.5))
    head = np.concatenate(
        [beta, [0.0, 0.5 * math.log(sigma2), 0.0, 0.0, u_k, u_xi], np.log(tau), np.zeros(N_ANGLES)]
    )
    z = jitter * rng.standard_normal(K * len(dataset))
    return np.concatenate([head, z])


def constrained_names(dataset) -> list[str]:
    names = ["beta0", "beta1", "beta2", "beta3", "nu", "sigma0", "gamma0", "gamma1",
             "weibull_k", "weibull_xi", "neg_k_log_xi"]
    names += [f"tau_{k + 1}" for k in range(K)]
    names += [f"Sigma_{p + 1}_{q + 1}" for p in range(K) for q in range(p, K)]
    names += [f"Omega_{p + 1}_{q + 1}" for p in range(K) for q in range(p + 1, K)]
    names += [f"L_{p + 1}_{q + 1}" for p in range(1, K) for q in range(p + 1)]
    names += [f"{e}_{s.id}" for s in dataset for e in EFFECT_NAMES]
    return names


def constrained_values(x, n_subjects: int, bounds) -> np.ndarray:
    """Constrained draw in the column order of :func:`constrained_names`."""
    pv = ParameterVector(x, n_subjects, bounds)
    f = pv.fixed
    cov = pv.covariance
    Sigma, Omega, L = cov.covariance, cov.correlation, cov.chol_corr
    out = [*f.beta, f.nu, f.sigma0, f.gamma0, f.gamma1, f.weibull_k, f.weibull_xi, f.neg_k_log_xi]
    out += list(cov.tau)
    out += [Sigma[p, q] for p in range(K) for q in range(p, K)]
    out += [Omega[p, q] for p in range(K) for q in range(p + 1, K)]
    out += [L[p, q] for p in range(1, K) for q in range(p + 1)]
    return np.concatenate([out, pv.effects_matrix().ravel()])
