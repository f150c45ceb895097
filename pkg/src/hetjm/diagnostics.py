"""Convergence summaries, posterior predictive draws and derived quantities."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .model import EFFECT_NAMES

log = logging.getLogger(__name__)

# Sampler statistics stored alongside parameters; trailing "__" keeps them out
# of parameter summaries.
STAT_NAMES = ("lp__", "accept_stat__", "treedepth__", "n_leapfrog__", "divergent__", "stepsize__")

# Upper-tail critical values of A^2 when the null distribution is fully
# specified (Stephens' case 0).
AD_CASE0_CRITICAL = {0.15: 1.610, 0.10: 1.933, 0.05: 2.492, 0.025: 3.070, 0.01: 3.857}


@dataclass(eq=False)
class DrawsMatrix:
    """Posterior draws indexed by (chain, iteration, parameter)."""

    names: list
    values: np.ndarray

    def __post_init__(self):
        self.names = list(self.names)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[2] != len(self.names):
            raise ValueError("values must be chains x iters x len(names)")
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("draws must be finite")
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def chains(self) -> int:
        return self.values.shape[0]

    @property
    def iters(self) -> int:
        return self.values.shape[1]

    @property
    def parameter_names(self) -> list:
        return [n for n in self.names if not n.endswith("__")]

    def __getitem__(self, name) -> np.ndarray:
        """Chains x iters array for one column."""
        return self.values[:, :, self._index[name]]

    def __contains__(self, name):
        return name in self._index

    def flat(self, name) -> np.ndarray:
        return self[name].reshape(-1)

    def __eq__(self, other):
        return isinstance(other, DrawsMatrix) and self.names == other.names and np.array_equal(self.values, other.values)


def split_rhat(draws) -> float:
    """Split potential scale reduction for a chains x iters array.

    Returns ``nan`` (with a warning) when the within-chain variance is zero.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = draws.shape
    if n < 4:
        raise ValueError("need at least 4 iterations per chain")
    half = n // 2
    split = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    n = half
    within = split.var(axis=1, ddof=1).mean()
    if not within > 0:
        warnings.warn("zero within-chain variance; split R-hat undefined", RuntimeWarning, stacklevel=2)
        return math.nan
    between = n * split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return math.sqrt(var_plus / within)


def mcse_batch_means(x, n_batches=None) -> float:
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 4:
        return math.nan
    b = n_batches or max(2, int(math.sqrt(n)))
    size = n // b
    means = x[: size * b].reshape(b, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(b))


SUMMARY_COLUMNS = ("mean", "sd", "mcse", "q2.5", "q97.5", "rhat")


def summarize(draws: DrawsMatrix, names=None) -> dict:
    """Per-parameter mean, SD, MCSE, 95% quantile interval and split R-hat.

    Quantiles interpolate linearly between order statistics. The MCSE uses
    batch means on each chain and combines chains.
    """
    out = {}
    for name in names or draws.parameter_names:
        x = draws[name]
        flat = x.ravel()
        sd = float(flat.std(ddof=1)) if flat.size > 1 else 0.0
        if sd == 0.0:
            mcse, rhat = 0.0, math.nan
        else:
            per_chain = [mcse_batch_means(c) for c in x]
            mcse = math.sqrt(sum(v**2 for v in per_chain)) / len(per_chain)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rhat = split_rhat(x) if x.shape[1] >= 4 else math.nan
        q_lo, q_hi = np.quantile(flat, [0.025, 0.975])
        out[name] = {
            "mean": float(flat.mean()),
            "sd": sd,
            "mcse": mcse,
            "q2.5": float(q_lo),
            "q97.5": float(q_hi),
            "rhat": rhat,
        }
    return out


def posterior_predictive(draws: DrawsMatrix, dataset, n_rep: int, rng) -> np.ndarray:
    """Replicate every observed value ``n_rep`` times.

    Each replicate picks one posterior draw at random and regenerates all
    values at the observed times and treatment history from that draw's
    subject effects and variance model. Returns ``n_rep x total_obs``, in
    dataset order.
    """
    n_draws = draws.chains * draws.iters
    flat = draws.values.reshape(n_draws, -1)
    idx = draws._index
    sigma0 = flat[:, idx["sigma0"]]
    nu = flat[:, idx["nu"]]
    blocks = []
    for subj in dataset:
        cols = [idx[f"{e}_{subj.id}"] for e in EFFECT_NAMES]
        p = subj.previous_treatment
        ts = subj.times - subj.treatment_start
        blocks.append((cols, subj.times, p, ts))
    total = sum(b[1].size for b in blocks)
    out = np.empty((n_rep, total))
    picks = rng.integers(0, n_draws, size=n_rep)
    for rep, d in enumerate(picks):
        row = flat[d]
        pos = 0
        for cols, t, p, ts in blocks:
            b0, b1, b2, b3, c = row[cols]
            mu = b0 + b1 * t + p * (b2 + b3 * ts)
            sd = sigma0[d] * np.exp(0.5 * (nu[d] * p + c))
            out[rep, pos:pos + t.size] = mu + sd * rng.standard_normal(t.size)
            pos += t.size
    return out


# ---- heteroskedasticity screen -----------------------------------------------


def _ad_sorted_uniforms(u):
    """A^2 for each row of already sorted probability-integral transforms."""
    u = np.clip(u, 1e-300, 1 - 1e-16)
    n = u.shape[-1]
    i = np.arange(1, n + 1)
    return -n - np.sum((2 * i - 1) * (np.log(u) + np.log1p(-u[..., ::-1])), axis=-1) / n


def anderson_darling(x, cdf=ndtr) -> float:
    """A^2 statistic against a fully specified continuous distribution."""
    return float(_ad_sorted_uniforms(cdf(np.sort(np.asarray(x, dtype=float)))))


def anderson_darling_pvalue(a2: float) -> float:
    """Upper-tail p-value from the asymptotic A^2 distribution (Marsaglia 2004)."""
    z = a2
    if z <= 0:
        return 1.0
    if z < 2:
        cdf = math.exp(-1.2337141 / z) / math.sqrt(z) * (
            2.00012 + (0.247105 - (0.0649821 - (0.0347962 - (0.011672 - 0.00168691 * z) * z) * z) * z) * z
        )
    else:
        cdf = math.exp(-math.exp(1.0776 - (2.30695 - (0.43424 - (0.082433 - (0.008056 - 0.0003146 * z) * z) * z) * z) * z))
    return float(min(1.0, max(0.0, 1.0 - cdf)))


@dataclass
class VarianceScreenResult:
    q: np.ndarray
    s2: np.ndarray
    sigma2_hat: float
    transformed: np.ndarray
    a2: float
    p_value: float
    reject: bool
    n_excluded: int
    method: str


def _screen_statistic(ss, df):
    """Pooled variance, normal scores and A^2; ``ss`` may hold one row per replicate."""
    sigma2 = ss.sum(axis=-1, keepdims=True) / df.sum()
    u = stats.chi2.cdf(ss / sigma2, df)
    scores = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    a2 = _ad_sorted_uniforms(np.sort(ndtr(scores), axis=-1))
    return sigma2[..., 0], scores, a2


def variance_screen(residuals, alpha=0.05, df_loss=1, method="monte_carlo", n_mc=1999, rng=None):
    """Screen per-subject residual variances for heteroskedasticity.

    ``residuals`` holds one array of pre-treatment residuals per subject.
    With ``df_i = q_i - df_loss`` and ``s2_i = SS_i / df_i`` (``SS_i`` the
    centred sum of squares), homoskedasticity makes ``df_i s2_i / sigma2``
    chi-square with ``df_i`` degrees of freedom. Each statistic is mapped to
    a normal score through the chi-square CDF and the normal quantile, and the
    scores are tested with Anderson-Darling against N(0, 1). ``sigma2`` is the
    df-weighted pooled variance. Subjects with fewer than two residuals (or
    no residual degrees of freedom) are excluded.

    Plugging in the pooled variance makes the scores less dispersed than
    N(0, 1), so the fully specified (``method="case0"``) p-value is strongly
    conservative. The default ``"monte_carlo"`` p-value compares A^2 with
    ``n_mc`` replicates of the same statistic under exact chi-square sums of
    squares with the observed degrees of freedom; the statistic does not
    depend on the true variance, so this null is exact up to Monte Carlo
    error.
    """
    if method not in ("monte_carlo", "case0"):
        raise ValueError("method must be 'monte_carlo' or 'case0'")
    kept, excluded = [], 0
    for r in residuals:
        r = np.asarray(r, dtype=float)
        if r.size < 2 or r.size - df_loss < 1:
            excluded += 1
            continue
        kept.append(r)
    if excluded:
        log.info("variance screen: %d subject(s) with too few residuals excluded", excluded)
    if len(kept) < 2:
        raise ValueError("need at least two subjects with two or more residuals")
    q = np.array([r.size for r in kept])
    df = q - df_loss
    ss = np.array([np.sum((r - r.mean()) ** 2) for r in kept])
    sigma2_hat, transformed, a2 = _screen_statistic(ss, df)
    a2 = float(a2)
    if method == "case0":
        p = anderson_darling_pvalue(a2)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        null = _screen_statistic(rng.chisquare(df, size=(n_mc, df.size)), df)[2]
        p = float((1 + np.sum(null >= a2)) / (n_mc + 1))
    return VarianceScreenResult(q, ss / df, float(sigma2_hat), transformed, a2, p, bool(p < alpha), excluded, method)


def pretreatment_residuals(dataset, min_obs=3):
    """Residuals of per-subject straight-line fits to pre-treatment values.

    Each fit uses two parameters, so pass ``df_loss=2`` to
    :func:`variance_screen` with these residuals.
    """
    out = []
    for subj in dataset:
        pre = subj.previous_treatment == 0
        t, y = subj.times[pre], subj.values[pre]
        if t.size < min_obs:
            out.append(np.empty(0))
            continue
        X = np.column_stack([np.ones(t.size), t])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        out.append(y - X @ coef)
    return out


# ---- derived clinical quantities -----------------------------------------------


def benefit_fraction(gamma0, gamma1, nu, mean_b2, var_b2) -> float:
    """Share of subjects whose immediate treatment effect lowers the hazard.

    That is ``P(gamma0 b2 + gamma1 nu <= 0)`` for ``b2 ~ N(mean_b2, var_b2)``.
    """
    if gamma0 == 0:
        raise ValueError("gamma0 = 0 makes the benefit condition degenerate")
    if not var_b2 > 0:
        raise ValueError("var_b2 must be positive")
    threshold = -gamma1 * nu / gamma0
    z = (threshold - mean_b2) / math.sqrt(var_b2)
    return float(ndtr(z) if gamma0 > 0 else ndtr(-z))
