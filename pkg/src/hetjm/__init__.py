"""Bayesian joint model of a treated longitudinal risk factor and survival.

The longitudinal submodel lets each subject's mean trajectory and residual
variance shift when treatment starts; the Weibull hazard depends on both the
current mean and the current log residual variance. Posterior inference uses
a No-U-Turn sampler on a non-centred parametrisation.
"""

from ._accel import BACKEND
from .diagnostics import DrawsMatrix, benefit_fraction, split_rhat, summarize, variance_screen
from .inference import JointPosterior, PriorConfig
from .model import CovarianceSpec, FixedEffects, RandomEffects, SubjectData, TreatmentParams
from .sampler import SamplerConfig, run
from .simulate import SimConfig, reference_design, simulate_cohort

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CovarianceSpec",
    "DrawsMatrix",
    "FixedEffects",
    "JointPosterior",
    "PriorConfig",
    "RandomEffects",
    "SamplerConfig",
    "SimConfig",
    "SubjectData",
    "TreatmentParams",
    "benefit_fraction",
    "reference_design",
    "run",
    "simulate_cohort",
    "split_rhat",
    "summarize",
    "variance_screen",
]
