import numpy as np
import pytest

from hetjm.model import FixedEffects, TreatmentParams
from hetjm.simulate import reference_design, simulate_cohort

# Treatment intercept giving roughly 40% treated subjects under the reference
# design (the default intercept treats almost nobody).
CALIBRATED_ALPHA = TreatmentParams(alpha0=-2.29, alpha1=0.05)


@pytest.fixture(scope="session")
def small_cohort():
    cfg = reference_design(n_subjects=10, seed=3, alpha=CALIBRATED_ALPHA, fixed=FixedEffects(weibull_xi=20.0))
    return simulate_cohort(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
