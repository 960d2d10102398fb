"""Hierarchical meta-analysis of correlated endpoints across cohorts."""
from .datamodel import (
    CohortData,
    EffectBlock,
    EndpointFit,
    HiermetaError,
    NumericalError,
    StandardizationRecord,
    ValidationError,
    load_cohort_csv,
    standardize_responses,
)
from .onestage import OneStageFit, OneStageOptions, fit_onestage, marginal_loglik
from .stage1 import run_stage1
from .stage2 import CohortPooled, ConvergenceOptions, pool_within_cohort, pseudo_loglik, weighted_beta
from .stage3 import GlobalPooled, pool_across_cohorts

__version__ = "0.1.0"
