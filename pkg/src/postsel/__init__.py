"""Finite-sample and limiting distributions of post-model-selection estimators
in Gaussian linear regression, with a seeded Monte Carlo harness."""

__version__ = "0.1.0"

from .errors import (ConditioningError, ConfigError, DegenerateResidualError, PostselError,
                     SingularDesignError, ToleranceError)
from .regression import DesignMatrix, ParameterPoint, Sample, SampleBatch, TargetMap
from .selection import NestedFamily, SubsetFamily, ThresholdRule, gts_select, ic_select
from .cond_dist import (ABOVE, AT, QuadratureConfig, cond_cdf_exact, cond_cdf_grid, limit_cdf,
                        limit_cdf_mc, lemma_c1_bound, sel_prob_exact, selection_probabilities)
from .estimators import check_cdf, plugin_phi
from .montecarlo import ExperimentPlan, draw_sample, run_ledger, simulate

__all__ = [
    "ABOVE", "AT", "ConditioningError", "ConfigError", "DegenerateResidualError",
    "DesignMatrix", "ExperimentPlan", "NestedFamily", "ParameterPoint", "PostselError",
    "QuadratureConfig", "Sample", "SampleBatch", "SingularDesignError", "SubsetFamily",
    "TargetMap", "ThresholdRule", "ToleranceError", "check_cdf", "cond_cdf_exact",
    "cond_cdf_grid", "draw_sample", "gts_select", "ic_select", "lemma_c1_bound", "limit_cdf",
    "limit_cdf_mc", "plugin_phi", "run_ledger", "sel_prob_exact", "selection_probabilities",
    "simulate",
]
