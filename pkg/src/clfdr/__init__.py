"""Conditional local FDR for heterogeneous multinomial count data."""

__version__ = "0.1.0"

from .data import Covariate, CountDataset, DataError, TestRecord, load_counts, row_totals
from .fdr import DecisionResult, ErrorCounts, bh_procedure, confusion_counts, fdr_mdr_estimates, lfdr_stepup
from .loglinear import (
    NullDistribution,
    conditional_mean,
    conditional_sd,
    log_pmf,
    multinomial_probs,
    p_value,
    simulate_null,
    z_score,
)
from .mixture import FitResult, MixtureParams, clfdr_stats, e_step, fit_em, log_likelihood
from .normal_mixture import NormalMixtureParams, fit_normal_mixture, lfdr_stats
from .threshold import SizePMF, TwoGroupModel, clfdr_zn, lfdr_z, rejection_boundary

__all__ = [name for name in dir() if not name.startswith("_")]
