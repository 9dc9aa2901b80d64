"""Causal effect estimation and inference with possibly invalid instruments."""

from .core import (
    EstimateReport,
    IntervalUnion,
    IVDataset,
    ReducedFormFit,
    first_stage_f,
    fit_reduced_form,
    load_summary_stats,
    read_individual_csv,
    read_summary_csv,
)
from .hetero import genius, misteri_fit
from .linear import adaptive_lasso, kclass_estimator, median_estimator, ols, sisvive, tsls
from .methods import REGISTRY, run_method
from .nonlinear import build_interaction_basis, g_interaction, tsci
from .selection import cim, downward_testing, j_test, tsht
from .simulation import SimScenario, generate, identification_oracle, run_experiment
from .uniform import sampling_ci, searching_ci, union_ci

__version__ = "0.1.0"

__all__ = [
    "EstimateReport",
    "IVDataset",
    "IntervalUnion",
    "REGISTRY",
    "ReducedFormFit",
    "SimScenario",
    "adaptive_lasso",
    "build_interaction_basis",
    "cim",
    "downward_testing",
    "first_stage_f",
    "fit_reduced_form",
    "g_interaction",
    "generate",
    "genius",
    "identification_oracle",
    "j_test",
    "kclass_estimator",
    "load_summary_stats",
    "median_estimator",
    "misteri_fit",
    "ols",
    "read_individual_csv",
    "read_summary_csv",
    "run_experiment",
    "run_method",
    "sampling_ci",
    "searching_ci",
    "sisvive",
    "tsci",
    "tsht",
    "tsls",
    "union_ci",
]
