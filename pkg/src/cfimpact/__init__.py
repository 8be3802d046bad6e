"""Counterfactual prediction for panel data.

Estimators for the untreated outcomes of treated units (difference in
differences, synthetic control, constrained regression, robust synthetic
control, nuclear-norm matrix completion and a feed-forward network ensemble),
plus backtesting and simulated-treatment tools.
"""

__version__ = "0.1.0"

from .controls import SelectionConfig, apply_sparse_rule, select_by_correlation
from .evaluation import (
    MetricsReport,
    PseudoPeriod,
    length_sweep,
    predict_counterfactual,
    run_backtest,
    sample_periods,
    scale_rmse,
)
from .ffnn import EnsembleModel, FeedForwardCounterfactual, FfnnConfig, FfnnModel
from .linear import (
    ConstrainedRegression,
    ConstrainedRegressionCV,
    CounterfactualSeries,
    DifferenceInDifferences,
    LinearFit,
    SyntheticControl,
    fit_cr,
    fit_did,
    fit_sc,
)
from .mcnnm import LatentMatrix, SoftImpute, soft_impute
from .panel import CalendarFeatures, PanelError, PanelMatrix, TreatmentMask, load_panel, save_panel
from .rsc import RobustSyntheticControl, denoise, fit_rsc
from .simulation import ImpactReport, SimulatedTreatment, cr_prediction_interval, estimate_impact, inject_treatment
from .synth import GeneratorConfig, describe, generate

__all__ = [
    "CalendarFeatures",
    "ConstrainedRegression",
    "ConstrainedRegressionCV",
    "CounterfactualSeries",
    "DifferenceInDifferences",
    "EnsembleModel",
    "FeedForwardCounterfactual",
    "FfnnConfig",
    "FfnnModel",
    "GeneratorConfig",
    "ImpactReport",
    "LatentMatrix",
    "LinearFit",
    "MetricsReport",
    "PanelError",
    "PanelMatrix",
    "PseudoPeriod",
    "RobustSyntheticControl",
    "SelectionConfig",
    "SimulatedTreatment",
    "SoftImpute",
    "SyntheticControl",
    "TreatmentMask",
    "apply_sparse_rule",
    "cr_prediction_interval",
    "denoise",
    "describe",
    "estimate_impact",
    "fit_cr",
    "fit_did",
    "fit_rsc",
    "fit_sc",
    "generate",
    "inject_treatment",
    "length_sweep",
    "load_panel",
    "predict_counterfactual",
    "run_backtest",
    "sample_periods",
    "save_panel",
    "scale_rmse",
    "select_by_correlation",
    "soft_impute",
]
