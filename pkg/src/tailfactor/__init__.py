"""Tail quantile factor models for heavy-tailed panel data.

Estimation of intermediate and extreme upper-tail quantile surfaces via a
box-constrained check-loss factorization, with model validation, factor
selection, an excess-over-threshold pipeline, simulation generators, and a
benchmarking harness.
"""

from ._qr_solvers import solve_scale_qr, solve_vector_qr
from .bench import ExperimentConfig, ExperimentReport, ModelSpec, run_experiment
from .dgp import DgpSample, DgpSpec, dgp3_lp, generate, generate_null, reference_constant
from .eot import (
    EoTResult,
    TailThresholdEot,
    ThresholdModelKind,
    fit_threshold,
    load_covariates,
    run_eot,
)
from .evt import (
    TailEstimates,
    hill,
    hill_plot_data,
    order_statistic_quantile,
    tail_estimates,
    weissman_extrapolate,
)
from .ftvm import (
    FactorModel,
    FactorizedTailVolatility,
    FitOptions,
    FitResult,
    degenerate_quantiles,
    fit_ftvm,
    normalize_identification,
    predict_quantiles,
)
from .metrics import TruthBundle, align_and_score, msre, msre_eot, msre_surface
from .panel import (
    PanelData,
    TailConfig,
    check_loss,
    load_panel,
    load_result,
    save_panel,
    save_result,
)
from .selection import (
    IcReport,
    KsReport,
    SelectionOutcome,
    ic_select,
    ks_pvalue,
    ks_statistic,
    validate_then_select,
)

__version__ = "0.1.0"

__all__ = [
    "DgpSample",
    "DgpSpec",
    "EoTResult",
    "ExperimentConfig",
    "ExperimentReport",
    "FactorModel",
    "FactorizedTailVolatility",
    "FitOptions",
    "FitResult",
    "IcReport",
    "KsReport",
    "ModelSpec",
    "PanelData",
    "SelectionOutcome",
    "TailConfig",
    "TailEstimates",
    "TailThresholdEot",
    "ThresholdModelKind",
    "TruthBundle",
    "align_and_score",
    "check_loss",
    "degenerate_quantiles",
    "dgp3_lp",
    "fit_ftvm",
    "fit_threshold",
    "generate",
    "generate_null",
    "hill",
    "hill_plot_data",
    "ic_select",
    "ks_pvalue",
    "ks_statistic",
    "load_covariates",
    "load_panel",
    "load_result",
    "msre",
    "msre_eot",
    "msre_surface",
    "normalize_identification",
    "order_statistic_quantile",
    "predict_quantiles",
    "reference_constant",
    "run_eot",
    "run_experiment",
    "save_panel",
    "save_result",
    "solve_scale_qr",
    "solve_vector_qr",
    "tail_estimates",
    "validate_then_select",
    "weissman_extrapolate",
    "__version__",
]
