"""Quantile regression with dual-based leave-one-out coverage diagnostics.

The package fits ridge-penalized quantile regressions with certified dual
solutions, reads leave-one-out coverage off the dual signs, corrects the
coverage bias by level, additive or ridge calibration, builds conformal
predictions by thresholding the dual of an augmented fit, and solves the
proportional-asymptotics program that predicts all of these quantities.
"""

__version__ = "0.1.0"

from .asymptotics import (
    AsymptoticError,
    AsymptoticProblem,
    AsymptoticSolution,
    DualLaw,
    limiting_dual_law,
    solve_asymptotic,
)
from .baselines import IntervalMethod, IntervalReport, cqr_predict, evaluate, interval_predict
from .calibrate import (
    CalibrationResult,
    Method,
    bai_level,
    calibrate_additive,
    calibrate_additive_ridge,
    calibrate_bai,
    calibrate_level,
    calibrate_level_ridge,
    calibrate_ridge_only,
    default_lambda_grid,
)
from .conformal import (
    BracketError,
    DualPathQuery,
    ThresholdPrediction,
    fixed_threshold,
    fixed_threshold_predict,
    full_conformal_predict,
    quantile_dual_threshold,
    randomized_gcc_predict,
    solve_query,
)
from .core import (
    DataError,
    Dataset,
    FitResult,
    FixedOffset,
    FreeIntercept,
    KktCertificate,
    ProblemSpec,
    denormalize,
    empirical_quantile,
    normalize,
    read_csv,
)
from .experiments import ExperimentReport, Figure, FigureConfig, SimConfig, generate, run_figure
from .loo import LooSummary, loo_coverage_bruteforce, loo_coverage_dual, loo_multiaccuracy, multiaccuracy
from .solver import (
    ConvergenceError,
    SolverConfig,
    fit,
    fit_augmented,
    pinball_envelope,
    pinball_loss,
    pinball_prox,
)

__all__ = [
    "AsymptoticError", "AsymptoticProblem", "AsymptoticSolution", "BracketError", "CalibrationResult",
    "ConvergenceError", "DataError", "Dataset", "DualLaw", "DualPathQuery", "ExperimentReport", "Figure",
    "FigureConfig", "FitResult", "FixedOffset", "FreeIntercept", "IntervalMethod", "IntervalReport",
    "KktCertificate", "LooSummary", "Method", "ProblemSpec", "SimConfig", "SolverConfig",
    "ThresholdPrediction", "bai_level", "calibrate_additive", "calibrate_additive_ridge", "calibrate_bai",
    "calibrate_level", "calibrate_level_ridge", "calibrate_ridge_only", "cqr_predict", "default_lambda_grid",
    "denormalize", "empirical_quantile", "evaluate", "fit", "fit_augmented", "fixed_threshold",
    "fixed_threshold_predict", "full_conformal_predict", "generate", "interval_predict", "limiting_dual_law",
    "loo_coverage_bruteforce", "loo_coverage_dual", "loo_multiaccuracy", "multiaccuracy", "normalize",
    "pinball_envelope", "pinball_loss", "pinball_prox", "quantile_dual_threshold", "randomized_gcc_predict",
    "read_csv", "run_figure", "solve_asymptotic", "solve_query",
]
