"""Balancing weights on tree-ensemble kernels for ATT estimation."""

from .balance import (
    BalanceProblem,
    WeightSolution,
    ess,
    estimate_att,
    lambda_heuristic,
    logistic_ipw,
    solve_weights,
)
from .bart import BartParams, fit_bart
from .forest import EnsembleModel, ForestParams, fit_random_forest, predict_ensemble
from .kernel import (
    FeatureMatrix,
    KernelMatrix,
    SpectralFeatures,
    assemble_features,
    forest_kernel,
    gaussian_kernel,
    kernel_imbalance,
    polynomial_kernel,
    spectral_features,
)
from .pipeline import (
    MetricsRow,
    PipelineConfig,
    RunResult,
    run_cross_fit,
    run_forest_kbal,
    run_monte_carlo,
    summarize_metrics,
)
from .sim import DgpSpec, LabeledSample, gen_dataset, load_csv, true_att
from .trees import Internal, Leaf, TreeNode, leaf_ids

__all__ = [
    "BalanceProblem",
    "BartParams",
    "DgpSpec",
    "EnsembleModel",
    "FeatureMatrix",
    "ForestParams",
    "Internal",
    "KernelMatrix",
    "LabeledSample",
    "Leaf",
    "MetricsRow",
    "PipelineConfig",
    "RunResult",
    "SpectralFeatures",
    "TreeNode",
    "WeightSolution",
    "assemble_features",
    "ess",
    "estimate_att",
    "fit_bart",
    "fit_random_forest",
    "forest_kernel",
    "gaussian_kernel",
    "gen_dataset",
    "kernel_imbalance",
    "lambda_heuristic",
    "leaf_ids",
    "load_csv",
    "logistic_ipw",
    "polynomial_kernel",
    "predict_ensemble",
    "run_cross_fit",
    "run_forest_kbal",
    "run_monte_carlo",
    "solve_weights",
    "spectral_features",
    "summarize_metrics",
    "true_att",
]

__version__ = "0.1.0"
