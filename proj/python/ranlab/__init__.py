"""Noisy image-caption pre-training experiments: Python access to the C++ core."""

from ranlab._core import (
    ConfigError,
    ContractViolation,
    DegenerateEmbedding,
    Error,
    ExperimentConfig,
    NumericError,
    UndefinedMetric,
    adv_loss,
    auc,
    compose_ran_loss,
    cov_loss,
    floor_count,
    mse_consistency,
    results_csv,
    run_matrix,
    synth_corpus,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DegenerateEmbedding",
    "Error",
    "ExperimentConfig",
    "NumericError",
    "UndefinedMetric",
    "adv_loss",
    "auc",
    "compose_ran_loss",
    "cov_loss",
    "floor_count",
    "mse_consistency",
    "results_csv",
    "run_matrix",
    "synth_corpus",
]
