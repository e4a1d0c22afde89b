"""Generalized skew-t probabilistic PCA with missing data."""

from .core_types import (
    DataSet,
    DimensionMismatch,
    FitResult,
    KindConstraint,
    ModelKind,
    ModelParams,
    NonPositiveScale,
    ValidationError,
    collapse_kind,
    validate,
)
from .covariance import eigendecompose, model_covariance, proportion_of_variance
from .em_baselines import fit_gaussian_ppca, fit_student_t_ppca
from .em_gst import EmConfig, e_step_q, fit, initialize, integral_set, log_likelihood, m_step
from .simulate import SimSpec, mask_mar, simulate, simulate_params
from .skewt_simplified import fit_skew_t_grid

__all__ = [
    "DataSet",
    "DimensionMismatch",
    "EmConfig",
    "FitResult",
    "KindConstraint",
    "ModelKind",
    "ModelParams",
    "NonPositiveScale",
    "SimSpec",
    "ValidationError",
    "collapse_kind",
    "e_step_q",
    "eigendecompose",
    "fit",
    "fit_gaussian_ppca",
    "fit_skew_t_grid",
    "fit_student_t_ppca",
    "initialize",
    "integral_set",
    "log_likelihood",
    "m_step",
    "mask_mar",
    "model_covariance",
    "proportion_of_variance",
    "simulate",
    "simulate_params",
    "validate",
]
