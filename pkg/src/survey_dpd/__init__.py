"""Robust density power divergence estimation for survey-weighted
polytomous logistic regression."""
from .model import (ClusterRecord, InputError, SurveyDataset, as_beta, delta_matrix,
                    delta_star, model_probabilities, probability_jacobian)
from .objective import (BranchError, DpdConfig, NumericError, cluster_score,
                        dpd_kernel_objective, estimating_function, quasi_weighted_loglik)
from .fitting import FitConfig, FitResult, fit

__version__ = "0.1.0"

__all__ = [
    "BranchError", "ClusterRecord", "DpdConfig", "FitConfig", "FitResult", "InputError",
    "NumericError", "SurveyDataset", "as_beta", "cluster_score", "delta_matrix",
    "delta_star", "dpd_kernel_objective", "estimating_function", "fit",
    "model_probabilities", "probability_jacobian", "quasi_weighted_loglik",
]
