"""Reduced-bias M-estimation with empirical bias-reducing adjustments."""

from .adjustment import (empirical_adjustment, one_step, penalized_objective,
                         penalized_objective_logdet)
from .errors import RBMError
from .estimating import AdjustmentMatrices, EstimatingModel, Flavor, assemble
from .inference import aic, clic, criterion_weights, sandwich, score_pivot, tic, wald_pivot
from .solver import EstimatorKind, FitResult, PenaltyVariant, SolverConfig, fit, maximize_penalized, solve_m, solve_rbm

__version__ = "0.1.0"

__all__ = [
    "AdjustmentMatrices", "EstimatingModel", "Flavor", "assemble",
    "empirical_adjustment", "one_step", "penalized_objective", "penalized_objective_logdet",
    "aic", "clic", "tic", "criterion_weights", "sandwich", "score_pivot", "wald_pivot",
    "EstimatorKind", "FitResult", "PenaltyVariant", "SolverConfig", "fit", "maximize_penalized",
    "solve_m", "solve_rbm", "RBMError",
]
