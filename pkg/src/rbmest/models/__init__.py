"""Built-in estimating models."""

from .glm import GlmSpec, glm_appendix_matrices, glm_model, penalized_loglik
from .links import get_link, get_variance, working_quantities
from .quasi import QuasiSpec, phi_moment, quasi_appendix_matrices, quasi_model
from .ratio import (RatioData, ratio_jackknife, ratio_m_estimate, ratio_model, ratio_onestep,
                    ratio_rbm_estimate, ratio_sandwich)

__all__ = [
    "GlmSpec", "glm_model", "glm_appendix_matrices", "penalized_loglik",
    "get_link", "get_variance", "working_quantities",
    "QuasiSpec", "quasi_model", "quasi_appendix_matrices", "phi_moment",
    "RatioData", "ratio_model", "ratio_m_estimate", "ratio_rbm_estimate", "ratio_onestep",
    "ratio_jackknife", "ratio_sandwich",
]
