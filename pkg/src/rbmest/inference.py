"""Sandwich variance, approximate pivots and information criteria."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from . import numkit
from .adjustment import empirical_adjustment, sandwich_matrix
from .errors import DomainError, FlavorMismatch
from .estimating import Flavor, assemble


@dataclass
class VarianceEstimate:
    vhat: np.ndarray
    se: np.ndarray


def sandwich(mats):
    """``j^{-1} e j^{-T}`` at the point the matrices were assembled."""
    fac = numkit.lu_factor(mats.j)
    v = sandwich_matrix(fac, mats.e)
    v = 0.5 * (v + v.T)
    diag = np.diag(v).copy()
    if np.any(diag < -1e-12 * max(1.0, np.max(np.abs(v)))):
        raise ValueError("sandwich variance has a negative diagonal entry")
    return VarianceEstimate(vhat=v, se=np.sqrt(np.clip(diag, 0.0, None)))


def wald_pivot(theta_tilde, theta0, vhat):
    """``(theta_tilde - theta0)^T vhat^{-1} (theta_tilde - theta0)``."""
    diff = np.atleast_1d(np.asarray(theta_tilde, float) - np.asarray(theta0, float))
    vhat = np.atleast_2d(np.asarray(vhat, float))
    return float(diff @ numkit.solve(numkit.lu_factor(vhat), diff))


def score_pivot(model, theta0, theta_tilde, method="ad"):
    """Generalized score pivot: adjusted estimating function at ``theta0``
    weighted by ``e(theta_tilde)^{-1}``."""
    at_null = assemble(model, theta0, need_second=True, method=method)
    g = at_null.psi_sum + empirical_adjustment(at_null)
    e_tilde = assemble(model, theta_tilde, need_second=False, method=method).e
    return float(g @ numkit.solve(numkit.lu_factor(e_tilde), g))


def chisq_sf(x, df):
    """Upper tail probability of a chi-squared variable with ``df`` degrees of freedom."""
    if df < 1:
        raise DomainError("degrees of freedom must be at least 1")
    if not x >= 0:
        raise DomainError("chi-squared statistic must be nonnegative")
    return float(special.gammaincc(0.5 * df, 0.5 * x))


@dataclass
class CriterionValue:
    """An information criterion on the -2 scale, with its pieces.

    ``value = -2 * objective_value + 2 * penalty``; ``larger_is_better`` is
    ``objective_value - penalty``, the same criterion on the opposite scale.
    For TIC and CLIC the penalty is ``trace(j^{-1} e)``; for AIC it is ``p``.
    """

    kind: str
    at_estimator: str
    value: float
    objective_value: float
    penalty: float
    trace_penalty: Optional[float] = None

    @property
    def larger_is_better(self):
        return self.objective_value - self.penalty

    def as_dict(self):
        return {
            "kind": self.kind,
            "at": self.at_estimator,
            "value": self.value,
            "larger_is_better": self.larger_is_better,
            "objective": self.objective_value,
            "penalty": self.penalty,
            "trace_penalty": self.trace_penalty,
        }


def _objective_mats(model, theta, method):
    if model.flavor is not Flavor.OBJECTIVE:
        raise FlavorMismatch("information criteria need an objective-flavor model")
    return assemble(model, theta, need_second=False, method=method)


def _trace_criterion(kind, model, theta, at_estimator, method):
    mats = _objective_mats(model, theta, method)
    fac = numkit.lu_factor(mats.j)
    tr = float(np.trace(numkit.solve(fac, mats.e)))
    return CriterionValue(kind, at_estimator, -2.0 * mats.objective + 2.0 * tr, mats.objective, tr, tr)


def tic(model, theta, at_estimator="m", method="ad"):
    return _trace_criterion("TIC", model, theta, at_estimator, method)


def clic(model, theta, at_estimator="m", method="ad"):
    """Same computation as ``tic``, labelled for composite-likelihood objectives."""
    return _trace_criterion("CLIC", model, theta, at_estimator, method)


def aic(model, theta, at_estimator="m", method="ad"):
    mats = _objective_mats(model, theta, method)
    p = float(model.p)
    return CriterionValue("AIC", at_estimator, -2.0 * mats.objective + 2.0 * p, mats.objective, p)


def criterion_weights(values):
    """Weights ``exp(-delta_k) / sum_i exp(-delta_i)`` with ``delta_k = (c_k - min c) / 2``."""
    values = np.asarray(values, dtype=float)
    delta = (values - np.min(values)) / 2.0
    w = np.exp(-delta)
    return w / w.sum()
