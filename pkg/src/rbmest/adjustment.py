"""Empirical bias-reducing adjustment, penalized objectives and the one-step estimator."""

import numpy as np

from . import numkit
from .errors import FlavorMismatch, SingularMatrix
from .estimating import Flavor, assemble


def sandwich_matrix(fac, e):
    """``j^{-1} e j^{-T}`` from the LU factors of ``j`` (``e`` symmetric)."""
    left = numkit.solve(fac, e)  # j^{-1} e
    return numkit.solve(fac, left.T).T


def empirical_adjustment(mats, fac=None, form="index"):
    """Adjustment vector ``A`` with components

    ``A_r = -sum_{s,t} [j^{-1}]_{st} [d_r]_{st} - 0.5 * trace(j^{-1} e j^{-T} u_r)``.

    The first term is ``-trace(j^{-1} d_r^T)``. It equals ``-trace(j^{-1} d_r)``
    when ``j`` is symmetric, which covers every objective-flavor model; for
    a non-symmetric ``j`` only the transposed pairing removes the first-order
    bias. ``form="matrix"`` selects the untransposed ``-trace(j^{-1} d_r)``
    for comparison.

    ``j^{-1}`` is only ever applied through LU solves.
    """
    if form not in ("index", "matrix"):
        raise ValueError("form must be 'index' or 'matrix'")
    if mats.d is None or mats.u is None:
        raise ValueError("second-order matrices are required; assemble with need_second=True")
    if fac is None:
        fac = numkit.lu_factor(mats.j)
    vhat = sandwich_matrix(fac, mats.e)
    p = mats.p
    d = mats.d if form == "matrix" else [dr.T for dr in mats.d]
    jinv_d = numkit.solve(fac, np.hstack(d))
    out = np.empty(p)
    for r in range(p):
        block = jinv_d[:, r * p:(r + 1) * p]
        out[r] = -np.trace(block) - 0.5 * numkit.trace_of_product(vhat, mats.u[r])
    return out


def _require_objective(model):
    if model.flavor is not Flavor.OBJECTIVE:
        raise FlavorMismatch("penalized objectives need an objective-flavor model")


def trace_penalty(mats):
    """``trace(j^{-1} e)``."""
    fac = numkit.lu_factor(mats.j)
    return float(np.trace(numkit.solve(fac, mats.e)))


def penalized_objective(model, theta, method="ad"):
    """``l(theta) - 0.5 * trace(j^{-1} e)``."""
    _require_objective(model)
    mats = assemble(model, theta, need_second=False, method=method)
    return mats.objective - 0.5 * trace_penalty(mats)


def logdet_penalty(mats):
    """``0.5 * log det j - 0.5 * log det e``."""
    return 0.5 * numkit.log_abs_det(numkit.lu_factor(mats.j)) - 0.5 * numkit.log_abs_det(numkit.lu_factor(mats.e))


def penalized_objective_logdet(model, theta, method="ad"):
    """``l(theta) + 0.5 log det j(theta) - 0.5 log det e(theta)``."""
    _require_objective(model)
    mats = assemble(model, theta, need_second=False, method=method)
    return mats.objective + logdet_penalty(mats)


def adjusted_value(model, theta, method="ad"):
    """``sum_i psi^i(theta) + A(theta)`` together with the matrices used."""
    mats = assemble(model, theta, need_second=True, method=method)
    return mats.psi_sum + empirical_adjustment(mats), mats


class AdjustedSystem:
    """Adjusted estimating function with a one-entry cache keyed by ``theta``."""

    def __init__(self, model, method="ad"):
        self.model = model
        self.method = method
        self._key = None
        self.mats = None
        self.value = None

    def __call__(self, theta):
        theta = np.ascontiguousarray(theta, dtype=float)
        key = theta.tobytes()
        if key != self._key:
            value, mats = adjusted_value(self.model, theta, self.method)
            self._key, self.mats, self.value = key, mats, value
        return self.value


def one_step(model, theta_hat, method="ad"):
    """``theta_hat + j(theta_hat)^{-1} A(theta_hat)``: one unit quasi Newton-Raphson step."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    mats = assemble(model, theta_hat, need_second=True, method=method)
    fac = numkit.lu_factor(mats.j)
    adj = empirical_adjustment(mats, fac)
    return theta_hat + numkit.solve(fac, adj)


__all__ = [
    "AdjustedSystem",
    "SingularMatrix",
    "adjusted_value",
    "empirical_adjustment",
    "logdet_penalty",
    "one_step",
    "penalized_objective",
    "penalized_objective_logdet",
    "sandwich_matrix",
    "trace_penalty",
]
