"""Estimating-function models and assembly of the adjustment matrices.

A model supplies its ``k`` contributions in one batched call on lifted
parameters:

* ``VECTOR_PSI``: ``contributions(params, data)`` returns a list of ``p``
  duals, the ``r``-th holding ``psi_r^i`` for every contribution ``i``.
* ``OBJECTIVE``: ``contributions(params, data)`` returns one dual holding the
  objective contribution of each observation; ``psi^i`` is its gradient.

``assemble`` turns one evaluation into ``j``, ``e``, ``d_r`` and ``u_r``::

    j[s, :]    = -sum_i grad psi_s^i
    e[s, t]    =  sum_i psi_s^i psi_t^i
    d_r[s, t]  =  sum_i (d psi_r^i / d theta_s) psi_t^i
    u_r        =  sum_i hess psi_r^i
"""

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import DomainError, EvaluationFailed, NonFiniteMatrix


class Flavor(enum.Enum):
    VECTOR_PSI = "vector_psi"
    OBJECTIVE = "objective"


@dataclass(frozen=True)
class EstimatingModel:
    """Contributions to a system of ``p`` estimating equations.

    ``start`` is an optional default starting value for the solvers and
    ``names`` optional parameter labels. ``analytic`` may hold a closed-form
    assembler ``analytic(theta, need_second) -> AdjustmentMatrices`` that
    ``assemble(..., method="analytic")`` uses instead of automatic
    differentiation.
    """

    flavor: Flavor
    p: int
    k: int
    contributions: Callable[[list, Any], Any]
    data: Any = None
    start: Optional[np.ndarray] = None
    names: Optional[tuple] = None
    analytic: Optional[Callable] = field(default=None, compare=False)
    description: str = ""

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("a model needs at least one parameter")
        if self.k < 1:
            raise ValueError("a model needs at least one contribution")

    @classmethod
    def from_per_contribution(cls, flavor, p, k, contribution, data=None, **kwargs):
        """Wrap an evaluator of a single contribution ``contribution(i, params, data)``."""

        def batched(params, data):
            outs = []
            for i in range(k):
                try:
                    outs.append(contribution(i, params, data))
                except DomainError as exc:
                    raise DomainError(str(exc), index=i) from exc
            if flavor is Flavor.OBJECTIVE:
                return _stack([ad.as_dual(o, p) for o in outs])
            return [_stack([ad.as_dual(o[r], p) for o in outs]) for r in range(p)]

        return cls(flavor=flavor, p=p, k=k, contributions=batched, data=data, **kwargs)

    def parameter_names(self):
        if self.names is not None:
            return list(self.names)
        return [f"theta{s + 1}" for s in range(self.p)]

    def evaluate(self, theta):
        """Contributions as duals at ``theta``; domain failures become ``EvaluationFailed``."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.p:
            raise ValueError(f"expected {self.p} parameters, got {theta.size}")
        params = ad.lift_params(theta)
        try:
            return self.contributions(params, self.data)
        except DomainError as exc:
            where = "" if exc.index is None else f" in contribution {exc.index}"
            raise EvaluationFailed(f"evaluation failed{where}: {exc}", index=exc.index) from exc


def _stack(duals):
    return ad.Dual2(
        np.array([np.asarray(d.value, dtype=float) for d in duals]),
        np.stack([np.asarray(d.grad, dtype=float) for d in duals]),
        np.stack([np.asarray(d.hess, dtype=float) for d in duals]),
    )


def _batch(d, k, p):
    """Broadcast a dual to exactly ``k`` contributions."""
    value = np.broadcast_to(np.asarray(d.value, dtype=float), (k,))
    return (
        value,
        np.broadcast_to(np.asarray(d.grad, dtype=float), (k, p)),
        np.broadcast_to(np.asarray(d.hess, dtype=float), (k, p, p)),
    )


@dataclass
class AdjustmentMatrices:
    """Quantities entering the empirical adjustment at ``theta``.

    ``d`` and ``u`` are ``None`` when second-order quantities were not
    requested. ``objective`` is the summed objective for objective models.
    """

    theta: np.ndarray
    psi_sum: np.ndarray
    j: np.ndarray
    e: np.ndarray
    d: Optional[list] = None
    u: Optional[list] = None
    objective: Optional[float] = None

    @property
    def p(self):
        return self.psi_sum.size


def _vector_parts(model, theta):
    psi = model.evaluate(theta)
    if len(psi) != model.p:
        raise ValueError(f"model returned {len(psi)} estimating functions, expected {model.p}")
    k, p = model.k, model.p
    values = np.empty((k, p))
    grads = np.empty((p, k, p))
    hesses = np.empty((p, p, p))
    for r, d in enumerate(psi):
        v, g, h = _batch(ad.as_dual(d, p), k, p)
        values[:, r] = v
        grads[r] = g
        hesses[r] = h.sum(axis=0)
    return values, grads, hesses


def _objective_hessian_sum(model, theta):
    out = ad.as_dual(model.evaluate(theta), model.p)
    _, _, h = _batch(out, model.k, model.p)
    return h.sum(axis=0)


def third_derivative_fd(model, theta, step=1e-5):
    """``u_r`` of an objective model by central differences of the AD Hessian."""
    theta = np.asarray(theta, dtype=float)
    p = model.p
    T = np.empty((p, p, p))
    for a in range(p):
        h = step * max(1.0, abs(theta[a]))
        up = theta.copy()
        down = theta.copy()
        up[a] += h
        down[a] -= h
        T[a] = (_objective_hessian_sum(model, up) - _objective_hessian_sum(model, down)) / (up[a] - down[a])
    # T[a, r, t] = d^3 l / d a d r d t; symmetrize over the differencing index
    u = []
    for r in range(p):
        ur = 0.5 * (T[:, r, :] + T[:, r, :].T)
        u.append(0.5 * (ur + ur.T))
    return u


def psi_sum(model, theta):
    """Value of the estimating function ``sum_i psi^i(theta)``."""
    theta = np.asarray(theta, dtype=float)
    if model.flavor is Flavor.VECTOR_PSI:
        psi = model.evaluate(theta)
        return np.array([_batch(ad.as_dual(d, model.p), model.k, model.p)[0].sum() for d in psi])
    out = ad.as_dual(model.evaluate(theta), model.p)
    _, g, _ = _batch(out, model.k, model.p)
    return g.sum(axis=0)


def objective_value(model, theta):
    out = ad.as_dual(model.evaluate(theta), model.p)
    v, _, _ = _batch(out, model.k, model.p)
    return float(np.sum(v))


def assemble(model, theta, need_second=True, method="ad"):
    """Assemble ``AdjustmentMatrices`` at ``theta``.

    ``method`` is ``"ad"`` (automatic differentiation, always available) or
    ``"analytic"`` (the model's closed-form assembler).
    """
    theta = np.asarray(theta, dtype=float).ravel().copy()
    if method == "analytic":
        if model.analytic is None:
            raise ValueError("model has no closed-form assembler")
        try:
            mats = model.analytic(theta, need_second)
        except DomainError as exc:
            raise EvaluationFailed(f"evaluation failed: {exc}", index=exc.index) from exc
    elif method == "ad":
        mats = _assemble_ad(model, theta, need_second)
    else:
        raise ValueError(f"unknown assembly method {method!r}")
    _check_finite(mats)
    return mats


def _assemble_ad(model, theta, need_second):
    p, k = model.p, model.k
    if model.flavor is Flavor.VECTOR_PSI:
        values, grads, hesses = _vector_parts(model, theta)
        j = -grads.sum(axis=1)
        e = values.T @ values
        mats = AdjustmentMatrices(theta=theta, psi_sum=values.sum(axis=0), j=j, e=e)
        if need_second:
            mats.d = [grads[r].T @ values for r in range(p)]
            mats.u = [0.5 * (hesses[r] + hesses[r].T) for r in range(p)]
        return mats

    out = ad.as_dual(model.evaluate(theta), p)
    v, g, h = _batch(out, k, p)
    hsum = h.sum(axis=0)
    j = -0.5 * (hsum + hsum.T)
    mats = AdjustmentMatrices(theta=theta, psi_sum=g.sum(axis=0), j=j, e=g.T @ g, objective=float(v.sum()))
    if need_second:
        # d_r[s, t] = sum_i hess_i[r, s] * psi_t^i
        mats.d = [h[:, r, :].T @ g for r in range(p)]
        mats.u = third_derivative_fd(model, theta)
    return mats


def _check_finite(mats):
    parts = [mats.psi_sum, mats.j, mats.e] + list(mats.d or []) + list(mats.u or [])
    for part in parts:
        if not np.all(np.isfinite(part)):
            raise NonFiniteMatrix(f"non-finite entries in assembled matrices at theta={mats.theta.tolist()}")
