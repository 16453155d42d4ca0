"""Newton-type solvers for M-estimation and reduced-bias M-estimation.

All iterations share the update ``theta <- theta + a * j(theta)^{-1} g(theta)``
where ``g`` is the (adjusted) estimating function and ``a`` is halved until
the L1 norm of ``g`` decreases. Non-convergence is reported through
``FitResult.converged`` rather than raised, so that simulation studies can
count failures.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import numkit
from .adjustment import empirical_adjustment, logdet_penalty, trace_penalty
from .errors import EvaluationFailed, FlavorMismatch, NonFiniteMatrix, RBMError, SingularMatrix
from .estimating import Flavor, assemble

log = logging.getLogger(__name__)

FROM_M_ESTIMATE = "from_m_estimate"


class EstimatorKind(enum.Enum):
    M_ESTIMATE = "m"
    RBM = "rbm"
    ONE_STEP = "onestep"
    PENALIZED_MAX = "penalized"
    LOGDET_PENALIZED_MAX = "logdet-penalized"


class PenaltyVariant(enum.Enum):
    TRACE = "trace"
    LOGDET = "logdet"
    NONE = "none"


@dataclass
class SolverConfig:
    max_iter: int = 200
    epsilon: float = 1e-8
    max_halvings: int = 20
    start: Union[None, str, np.ndarray] = FROM_M_ESTIMATE
    stop: str = "residual"  # or "step"
    method: str = "ad"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be nonnegative")
        if self.stop not in ("residual", "step"):
            raise ValueError("stop must be 'residual' or 'step'")
        if self.start is not None and not isinstance(self.start, str):
            self.start = np.asarray(self.start, dtype=float).ravel()


@dataclass
class IterationRecord:
    theta: np.ndarray
    residual: float
    step: float


@dataclass
class FitResult:
    kind: EstimatorKind
    theta: np.ndarray
    converged: bool
    iterations: int
    residual: float
    trace: list = field(default_factory=list)
    message: str = ""
    objective: Optional[float] = None

    def as_dict(self):
        return {
            "kind": self.kind.value,
            "theta": [float(t) for t in self.theta],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "message": self.message,
        }


def _resolve_start(model, cfg):
    if isinstance(cfg.start, np.ndarray):
        if cfg.start.size != model.p:
            raise ValueError(f"start has {cfg.start.size} entries, model has {model.p} parameters")
        return cfg.start.copy()
    if model.start is not None:
        return np.asarray(model.start, dtype=float).copy()
    return np.zeros(model.p)


def _l1(x):
    return float(np.sum(np.abs(x)))


def _newton_loop(kind, theta, evaluate, cfg):
    """Shared step-halving loop. ``evaluate(theta) -> (g, j)``."""
    g, j = evaluate(theta)
    residual = _l1(g)
    trace = [IterationRecord(theta.copy(), residual, 0.0)]
    best = (residual, theta.copy())
    if cfg.stop == "residual" and residual < cfg.epsilon:
        return FitResult(kind, theta, True, 0, residual, trace)
    for it in range(1, cfg.max_iter + 1):
        fac = numkit.lu_factor(j)
        direction = numkit.solve(fac, g)
        a = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            candidate = theta + a * direction
            try:
                g_new, j_new = evaluate(candidate)
                r_new = _l1(g_new)
            except (EvaluationFailed, NonFiniteMatrix):
                r_new = np.inf
            if np.isfinite(r_new) and r_new < residual:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            msg = f"step-halving failed to reduce the residual at iteration {it}"
            log.debug(msg)
            return FitResult(kind, best[1], False, it, best[0], trace, msg)
        step_size = _l1(candidate - theta) / a
        theta, g, j, residual = candidate, g_new, j_new, r_new
        trace.append(IterationRecord(theta.copy(), residual, a))
        if residual < best[0]:
            best = (residual, theta.copy())
        done = residual < cfg.epsilon if cfg.stop == "residual" else step_size < cfg.epsilon
        if done:
            return FitResult(kind, theta, True, it, residual, trace)
    return FitResult(kind, best[1], False, cfg.max_iter, best[0], trace, "maximum number of iterations reached")


def solve_m(model, cfg=None):
    """Solve ``sum_i psi^i(theta) = 0`` by Newton-Raphson with step halving."""
    cfg = cfg or SolverConfig()
    theta = _resolve_start(model, cfg)

    def evaluate(t):
        mats = assemble(model, t, need_second=False, method=cfg.method)
        return mats.psi_sum, mats.j

    return _newton_loop(EstimatorKind.M_ESTIMATE, theta, evaluate, cfg)


def solve_rbm(model, cfg=None):
    """Solve the adjusted equations ``sum_i psi^i + A = 0`` by quasi Newton-Raphson.

    The iteration matrix is ``j(theta)``, not the derivative of the adjusted
    function, so convergence is first order. With the default start the
    M-estimate is computed first; if that fails the model's own start is used.
    """
    cfg = cfg or SolverConfig()
    if isinstance(cfg.start, str) and cfg.start == FROM_M_ESTIMATE:
        try:
            m_fit = solve_m(model, cfg)
            theta = m_fit.theta if m_fit.converged else _resolve_start(model, cfg)
        except (SingularMatrix, EvaluationFailed, NonFiniteMatrix):
            theta = _resolve_start(model, cfg)
    else:
        theta = _resolve_start(model, cfg)

    def evaluate(t):
        mats = assemble(model, t, need_second=True, method=cfg.method)
        return mats.psi_sum + empirical_adjustment(mats), mats.j

    return _newton_loop(EstimatorKind.RBM, theta, evaluate, cfg)


def one_step_fit(model, cfg=None):
    """One-step estimator started at the M-estimate, as a ``FitResult``."""
    cfg = cfg or SolverConfig()
    m_fit = solve_m(model, cfg)
    mats = assemble(model, m_fit.theta, need_second=True, method=cfg.method)
    fac = numkit.lu_factor(mats.j)
    theta = m_fit.theta + numkit.solve(fac, empirical_adjustment(mats, fac))
    # the reported residual is that of the M-estimate the step started from
    msg = "" if m_fit.converged else "M-estimate did not converge"
    return FitResult(EstimatorKind.ONE_STEP, theta, m_fit.converged, 1, m_fit.residual,
                     m_fit.trace + [IterationRecord(theta.copy(), m_fit.residual, 1.0)], msg)


def _penalty_fn(variant):
    if variant is PenaltyVariant.TRACE:
        return lambda mats: -0.5 * trace_penalty(mats)
    if variant is PenaltyVariant.LOGDET:
        return logdet_penalty
    return lambda mats: 0.0


def maximize_penalized(model, cfg=None, variant=PenaltyVariant.TRACE):
    """Maximize ``l + penalty`` for an objective-flavor model.

    The ascent direction is ``j^{-1} grad``, where ``grad`` is the exact AD
    gradient of ``l`` plus a central-difference gradient of the penalty.
    Converged when ``max|grad| < epsilon * max(1, |objective|)``.
    """
    if model.flavor is not Flavor.OBJECTIVE:
        raise FlavorMismatch("penalized maximization needs an objective-flavor model")
    cfg = cfg or SolverConfig()
    variant = PenaltyVariant(variant)
    kind = {
        PenaltyVariant.TRACE: EstimatorKind.PENALIZED_MAX,
        PenaltyVariant.LOGDET: EstimatorKind.LOGDET_PENALIZED_MAX,
        PenaltyVariant.NONE: EstimatorKind.M_ESTIMATE,
    }[variant]
    penalty = _penalty_fn(variant)
    theta = _resolve_start(model, cfg)
    if isinstance(cfg.start, str) and cfg.start == FROM_M_ESTIMATE and variant is not PenaltyVariant.NONE:
        try:
            m_fit = solve_m(model, cfg)
            if m_fit.converged:
                theta = m_fit.theta
        except RBMError:
            pass

    def penalty_at(t):
        return penalty(assemble(model, t, need_second=False, method=cfg.method))

    def state(t):
        mats = assemble(model, t, need_second=False, method=cfg.method)
        value = mats.objective + penalty(mats)
        grad = mats.psi_sum.copy()
        if variant is not PenaltyVariant.NONE:
            grad += numkit.finite_diff_jacobian(penalty_at, t)[0]
        return value, grad, mats.j

    def trial_value(t):
        try:
            return penalty_at(t) + assemble(model, t, need_second=False, method=cfg.method).objective
        except RBMError:
            return -np.inf

    value, grad, j = state(theta)
    gnorm = float(np.max(np.abs(grad)))
    trace = [IterationRecord(theta.copy(), gnorm, 0.0)]
    if gnorm < cfg.epsilon * max(1.0, abs(value)):
        return FitResult(kind, theta, True, 0, gnorm, trace, objective=value)
    for it in range(1, cfg.max_iter + 1):
        try:
            direction = numkit.solve(numkit.lu_factor(j), grad)
        except SingularMatrix:
            direction = grad.copy()
        slope = float(grad @ direction)
        if not slope > 0:
            direction = grad.copy()
            slope = float(grad @ grad)
        a = 1.0
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            candidate = theta + a * direction
            new_value = trial_value(candidate)
            if new_value > value + 1e-4 * a * slope:
                accepted = state(candidate)
                break
            if a == 1.0 and abs(new_value - value) <= 1e-10 * max(1.0, abs(value)):
                # objective flat to rounding: accept if the gradient shrinks
                try:
                    cand_state = state(candidate)
                except RBMError:
                    cand_state = None
                if cand_state is not None and np.max(np.abs(cand_state[1])) < gnorm:
                    accepted = cand_state
                    break
            a *= 0.5
        if accepted is None:
            msg = f"line search failed at iteration {it}"
            return FitResult(kind, theta, False, it, gnorm, trace, msg, objective=value)
        theta = candidate
        value, grad, j = accepted
        gnorm = float(np.max(np.abs(grad)))
        trace.append(IterationRecord(theta.copy(), gnorm, a))
        if gnorm < cfg.epsilon * max(1.0, abs(value)):
            return FitResult(kind, theta, True, it, gnorm, trace, objective=value)
    return FitResult(kind, theta, False, cfg.max_iter, gnorm, trace,
                     "maximum number of iterations reached", objective=value)


def fit(model, estimator, cfg=None):
    """Dispatch on an estimator name or ``EstimatorKind``."""
    kind = EstimatorKind(estimator)
    if kind is EstimatorKind.M_ESTIMATE:
        return solve_m(model, cfg)
    if kind is EstimatorKind.RBM:
        return solve_rbm(model, cfg)
    if kind is EstimatorKind.ONE_STEP:
        return one_step_fit(model, cfg)
    if kind is EstimatorKind.PENALIZED_MAX:
        return maximize_penalized(model, cfg, PenaltyVariant.TRACE)
    return maximize_penalized(model, cfg, PenaltyVariant.LOGDET)
