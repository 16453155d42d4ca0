"""Second-order forward-mode automatic differentiation.

A :class:`Dual2` carries a value together with its gradient and Hessian with
respect to ``p`` seeded parameters. Values may be scalars or arrays: an array
value of shape ``batch`` carries a gradient of shape ``batch + (p,)`` and a
Hessian of shape ``batch + (p, p)``. This lets a model evaluate all of its
contributions in one pass while keeping per-contribution derivatives.

Elementary functions propagate derivatives through the chain rule using their
analytic first and second derivatives::

    value = f(x), grad = f'(x) dx, hess = f'(x) d2x + f''(x) dx dx^T
"""

import math

import numpy as np
from scipy import special

from .errors import DomainError, EmptyParameter, EvaluationFailed

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _first_bad(mask):
    mask = np.asarray(mask)
    if mask.ndim == 0:
        return None
    return int(np.flatnonzero(mask.ravel())[0])


class Dual2:
    """Value with gradient and Hessian channels."""

    __slots__ = ("value", "grad", "hess")
    __array_priority__ = 1000  # keep ndarray <op> Dual2 dispatching to Dual2

    def __init__(self, value, grad, hess):
        self.value = value
        self.grad = grad
        self.hess = hess

    @classmethod
    def constant(cls, value, p):
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (p,)), np.zeros(value.shape + (p, p)))

    @property
    def p(self):
        return self.grad.shape[-1]

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Dual2(value={self.value!r}, grad={self.grad!r}, hess={self.hess!r})"

    def __len__(self):
        return len(self.value)

    def __getitem__(self, idx):
        if isinstance(idx, tuple):
            raise IndexError("Dual2 supports indexing along the first batch axis only")
        return Dual2(self.value[idx], self.grad[idx], self.hess[idx])

    # -- arithmetic -------------------------------------------------------

    def _chain(self, f0, f1, f2):
        f1 = np.asarray(f1, dtype=float)
        f2 = np.asarray(f2, dtype=float)
        g = self.grad
        grad = f1[..., None] * g
        hess = f1[..., None, None] * self.hess + f2[..., None, None] * (g[..., :, None] * g[..., None, :])
        return Dual2(f0, grad, hess)

    def _scale(self, c):
        c = np.asarray(c, dtype=float)
        return Dual2(self.value * c, self.grad * c[..., None], self.hess * c[..., None, None])

    def __neg__(self):
        return Dual2(-self.value, -self.grad, -self.hess)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value + other.value, self.grad + other.grad, self.hess + other.hess)
        other = np.asarray(other, dtype=float)
        value = self.value + other
        shape = np.shape(value)
        return Dual2(
            value,
            np.broadcast_to(self.grad, shape + (self.p,)),
            np.broadcast_to(self.hess, shape + (self.p, self.p)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual2):
            a, b = self, other
            va = np.asarray(a.value)
            vb = np.asarray(b.value)
            grad = va[..., None] * b.grad + vb[..., None] * a.grad
            outer = a.grad[..., :, None] * b.grad[..., None, :]
            hess = (
                va[..., None, None] * b.hess
                + vb[..., None, None] * a.hess
                + (outer + np.swapaxes(outer, -1, -2))
            )
            return Dual2(va * vb, grad, hess)
        return self._scale(other)

    __rmul__ = __mul__

    def reciprocal(self):
        v = np.asarray(self.value, dtype=float)
        bad = v == 0.0
        if np.any(bad):
            raise DomainError("division by zero", index=_first_bad(bad))
        inv = 1.0 / v
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        bad = other == 0.0
        if np.any(bad):
            raise DomainError("division by zero", index=_first_bad(bad))
        return self._scale(1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, other):
        if isinstance(other, Dual2):
            return exp(other * log(self))
        c = float(other)
        v = np.asarray(self.value, dtype=float)
        if c == 2.0:
            return self * self
        if c != int(c):
            bad = v <= 0.0 if c < 1.0 else v < 0.0
            if np.any(bad):
                raise DomainError(f"non-integer power {c} of a negative value", index=_first_bad(bad))
        elif c < 0 and np.any(v == 0.0):
            raise DomainError("negative power of zero", index=_first_bad(v == 0.0))
        return self._chain(v**c, c * v ** (c - 1.0), c * (c - 1.0) * v ** (c - 2.0))

    def __rpow__(self, other):
        c = float(other)
        if c <= 0.0:
            raise DomainError("base of a dual exponent must be positive")
        return exp(self * math.log(c))


def lift_params(theta):
    """Seed each coordinate of ``theta`` with its own unit gradient."""
    theta = np.asarray(theta, dtype=float).ravel()
    p = theta.size
    if p == 0:
        raise EmptyParameter("parameter vector is empty")
    eye = np.eye(p)
    return [Dual2(np.float64(theta[s]), eye[s].copy(), np.zeros((p, p))) for s in range(p)]


def as_dual(x, p):
    return x if isinstance(x, Dual2) else Dual2.constant(x, p)


# -- elementary functions ----------------------------------------------------

def _value(x):
    return np.asarray(x.value, dtype=float)


def exp(x):
    if not isinstance(x, Dual2):
        return np.exp(x)
    ev = np.exp(_value(x))
    return x._chain(ev, ev, ev)


def log(x):
    if not isinstance(x, Dual2):
        return np.log(x)
    v = _value(x)
    bad = v <= 0.0
    if np.any(bad):
        raise DomainError("log of a nonpositive value", index=_first_bad(bad))
    inv = 1.0 / v
    return x._chain(np.log(v), inv, -inv * inv)


def log1p(x):
    if not isinstance(x, Dual2):
        return np.log1p(x)
    v = _value(x)
    bad = v <= -1.0
    if np.any(bad):
        raise DomainError("log1p of a value <= -1", index=_first_bad(bad))
    inv = 1.0 / (1.0 + v)
    return x._chain(np.log1p(v), inv, -inv * inv)


def sqrt(x):
    if not isinstance(x, Dual2):
        return np.sqrt(x)
    v = _value(x)
    bad = v <= 0.0
    if np.any(bad):
        raise DomainError("sqrt of a nonpositive value", index=_first_bad(bad))
    r = np.sqrt(v)
    return x._chain(r, 0.5 / r, -0.25 / (r * v))


def normal_pdf(x):
    if not isinstance(x, Dual2):
        return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))
    v = _value(x)
    phi = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return x._chain(phi, -v * phi, (v * v - 1.0) * phi)


def normal_cdf(x):
    # value from scipy's ndtr; derivatives analytic (Phi' = phi, phi' = -x phi)
    if not isinstance(x, Dual2):
        return special.ndtr(x)
    v = _value(x)
    phi = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return x._chain(special.ndtr(v), phi, -v * phi)


def log_normal_cdf(x):
    """``log(normal_cdf(x))``, stable far into the lower tail."""
    if not isinstance(x, Dual2):
        return special.log_ndtr(x)
    v = _value(x)
    logcdf = special.log_ndtr(v)
    mills = np.exp(-0.5 * v * v - 0.5 * math.log(2.0 * math.pi) - logcdf)
    return x._chain(logcdf, mills, -mills * (v + mills))


def log_expit(x):
    """``log(1 / (1 + exp(-x)))`` without overflow."""
    if not isinstance(x, Dual2):
        return -np.logaddexp(0.0, -np.asarray(x, dtype=float))
    v = _value(x)
    pos = special.expit(v)
    neg = special.expit(-v)
    return x._chain(-np.logaddexp(0.0, -v), neg, -pos * neg)


def lgamma(x):
    if not isinstance(x, Dual2):
        return special.gammaln(x)
    v = _value(x)
    bad = v <= 0.0
    if np.any(bad):
        raise DomainError("lgamma is only supported for positive values", index=_first_bad(bad))
    return x._chain(special.gammaln(v), special.digamma(v), special.polygamma(1, v))


def dual_sum(x):
    """Sum over the batch axes of a dual."""
    batch_axes = tuple(range(np.ndim(x.value)))
    return Dual2(
        np.sum(x.value, axis=batch_axes),
        np.sum(x.grad, axis=batch_axes),
        np.sum(x.hess, axis=batch_axes),
    )


def linear_predictor(X, coefs):
    """``X @ coefs`` for duals ``coefs``, built directly in one pass."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != len(coefs):
        raise ValueError(f"design has {X.shape[-1]} columns but {len(coefs)} coefficients were given")
    values = np.array([float(c.value) for c in coefs])
    grads = np.stack([c.grad for c in coefs])
    hesses = np.stack([c.hess for c in coefs])
    return Dual2(X @ values, X @ grads, np.tensordot(X, hesses, axes=(-1, 0)))


def eval_with_derivs(f, theta):
    """Evaluate a scalar function of lifted parameters.

    Returns ``(value, gradient, hessian)`` as floats and arrays.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    params = lift_params(theta)
    try:
        out = f(params)
    except DomainError as exc:
        raise EvaluationFailed(f"evaluation failed at theta={theta.tolist()}: {exc}", index=exc.index) from exc
    out = as_dual(out, theta.size)
    return float(out.value), np.array(out.grad, dtype=float), np.array(out.hess, dtype=float)
