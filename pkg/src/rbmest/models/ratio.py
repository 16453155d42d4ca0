"""Ratio of two means, ``theta = E(Y) / E(X)``, with ``psi^i = y_i - theta x_i``."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..errors import DegenerateData, EmptyData
from ..estimating import AdjustmentMatrices, EstimatingModel, Flavor


@dataclass(frozen=True)
class RatioData:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.size != y.size:
            raise ValueError("x and y must have the same length")
        if x.size == 0:
            raise EmptyData("ratio data needs at least one pair")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1])

    @property
    def n(self):
        return self.x.size

    @cached_property
    def s_x(self):
        return float(np.sum(self.x))

    @cached_property
    def s_y(self):
        return float(np.sum(self.y))

    @cached_property
    def s_xx(self):
        return float(np.dot(self.x, self.x))

    @cached_property
    def s_yy(self):
        return float(np.dot(self.y, self.y))

    @cached_property
    def s_xy(self):
        return float(np.dot(self.x, self.y))


def _psi(params, data):
    (theta,) = params
    return [theta * (-data.x) + data.y]


def ratio_closed_form_matrices(data, theta, need_second=True):
    """Closed-form ``j, e, d, u`` of the ratio estimating function."""
    t = float(np.ravel(theta)[0])
    mats = AdjustmentMatrices(
        theta=np.array([t]),
        psi_sum=np.array([data.s_y - t * data.s_x]),
        j=np.array([[data.s_x]]),
        e=np.array([[data.s_yy + t * t * data.s_xx - 2.0 * t * data.s_xy]]),
    )
    if need_second:
        mats.d = [np.array([[-data.s_xy + t * data.s_xx]])]
        mats.u = [np.zeros((1, 1))]
    return mats


def ratio_model(data):
    if not isinstance(data, RatioData):
        data = RatioData.from_pairs(data)
    start = np.array([data.s_y / data.s_x]) if data.s_x != 0 else np.array([data.s_xy / data.s_xx])
    return EstimatingModel(
        flavor=Flavor.VECTOR_PSI,
        p=1,
        k=data.n,
        contributions=_psi,
        data=data,
        start=start,
        names=("theta",),
        analytic=lambda theta, need_second: ratio_closed_form_matrices(data, theta, need_second),
        description="ratio of means",
    )


def ratio_m_estimate(data):
    if data.s_x == 0:
        raise DegenerateData("sum of x is zero; the M-estimator is undefined")
    return data.s_y / data.s_x


def ratio_rbm_estimate(data):
    if data.s_x == 0:
        # limit of the closed form as s_x -> 0
        if data.s_xx == 0:
            raise DegenerateData("all x are zero")
        return data.s_xy / data.s_xx
    denom = data.s_x + data.s_xx / data.s_x
    if denom == 0:
        raise DegenerateData("denominator of the reduced-bias estimator is zero")
    return (data.s_y + data.s_xy / data.s_x) / denom


def ratio_onestep(data):
    if data.s_x == 0:
        raise DegenerateData("sum of x is zero; the one-step estimator is undefined")
    sx2 = data.s_x**2
    return ratio_m_estimate(data) * (1.0 - data.s_xx / sx2) + data.s_xy / sx2


def ratio_jackknife(data):
    n = data.n
    if n < 2:
        raise DegenerateData("jackknife needs at least two pairs")
    loo_x = data.s_x - data.x
    if data.s_x == 0 or np.any(loo_x == 0):
        raise DegenerateData("a leave-one-out sum of x is zero")
    loo = (data.s_y - data.y) / loo_x
    return n * ratio_m_estimate(data) - (n - 1) / n * float(np.sum(loo))


def ratio_sandwich(data, theta):
    """Closed-form sandwich variance ``e(theta) / s_x^2``."""
    if data.s_x == 0:
        raise DegenerateData("sum of x is zero")
    return (data.s_yy + theta * theta * data.s_xx - 2.0 * theta * data.s_xy) / data.s_x**2
