"""Quasi-likelihood estimating equations with a mean-variance relationship.

For a link ``mu = h(eta)`` and variance function ``v(mu)``::

    psi_beta^i = m_i d_i (y_i - mu_i) x_i / (phi v_i)
    psi_phi^i  = m_i (y_i - mu_i)^2 / v_i - phi

The ``"moment"`` mode solves only the ``beta`` equations for a fixed ``phi``
(``phi`` can then be estimated by the moment estimator ``phi_moment``).
The ``"joint"`` mode solves the ``p + 1`` equations for ``(beta, phi)``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..errors import DomainError, InadmissibleSpec
from ..estimating import AdjustmentMatrices, EstimatingModel, Flavor
from .links import check_mu, get_link, get_variance, working_quantities

MODES = ("moment", "joint")


@dataclass(frozen=True)
class QuasiSpec:
    link: object
    variance: object
    X: np.ndarray
    y: np.ndarray
    weights: Optional[np.ndarray] = None
    mode: str = "joint"
    phi: float = 1.0
    names: Optional[tuple] = None

    def __post_init__(self):
        link = get_link(self.link)
        variance = get_variance(self.variance)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise InadmissibleSpec("design matrix and response have different numbers of rows")
        if y.size == 0:
            raise InadmissibleSpec("no observations")
        m = np.ones_like(y) if self.weights is None else np.asarray(self.weights, dtype=float).ravel()
        if m.shape != y.shape or np.any(m <= 0):
            raise InadmissibleSpec("weights must be positive and match the response")
        if self.mode not in MODES:
            raise InadmissibleSpec(f"mode must be one of {MODES}")
        if not self.phi > 0:
            raise InadmissibleSpec("phi must be positive")
        for name, value in (("link", link), ("variance", variance), ("X", X), ("y", y), ("weights", m)):
            object.__setattr__(self, name, value)

    @property
    def n(self):
        return self.y.size

    @property
    def n_beta(self):
        return self.X.shape[1]

    @property
    def joint(self):
        return self.mode == "joint"


def _family_range(variance):
    # the variance function implies the admissible range of the mean
    return {"mu(1-mu)": "binomial", "mu": "poisson", "mu^2": "gamma"}.get(variance.name, "normal")


def _quasi_psi(params, spec):
    pb = spec.n_beta
    eta = ad.linear_predictor(spec.X, params[:pb])
    mu = spec.link.mu(eta)
    check_mu(spec.link, _family_range(spec.variance), mu.value)
    d = ad.Dual2(*_mu_eta(spec.link, eta))
    v = spec.variance.dual(mu)
    resid = mu * -1.0 + spec.y
    weighted = d * resid * spec.weights / v
    phi = params[pb] if spec.joint else spec.phi
    if spec.joint and not phi.value > 0:
        raise DomainError("phi must be positive")
    inv_phi = phi.reciprocal() if spec.joint else 1.0 / phi
    out = [weighted * inv_phi * spec.X[:, s] for s in range(pb)]
    if spec.joint:
        out.append(resid * resid * spec.weights / v - phi)
    return out


def _mu_eta(link, eta):
    """``d = h'(eta)`` as a dual through the closed-form link derivatives."""
    _, d, d1, d2 = link.derivs(eta.value)
    grad = d1[:, None] * eta.grad
    hess = d2[:, None, None] * eta.grad[:, :, None] * eta.grad[:, None, :] + d1[:, None, None] * eta.hess
    return d, grad, hess


def start_values(spec, iterations=25):
    """Starting values from a few IRLS iterations on the ``beta`` equations."""
    y = spec.y
    name = spec.variance.name
    if name == "mu(1-mu)":
        mu0 = (spec.weights * y + 0.5) / (spec.weights + 1.0)
    elif name in ("mu", "mu^2"):
        mu0 = np.maximum(y, 0.0) + 0.1
    else:
        mu0 = y.copy()
    eta0 = spec.link.linkfun(mu0)
    sw = np.sqrt(spec.weights)
    beta, *_ = np.linalg.lstsq(spec.X * sw[:, None], eta0 * sw, rcond=None)
    beta = _irls(spec, beta, iterations)
    if not spec.joint:
        return beta
    return np.append(beta, max(phi_moment(spec, beta, spec.n), 1e-3))


def _irls(spec, beta, iterations):
    X = spec.X
    with np.errstate(all="ignore"):
        for _ in range(iterations):
            eta = X @ beta
            mu, d, _, _ = spec.link.derivs(eta)
            w = spec.weights * d * d / spec.variance(mu)
            z = eta + (spec.y - mu) / d
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(z)) and np.all(w > 0)):
                break
            sw = np.sqrt(w)
            new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
            if not np.all(np.isfinite(new)):
                break
            done = np.max(np.abs(new - beta)) < 1e-10 * (1.0 + np.max(np.abs(beta)))
            beta = new
            if done:
                break
    return beta


def phi_moment(spec, beta, R=None):
    """Moment estimator ``sum_i m_i (y_i - mu_i)^2 / v_i / R`` (``R = n - p`` by default)."""
    R = spec.n - spec.n_beta if R is None else R
    if R <= 0:
        raise InadmissibleSpec("the moment estimator of phi needs more observations than coefficients")
    mu = spec.link.derivs(spec.X @ np.asarray(beta, float)[: spec.n_beta])[0]
    return float(np.sum(spec.weights * (spec.y - mu) ** 2 / spec.variance(mu)) / R)


def quasi_blocks(X, wq, phi, joint, need_second=True):
    """Closed-form ``psi_sum, j, e, d_r, u_r`` from the working quantities.

    ``d_r`` follows ``d_r[s, t] = sum_i (d psi_r^i / d theta_s) psi_t^i``.
    """
    n, p = X.shape
    gt = wq.gt
    j_bb = X.T @ (wq.q[:, None] * X) / phi
    e_bb = X.T @ ((gt * gt)[:, None] * X) / phi**2
    score = X.T @ gt / phi
    if not joint:
        mats = AdjustmentMatrices(theta=None, psi_sum=score, j=j_bb, e=e_bb)
        if need_second:
            mats.d = [-(X.T @ ((wq.q * X[:, r] * gt)[:, None] * X)) / phi**2 for r in range(p)]
            mats.u = [-(X.T @ ((wq.q1 * X[:, r])[:, None] * X)) / phi for r in range(p)]
        return mats

    km = wq.k - phi
    P = p + 1
    psi_sum = np.append(score, km.sum())
    j = np.zeros((P, P))
    j[:p, :p] = j_bb
    j[:p, p] = X.T @ gt / phi**2
    j[p, :p] = wq.f @ X
    j[p, p] = n
    e = np.zeros((P, P))
    e[:p, :p] = e_bb
    e[:p, p] = e[p, :p] = X.T @ (gt * km) / phi
    e[p, p] = km @ km
    mats = AdjustmentMatrices(theta=None, psi_sum=psi_sum, j=j, e=e)
    if not need_second:
        return mats

    d, u = [], []
    for r in range(p):
        xr = X[:, r]
        dr = np.zeros((P, P))
        dr[:p, :p] = -(X.T @ ((wq.q * xr * gt)[:, None] * X)) / phi**2
        dr[:p, p] = -(X.T @ (wq.q * xr * km)) / phi
        dr[p, :p] = -((gt * gt * xr) @ X) / phi**3
        dr[p, p] = -np.sum(gt * xr * km) / phi**2
        d.append(dr)
        ur = np.zeros((P, P))
        ur[:p, :p] = -(X.T @ ((wq.q1 * xr)[:, None] * X)) / phi
        ur[:p, p] = ur[p, :p] = X.T @ (wq.q * xr) / phi**2
        ur[p, p] = 2.0 * np.sum(xr * gt) / phi**3
        u.append(ur)
    dl = np.zeros((P, P))
    dl[:p, :p] = -(X.T @ ((wq.f * gt)[:, None] * X)) / phi
    dl[:p, p] = -(X.T @ (wq.f * km))
    dl[p, :p] = -(gt @ X) / phi
    dl[p, p] = -km.sum()
    d.append(dl)
    ul = np.zeros((P, P))
    ul[:p, :p] = X.T @ (wq.s[:, None] * X)
    u.append(ul)
    mats.d, mats.u = d, u
    return mats


def quasi_appendix_matrices(spec, theta, need_second=True):
    theta = np.asarray(theta, float).ravel()
    pb = spec.n_beta
    phi = theta[pb] if spec.joint else spec.phi
    if not phi > 0:
        raise DomainError("phi must be positive")
    wq = working_quantities(spec.link, spec.variance, spec.X @ theta[:pb], spec.y, spec.weights)
    check_mu(spec.link, _family_range(spec.variance), wq.mu)
    mats = quasi_blocks(spec.X, wq, phi, spec.joint, need_second)
    mats.theta = theta
    return mats


def quasi_model(spec):
    names = spec.names or tuple(f"beta{s + 1}" for s in range(spec.n_beta))
    if spec.joint:
        names = tuple(names) + ("phi",)
    return EstimatingModel(
        flavor=Flavor.VECTOR_PSI,
        p=spec.n_beta + (1 if spec.joint else 0),
        k=spec.n,
        contributions=_quasi_psi,
        data=spec,
        start=start_values(spec),
        names=tuple(names),
        analytic=lambda theta, need_second: quasi_appendix_matrices(spec, theta, need_second),
        description=f"quasi-likelihood, {spec.link.name} link, variance {spec.variance.name}, {spec.mode}",
    )


__all__ = ["QuasiSpec", "quasi_model", "quasi_blocks", "quasi_appendix_matrices", "phi_moment", "start_values"]
