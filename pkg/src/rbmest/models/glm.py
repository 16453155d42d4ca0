"""Generalized linear models as objective-flavor estimating models.

The log-likelihood contribution of observation ``i`` is::

    (m_i / phi) {y_i theta_i - kappa(theta_i) - c_1(y_i)} - a(-m_i / phi) / 2

written here through the fitted mean ``mu_i = h(x_i^T beta)``. With a known
dispersion only ``beta`` is estimated; with an unknown dispersion ``phi`` is
appended as the last parameter.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .. import autodiff as ad
from .. import numkit
from ..errors import InadmissibleSpec
from ..estimating import AdjustmentMatrices, EstimatingModel, Flavor, assemble
from .links import Link, check_mu, get_link, get_variance, working_quantities


class Family:
    name = ""
    variance = None
    fixed_dispersion = False

    def kernel(self, y, m, eta, link):
        """Dual ``y theta - kappa(theta) - c_1(y)`` as a function of ``eta``."""
        raise NotImplementedError

    def kernel_values(self, y, m, mu):
        raise NotImplementedError

    def a(self, u):
        """``a(u)`` and its first two derivatives, as arrays."""
        raise InadmissibleSpec(f"the {self.name} family has a fixed dispersion")

    def a_dual(self, u):
        raise InadmissibleSpec(f"the {self.name} family has a fixed dispersion")

    def extra(self, y):
        """Parameter-free part of the log-density not carried by ``c_1`` or ``a``."""
        return np.zeros_like(y)

    def check_response(self, y, m):
        pass

    def start_mu(self, y, m):
        return np.asarray(y, float).copy()


class Normal(Family):
    name = "normal"
    variance = get_variance("constant")

    def kernel(self, y, m, eta, link):
        r = link.mu(eta) * -1.0 + y
        return r * r * -0.5

    def kernel_values(self, y, m, mu):
        return -0.5 * (y - mu) ** 2

    def a(self, u):
        u = np.asarray(u, float)
        return np.log(2.0 * np.pi) - np.log(-u), -1.0 / u, 1.0 / (u * u)

    def a_dual(self, u):
        return ad.log(-u) * -1.0 + np.log(2.0 * np.pi)


class Binomial(Family):
    name = "binomial"
    variance = get_variance("mu(1-mu)")
    fixed_dispersion = True

    def kernel(self, y, m, eta, link):
        out = link.log_mu(eta) * y + link.log1m_mu(eta) * (1.0 - y)
        return out + _log_binom(m, y) / m

    def kernel_values(self, y, m, mu):
        return special.xlogy(y, mu) + special.xlog1py(1.0 - y, -mu) + _log_binom(m, y) / m

    def check_response(self, y, m):
        if np.any((y < 0) | (y > 1)):
            raise InadmissibleSpec("binomial responses must be proportions in [0, 1]")

    def start_mu(self, y, m):
        return (m * y + 0.5) / (m + 1.0)


class Poisson(Family):
    name = "poisson"
    variance = get_variance("mu")
    fixed_dispersion = True

    def kernel(self, y, m, eta, link):
        return link.log_mu(eta) * y - link.mu(eta) - special.gammaln(y + 1.0)

    def kernel_values(self, y, m, mu):
        return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)

    def check_response(self, y, m):
        if np.any(y < 0):
            raise InadmissibleSpec("poisson responses must be nonnegative")

    def start_mu(self, y, m):
        return y + 0.1


class Gamma(Family):
    name = "gamma"
    variance = get_variance("mu^2")

    def kernel(self, y, m, eta, link):
        return (link.mu(eta).reciprocal() * -y) - link.log_mu(eta) + np.log(y)

    def kernel_values(self, y, m, mu):
        return -y / mu - np.log(mu) + np.log(y)

    def a(self, u):
        u = np.asarray(u, float)
        nu = -u
        value = 2.0 * special.gammaln(nu) - 2.0 * nu * np.log(nu)
        first = 2.0 * (np.log(nu) + 1.0 - special.digamma(nu))
        second = 2.0 * special.polygamma(1, nu) + 2.0 / u
        return value, first, second

    def a_dual(self, u):
        nu = -u
        return (ad.lgamma(nu) - nu * ad.log(nu)) * 2.0

    def extra(self, y):
        return -np.log(y)

    def check_response(self, y, m):
        if np.any(y <= 0):
            raise InadmissibleSpec("gamma responses must be positive")


def _log_binom(m, y):
    my = m * y
    return special.gammaln(m + 1.0) - special.gammaln(my + 1.0) - special.gammaln(m - my + 1.0)


FAMILIES = {cls.name: cls for cls in (Normal, Binomial, Poisson, Gamma)}


def get_family(family):
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[str(family).lower()]()
    except KeyError:
        raise InadmissibleSpec(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class GlmSpec:
    """A GLM over in-memory data.

    ``dispersion`` is the known value of ``phi``, or ``None`` to estimate it.
    Binomial and Poisson always use ``phi = 1``.
    """

    family: object
    link: object
    X: np.ndarray
    y: np.ndarray
    weights: Optional[np.ndarray] = None
    dispersion: Optional[float] = 1.0
    names: Optional[tuple] = None

    def __post_init__(self):
        family = get_family(self.family)
        link = get_link(self.link)
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
        if self.dispersion is None and family.fixed_dispersion:
            raise InadmissibleSpec(f"the {family.name} family has a fixed dispersion")
        if self.dispersion is not None and not self.dispersion > 0:
            raise InadmissibleSpec("dispersion must be positive")
        family.check_response(y, m)
        for name, value in (("family", family), ("link", link), ("X", X), ("y", y), ("weights", m)):
            object.__setattr__(self, name, value)
        if self.dispersion is not None and family.fixed_dispersion:
            object.__setattr__(self, "dispersion", 1.0)

    @property
    def n(self):
        return self.y.size

    @property
    def n_beta(self):
        return self.X.shape[1]

    @property
    def unknown_dispersion(self):
        return self.dispersion is None


def _glm_contributions(params, spec):
    pb = spec.n_beta
    eta = ad.linear_predictor(spec.X, params[:pb])
    kernel = spec.family.kernel(spec.y, spec.weights, eta, spec.link)
    if not spec.unknown_dispersion:
        return kernel * (spec.weights / spec.dispersion)
    phi = params[pb]
    inv_phi = phi.reciprocal()
    scaled = kernel * spec.weights * inv_phi
    u = inv_phi * -spec.weights
    return scaled - spec.family.a_dual(u) * 0.5 + spec.family.extra(spec.y)


def start_values(spec):
    mu0 = spec.family.start_mu(spec.y, spec.weights)
    if spec.link.name == "log":
        mu0 = np.maximum(mu0, 1e-3)
    eta0 = spec.link.linkfun(mu0)
    beta0, *_ = np.linalg.lstsq(spec.X * np.sqrt(spec.weights)[:, None], eta0 * np.sqrt(spec.weights), rcond=None)
    if not spec.unknown_dispersion:
        return beta0
    mu = spec.link.derivs(spec.X @ beta0)[0]
    v = spec.family.variance(mu)
    phi0 = max(float(np.mean(spec.weights * (spec.y - mu) ** 2 / v)), 1e-3)
    return np.append(beta0, phi0)


def loglik_values(spec, theta):
    """Per-observation log-likelihood contributions as a plain array."""
    theta = np.asarray(theta, float)
    pb = spec.n_beta
    eta = spec.X @ theta[:pb]
    mu = spec.link.derivs(eta)[0]
    check_mu(spec.link, spec.family.name, mu)
    kern = spec.family.kernel_values(spec.y, spec.weights, mu)
    if not spec.unknown_dispersion:
        return spec.weights * kern / spec.dispersion
    phi = theta[pb]
    a_val = spec.family.a(-spec.weights / phi)[0]
    return spec.weights * kern / phi - 0.5 * a_val + spec.family.extra(spec.y)


def glm_appendix_matrices(spec, beta, phi=None):
    """Closed-form ``j`` and ``e`` of a GLM.

    With a known dispersion (or ``phi`` given for a fixed-dispersion family)
    only the ``(beta, beta)`` blocks are returned; otherwise the blocks for
    ``(beta, phi)``.
    """
    beta = np.asarray(beta, float)
    X, y, m = spec.X, spec.y, spec.weights
    eta = X @ beta
    joint = spec.unknown_dispersion
    if phi is None:
        if joint:
            raise ValueError("phi is required when the dispersion is unknown")
        phi = spec.dispersion
    wq = working_quantities(spec.link, spec.family.variance, eta, y, m)
    j_bb = X.T @ (wq.q[:, None] * X) / phi
    e_bb = X.T @ ((wq.gt**2)[:, None] * X) / phi**2
    if not joint:
        return j_bb, e_bb
    kern = spec.family.kernel_values(y, m, wq.mu)
    r_dev = -2.0 * m * kern
    _, a1, a2 = spec.family.a(-m / phi)
    a1_i = m * a1
    a2_i = m * m * a2
    ra = r_dev - a1_i
    j_bphi = X.T @ wq.gt / phi**2
    j_phiphi = np.sum(ra) / phi**3 + np.sum(a2_i) / (2.0 * phi**4)
    e_bphi = X.T @ (wq.gt * ra) / (2.0 * phi**3)
    e_phiphi = np.sum(ra**2) / (4.0 * phi**4)
    j = np.block([[j_bb, j_bphi[:, None]], [j_bphi[None, :], np.array([[j_phiphi]])]])
    e = np.block([[e_bb, e_bphi[:, None]], [e_bphi[None, :], np.array([[e_phiphi]])]])
    return j, e


def hat_s(spec, beta):
    """Diagonal ``s_i`` of ``X (X^T Q X)^{-1} X^T W~``."""
    X = spec.X
    wq = working_quantities(spec.link, spec.family.variance, X @ np.asarray(beta, float), spec.y, spec.weights)
    fac = numkit.lu_factor(X.T @ (wq.q[:, None] * X))
    lev = np.einsum("is,si->i", X, numkit.solve(fac, X.T))
    return lev * wq.gt, wq


def penalized_loglik(spec, beta):
    """Bias-reducing penalized log-likelihood for a known dispersion::

        (1/phi) sum_i m_i {y_i theta_i - kappa(theta_i) - s_i (d_i / v_i)(y_i - mu_i) / 2}

    (the normalizing terms ``c_1`` are kept so values match ``l - trace/2``).
    """
    if spec.unknown_dispersion:
        raise InadmissibleSpec("the closed-form penalized log-likelihood needs a known dispersion")
    s, wq = hat_s(spec, beta)
    check_mu(spec.link, spec.family.name, wq.mu)
    kern = spec.family.kernel_values(spec.y, spec.weights, wq.mu)
    m = spec.weights
    return float(np.sum(m * (kern - 0.5 * s * wq.d / wq.v * wq.resid))) / spec.dispersion


def _analytic(spec):
    from .quasi import quasi_blocks

    def assembler(theta, need_second):
        theta = np.asarray(theta, float)
        if spec.unknown_dispersion:
            if need_second:
                return assemble(glm_model(spec, analytic=False), theta, need_second=True)
            j, e = glm_appendix_matrices(spec, theta[:-1], theta[-1])
            g = _ad_free_score(spec, theta)
            return AdjustmentMatrices(theta=theta, psi_sum=g, j=j, e=e,
                                      objective=float(np.sum(loglik_values(spec, theta))))
        eta = spec.X @ theta
        wq = working_quantities(spec.link, spec.family.variance, eta, spec.y, spec.weights)
        check_mu(spec.link, spec.family.name, wq.mu)
        mats = quasi_blocks(spec.X, wq, spec.dispersion, joint=False, need_second=need_second)
        mats.theta = theta
        mats.objective = float(np.sum(loglik_values(spec, theta)))
        return mats

    return assembler


def _ad_free_score(spec, theta):
    pb = spec.n_beta
    phi = theta[pb]
    m = spec.weights
    wq = working_quantities(spec.link, spec.family.variance, spec.X @ theta[:pb], spec.y, m)
    r_dev = -2.0 * m * spec.family.kernel_values(spec.y, m, wq.mu)
    a1_i = m * spec.family.a(-m / phi)[1]
    return np.append(spec.X.T @ wq.gt / phi, np.sum(r_dev - a1_i) / (2.0 * phi**2))


def glm_model(spec, analytic=True):
    names = spec.names or tuple(f"beta{s + 1}" for s in range(spec.n_beta))
    if spec.unknown_dispersion:
        names = tuple(names) + ("phi",)
    p = spec.n_beta + (1 if spec.unknown_dispersion else 0)
    return EstimatingModel(
        flavor=Flavor.OBJECTIVE,
        p=p,
        k=spec.n,
        contributions=_glm_contributions,
        data=spec,
        start=start_values(spec),
        names=tuple(names),
        analytic=_analytic(spec) if analytic else None,
        description=f"{spec.family.name} GLM with {spec.link.name} link",
    )


__all__ = ["GlmSpec", "Family", "Link", "get_family", "glm_model", "glm_appendix_matrices",
           "penalized_loglik", "hat_s", "loglik_values", "start_values"]
