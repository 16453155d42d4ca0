"""Link functions and variance functions.

Each link gives the mean ``mu = h(eta)`` both for duals and for plain arrays,
and the derivatives ``d = h'``, ``d' = h''`` and ``d'' = h'''`` in closed form.
Variance functions give ``v(mu)`` and its first two derivatives in ``mu``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from .. import autodiff as ad
from ..errors import InadmissibleSpec, LinkDomainError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Link:
    name = ""

    def mu(self, eta):
        raise NotImplementedError

    def derivs(self, eta):
        """``(mu, d, d', d'')`` as arrays."""
        raise NotImplementedError

    def log_mu(self, eta):
        return ad.log(self.mu(eta))

    def log1m_mu(self, eta):
        return ad.log1p(-self.mu(eta))

    def linkfun(self, mu):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class IdentityLink(Link):
    name = "identity"

    def mu(self, eta):
        return eta

    def derivs(self, eta):
        eta = np.asarray(eta, float)
        one = np.ones_like(eta)
        return eta, one, np.zeros_like(eta), np.zeros_like(eta)

    def linkfun(self, mu):
        return np.asarray(mu, float)


class LogLink(Link):
    name = "log"

    def mu(self, eta):
        return ad.exp(eta)

    def log_mu(self, eta):
        return eta

    def derivs(self, eta):
        m = np.exp(np.asarray(eta, float))
        return m, m, m, m

    def linkfun(self, mu):
        return np.log(mu)


class LogitLink(Link):
    name = "logit"

    def mu(self, eta):
        if isinstance(eta, ad.Dual2):
            return ad.exp(ad.log_expit(eta))
        return special.expit(eta)

    def log_mu(self, eta):
        return ad.log_expit(eta)

    def log1m_mu(self, eta):
        return ad.log_expit(-eta)

    def derivs(self, eta):
        m = special.expit(np.asarray(eta, float))
        d = m * (1.0 - m)
        d1 = d * (1.0 - 2.0 * m)
        d2 = d * (1.0 - 2.0 * m) ** 2 - 2.0 * d * d
        return m, d, d1, d2

    def linkfun(self, mu):
        return special.logit(mu)


class ProbitLink(Link):
    name = "probit"

    def mu(self, eta):
        return ad.normal_cdf(eta)

    def log_mu(self, eta):
        return ad.log_normal_cdf(eta)

    def log1m_mu(self, eta):
        return ad.log_normal_cdf(-eta)

    def derivs(self, eta):
        eta = np.asarray(eta, float)
        phi = _INV_SQRT_2PI * np.exp(-0.5 * eta * eta)
        return special.ndtr(eta), phi, -eta * phi, (eta * eta - 1.0) * phi

    def linkfun(self, mu):
        return special.ndtri(mu)


LINKS = {cls.name: cls for cls in (IdentityLink, LogLink, LogitLink, ProbitLink)}


def get_link(link):
    if isinstance(link, Link):
        return link
    try:
        return LINKS[str(link).lower()]()
    except KeyError:
        raise InadmissibleSpec(f"unknown link {link!r}; choose from {sorted(LINKS)}") from None


@dataclass(frozen=True)
class VarianceFunction:
    """``v(mu) = c0 + c1 mu + c2 mu^2`` covers every built-in choice."""

    name: str
    c0: float
    c1: float
    c2: float

    def __call__(self, mu):
        return self.c0 + self.c1 * mu + self.c2 * mu * mu

    def dual(self, mu):
        return mu * mu * self.c2 + mu * self.c1 + self.c0

    def derivs(self, mu):
        mu = np.asarray(mu, float)
        v = self.c0 + self.c1 * mu + self.c2 * mu * mu
        return v, self.c1 + 2.0 * self.c2 * mu, np.full_like(mu, 2.0 * self.c2)


VARIANCES = {
    "constant": VarianceFunction("constant", 1.0, 0.0, 0.0),
    "mu": VarianceFunction("mu", 0.0, 1.0, 0.0),
    "mu^2": VarianceFunction("mu^2", 0.0, 0.0, 1.0),
    "mu(1-mu)": VarianceFunction("mu(1-mu)", 0.0, 1.0, -1.0),
}
_VARIANCE_ALIASES = {"1": "constant", "mu2": "mu^2", "mu_squared": "mu^2", "binomial": "mu(1-mu)"}


def get_variance(variance):
    if isinstance(variance, VarianceFunction):
        return variance
    key = str(variance).lower().replace(" ", "")
    key = _VARIANCE_ALIASES.get(key, key)
    try:
        return VARIANCES[key]
    except KeyError:
        raise InadmissibleSpec(f"unknown variance function {variance!r}; choose from {sorted(VARIANCES)}") from None


def check_mu(link, family_name, mu):
    """Raise ``LinkDomainError`` if fitted means leave the family's range."""
    mu = np.asarray(mu, float)
    if family_name == "binomial":
        bad = (mu <= 0.0) | (mu >= 1.0)
    elif family_name in ("poisson", "gamma"):
        bad = mu <= 0.0
    else:
        bad = ~np.isfinite(mu)
    if np.any(bad):
        raise LinkDomainError(f"{link.name} link gives fitted means outside the {family_name} range",
                              index=int(np.flatnonzero(bad)[0]))


@dataclass(frozen=True)
class WorkingQuantities:
    """Per-observation quantities used by the closed-form matrices.

    Derivatives marked with a prime are taken with respect to ``eta``.
    """

    mu: np.ndarray
    d: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    v: np.ndarray
    v1: np.ndarray  # dv/dmu
    v2: np.ndarray  # d2v/dmu2
    resid: np.ndarray
    b: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    q: np.ndarray
    q1: np.ndarray
    gt: np.ndarray
    c: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    f: np.ndarray
    k: np.ndarray
    s: np.ndarray


def working_quantities(link, variance, eta, y, m):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _working_quantities(link, variance, eta, y, m)


def _working_quantities(link, variance, eta, y, m):
    mu, d, d1, d2 = link.derivs(eta)
    v, v1, v2 = variance.derivs(mu)
    r = y - mu
    b = m * d / v
    b1 = m * (d1 / v - d * d * v1 / v**2)
    b2 = m * (d2 / v - 3.0 * d * d1 * v1 / v**2 - d**3 * v2 / v**2 + 2.0 * d**3 * v1**2 / v**3)
    q = b * d - b1 * r
    q1 = 2.0 * b1 * d + b * d1 - b2 * r
    c = m / v
    c1 = -m * v1 * d / v**2
    c2 = -m * (v2 * d * d / v**2 + v1 * d1 / v**2 - 2.0 * d * d * v1**2 / v**3)
    f = 2.0 * c * d * r - c1 * r * r
    k = c * r * r
    s = c2 * r * r - 4.0 * c1 * d * r - 2.0 * c * d1 * r + 2.0 * c * d * d
    return WorkingQuantities(mu, d, d1, d2, v, v1, v2, r, b, b1, b2, q, q1, b * r, c, c1, c2, f, k, s)
