import numpy as np
import pytest

from rbmest import autodiff as ad
from rbmest.estimating import EstimatingModel, Flavor
from rbmest.models import GlmSpec, QuasiSpec, RatioData, glm_model, quasi_model, ratio_model

PAIRS = [(1.0, 3.0), (2.0, 3.0), (3.0, 6.0)]

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
EXACT_PAIRS = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]


@pytest.fixture
def ratio3():
    return ratio_model(RatioData.from_pairs(PAIRS))


def probit_data(n=60, seed=0, beta=(-0.5, 0.8, 0.5)):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.exponential(size=n)])
    from scipy.special import ndtr

    y = (rng.uniform(size=n) < ndtr(X @ np.asarray(beta))).astype(float)
    return X, y


def poisson_data(n=40, seed=1, beta=(0.5, 0.4)):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.poisson(np.exp(X @ np.asarray(beta))).astype(float)
    return X, y


def negbin_data(n=60, seed=2, beta=(1.0, 0.5), phi=3.0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.exponential(0.5, size=n)])
    mu = np.exp(X @ np.asarray(beta))
    r = mu / (phi - 1.0)
    y = rng.negative_binomial(r, 1.0 / phi).astype(float)
    return X, y


def builtin_specs(seed=0):
    """One instance of every built-in model kind with a representative parameter point."""
    rng = np.random.default_rng(seed)
    n = 12
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    x2 = np.column_stack([np.ones(n), rng.uniform(0.2, 1.0, size=n)])
    yb = rng.integers(0, 2, size=n).astype(float)
    yb[:2] = [0.0, 1.0]
    yc = rng.poisson(2.0, size=n).astype(float)
    yg = rng.gamma(2.0, 1.0, size=n)
    yn = rng.normal(1.0, 1.0, size=n)
    out = {
        "ratio": ratio_model(RatioData(rng.exponential(2.0, size=n) + 0.5, rng.normal(10.0, 1.0, size=n))),
        "glm-normal-identity": glm_model(GlmSpec("normal", "identity", X, yn)),
        "glm-normal-identity-phi": glm_model(GlmSpec("normal", "identity", X, yn, dispersion=None)),
        "glm-binomial-logit": glm_model(GlmSpec("binomial", "logit", X, yb)),
        "glm-binomial-probit": glm_model(GlmSpec("binomial", "probit", X, yb)),
        "glm-poisson-log": glm_model(GlmSpec("poisson", "log", X, yc)),
        "glm-gamma-log-phi": glm_model(GlmSpec("gamma", "log", x2, yg, dispersion=None)),
        "quasi-mu-log-moment": quasi_model(QuasiSpec("log", "mu", X, yc, mode="moment")),
        "quasi-mu-log-joint": quasi_model(QuasiSpec("log", "mu", X, yc, mode="joint")),
        "quasi-mu2-log-joint": quasi_model(QuasiSpec("log", "mu^2", x2, yg, mode="joint")),
        "quasi-binomial-probit-joint": quasi_model(QuasiSpec("probit", "mu(1-mu)", X, yb, mode="joint")),
        "quasi-const-identity-joint": quasi_model(QuasiSpec("identity", "constant", X, yn, mode="joint")),
    }
    return out


def random_theta(model, rng, scale=0.3):
    theta = np.asarray(model.start, float) + rng.normal(scale=scale, size=model.p)
    if model.names and model.names[-1] == "phi":
        theta[-1] = abs(model.start[-1]) * np.exp(rng.normal(scale=0.3))
    return theta


def toy_vector_model(k=7, seed=0):
    """A smooth two-parameter vector model with a non-symmetric ``j``."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=k)
    y = rng.normal(size=k)

    def psi(params, data):
        a, b = params
        x, y = data
        return [ad.exp(a * x) - y + b * 0.3, b * b * x * 0.5 + a * a * y - 0.1 + a * b]

    return EstimatingModel(Flavor.VECTOR_PSI, 2, k, psi, data=(x, y), start=np.array([0.1, 0.2]))
