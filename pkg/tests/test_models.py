
import numpy as np
import pytest
from scipy import optimize, special, stats

from rbmest.adjustment import penalized_objective
from rbmest.errors import DegenerateData, EmptyData, EvaluationFailed, InadmissibleSpec, LinkDomainError
from rbmest.estimating import assemble, psi_sum
from rbmest.models import (GlmSpec, QuasiSpec, RatioData, get_link, get_variance, glm_appendix_matrices,
                           glm_model, penalized_loglik, phi_moment, quasi_appendix_matrices, quasi_model,
                           ratio_jackknife, ratio_m_estimate, ratio_onestep, ratio_rbm_estimate,
                           working_quantities)
from rbmest.models.glm import loglik_values
from rbmest.solver import SolverConfig, maximize_penalized, solve_m, solve_rbm

from conftest import EXACT_PAIRS, PAIRS, negbin_data, poisson_data, probit_data


# -- ratio -------------------------------------------------------------------

def test_ratio_closed_forms():
    data = RatioData.from_pairs(PAIRS)
    assert (data.s_x, data.s_y, data.s_xx, data.s_yy, data.s_xy) == (6.0, 12.0, 14.0, 54.0, 27.0)
    assert ratio_m_estimate(data) == 2.0
    assert ratio_rbm_estimate(data) == pytest.approx(1.98, abs=1e-14)
    assert ratio_onestep(data) == pytest.approx(71 / 36, abs=1e-14)
    # leave-one-out ratios 9/5, 9/4, 6/3
    assert ratio_jackknife(data) == pytest.approx(3 * 2 - (2 / 3) * (1.8 + 2.25 + 2.0), abs=1e-14)
    assert ratio_jackknife(data) == pytest.approx(59 / 30, abs=1e-14)


def test_ratio_exact_proportionality():
    data = RatioData.from_pairs(EXACT_PAIRS)
    for est in (ratio_m_estimate, ratio_rbm_estimate, ratio_onestep, ratio_jackknife):
        assert est(data) == pytest.approx(2.0, abs=1e-14)


def test_ratio_single_pair():
    data = RatioData.from_pairs([(2.0, 5.0)])
    assert ratio_m_estimate(data) == 2.5
    with pytest.raises(DegenerateData):
        ratio_jackknife(data)


def test_ratio_sums_match_direct_summation():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=100), rng.normal(size=100)
    data = RatioData(x, y)
    assert data.s_xy == pytest.approx(sum(a * b for a, b in zip(x, y)), abs=1e-12)
    assert data.s_xx == pytest.approx(sum(a * a for a in x), abs=1e-12)


def test_ratio_empty():
    with pytest.raises(EmptyData):
        RatioData([], [])


# -- GLM ---------------------------------------------------------------------

def test_canonical_logit_q_equals_m_d():
    rng = np.random.default_rng(1)
    eta = rng.normal(size=10)
    m = rng.integers(1, 5, size=10).astype(float)
    y = rng.uniform(size=10)
    wq = working_quantities(get_link("logit"), get_variance("mu(1-mu)"), eta, y, m)
    assert np.allclose(wq.b, m, rtol=1e-12)
    assert np.allclose(wq.b1, 0.0, atol=1e-12)
    assert np.allclose(wq.q, m * wq.d, rtol=1e-12)


def test_normal_identity_unit_design():
    spec = GlmSpec("normal", "identity", np.eye(2), [0.3, -1.0])
    j, _ = glm_appendix_matrices(spec, [0.1, 0.2])
    assert np.array_equal(j, np.eye(2))


def test_zero_residuals_give_zero_e():
    X = np.column_stack([np.ones(4), [0.1, 0.5, -0.3, 1.0]])
    beta = np.array([0.2, 0.7])
    for family, link, dispersion in [("normal", "identity", None), ("gamma", "log", None), ("poisson", "log", 1.0)]:
        mu = get_link(link).derivs(X @ beta)[0]
        spec = GlmSpec(family, link, X, mu, dispersion=dispersion)
        if dispersion is None:
            _, e = glm_appendix_matrices(spec, beta, 1.3)
            assert np.allclose(e[:2, :2], 0.0) and np.allclose(e[:2, 2], 0.0)
        else:
            _, e = glm_appendix_matrices(spec, beta)
            assert np.allclose(e, 0.0)


GLM_CASES = [
    ("binomial", "logit", 1.0),
    ("binomial", "probit", 1.0),
    ("poisson", "log", 1.0),
    ("normal", "identity", 1.0),
    ("normal", "identity", None),
    ("normal", "log", None),
    ("gamma", "log", None),
    ("gamma", "identity", 2.0),
]


def glm_instance(family, link, dispersion, seed):
    rng = np.random.default_rng(seed)
    n = 15
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, size=n), rng.integers(0, 2, size=n)])
    if family == "binomial":
        m = rng.integers(1, 4, size=n).astype(float)
        y = rng.binomial(m.astype(int), 0.4) / m
    elif family == "poisson":
        m = None
        y = rng.poisson(2.0, size=n).astype(float)
    elif family == "gamma":
        m = rng.uniform(0.5, 2.0, size=n)
        y = rng.gamma(3.0, 1.0, size=n) + (5.0 if link == "identity" else 0.0)
    else:
        m = rng.uniform(0.5, 2.0, size=n)
        y = rng.normal(2.0, 1.0, size=n) + (3.0 if link == "log" else 0.0)
    return GlmSpec(family, link, X, y, weights=m, dispersion=dispersion)


@pytest.mark.parametrize("family,link,dispersion", GLM_CASES)
def test_glm_closed_forms_match_ad(family, link, dispersion):
    spec = glm_instance(family, link, dispersion, seed=3)
    model = glm_model(spec, analytic=False)
    rng = np.random.default_rng(4)
    for _ in range(20):
        beta = model.start[: spec.n_beta] + rng.normal(scale=0.1, size=spec.n_beta)
        if spec.unknown_dispersion:
            phi = float(np.exp(rng.normal(scale=0.5)))
            theta = np.append(beta, phi)
            j, e = glm_appendix_matrices(spec, beta, phi)
        else:
            theta = beta
            j, e = glm_appendix_matrices(spec, beta)
        mats = assemble(model, theta, need_second=False)
        for got, want in ((j, mats.j), (e, mats.e)):
            scale = max(1.0, np.max(np.abs(want)))
            assert np.max(np.abs(got - want)) <= 1e-7 * scale


@pytest.mark.parametrize("family,link,dispersion", GLM_CASES)
def test_glm_loglik_matches_scipy(family, link, dispersion):
    spec = glm_instance(family, link, dispersion, seed=5)
    theta = glm_model(spec).start
    if spec.unknown_dispersion:
        theta[-1] = 1.7
    beta = theta[: spec.n_beta]
    phi = theta[-1] if spec.unknown_dispersion else spec.dispersion
    mu = get_link(link).derivs(spec.X @ beta)[0]
    m = spec.weights
    if family == "binomial":
        want = stats.binom.logpmf(np.round(spec.y * m), m.astype(int), mu)
    elif family == "poisson":
        want = stats.poisson.logpmf(spec.y, mu)
    elif family == "normal":
        want = stats.norm.logpdf(spec.y, mu, np.sqrt(phi / m))
        if not spec.unknown_dispersion:
            # known dispersion drops the parameter-free -log(2 pi phi / m) / 2
            want = want + 0.5 * np.log(2 * np.pi * phi / m)
    else:
        shape = m / phi
        want = stats.gamma.logpdf(spec.y, shape, scale=mu / shape)
        if not spec.unknown_dispersion:
            want = shape * (np.log(spec.y) - spec.y / mu - np.log(mu))
    got = loglik_values(spec, theta)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10)


def test_glm_invalid_specs():
    X = np.ones((3, 1))
    with pytest.raises(InadmissibleSpec):
        GlmSpec("binomial", "logit", X, [0.0, 1.0, 2.0])
    with pytest.raises(InadmissibleSpec):
        GlmSpec("poisson", "log", X, [1.0, 2.0, 3.0], dispersion=None)
    with pytest.raises(InadmissibleSpec):
        GlmSpec("poisson", "log", X, [1.0, 2.0, 3.0], weights=[1.0, 0.0, 1.0])
    with pytest.raises(InadmissibleSpec):
        GlmSpec("weibull", "log", X, [1.0, 2.0, 3.0])
    with pytest.raises(InadmissibleSpec):
        GlmSpec("normal", "cloglog", X, [1.0, 2.0, 3.0])


def test_link_domain_error_in_fit():
    spec = GlmSpec("poisson", "identity", np.array([[1.0], [-1.0]]), [1.0, 2.0])
    model = glm_model(spec)
    with pytest.raises(EvaluationFailed):
        assemble(model, [0.5])
    with pytest.raises(LinkDomainError):
        loglik_values(spec, [0.5])


def bisect_root(f, lo, hi, tol=1e-13):
    flo = f(lo)
    assert flo * f(hi) < 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) * flo > 0:
            lo, flo = mid, f(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.mark.parametrize("y", [1.0, 3.0])
def test_poisson_single_observation_grid_oracle(y):
    def pen(b):
        mu = np.exp(b)
        return y * b - mu - 0.5 * (y - mu) ** 2 / mu

    def dpen(b, h=1e-6):
        return (pen(b + h) - pen(b - h)) / (2 * h)

    grid = np.linspace(-5, 5, 2001)
    i = int(np.argmax([pen(b) for b in grid]))
    oracle = bisect_root(dpen, grid[i - 1], grid[i + 1])
    model = glm_model(GlmSpec("poisson", "log", np.ones((1, 1)), [y]))
    # the objective also carries the constant -log(y!)
    assert penalized_objective(model, [0.3]) + special.gammaln(y + 1) == pytest.approx(pen(0.3), abs=1e-12)
    cfg = SolverConfig(epsilon=1e-12)
    assert solve_rbm(model, cfg).theta[0] == pytest.approx(oracle, abs=1e-8)
    assert maximize_penalized(model, cfg).theta[0] == pytest.approx(oracle, abs=1e-8)


def test_poisson_single_observation_y1_is_zero():
    # score 1 - 1.5 e^b + 0.5 e^-b vanishes at b = 0
    model = glm_model(GlmSpec("poisson", "log", np.ones((1, 1)), [1.0]))
    assert solve_rbm(model, SolverConfig(epsilon=1e-13)).theta[0] == pytest.approx(0.0, abs=1e-12)


def test_normal_intercept_rbm_is_mean():
    model = glm_model(GlmSpec("normal", "identity", np.ones((2, 1)), [0.0, 2.0]))
    assert solve_rbm(model).theta[0] == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(0)
    y = rng.normal(size=9)
    model = glm_model(GlmSpec("normal", "identity", np.ones((9, 1)), y))
    assert solve_rbm(model).theta[0] == pytest.approx(y.mean(), abs=1e-10)


@pytest.mark.parametrize("family,link", [("binomial", "probit"), ("binomial", "logit"), ("poisson", "log"),
                                         ("gamma", "log")])
def test_fast_path_penalized_loglik(family, link):
    spec = glm_instance(family, link, 1.0 if family != "gamma" else 0.5, seed=8)
    model = glm_model(spec)
    rng = np.random.default_rng(2)
    for _ in range(5):
        beta = model.start + rng.normal(scale=0.1, size=model.p)
        want = penalized_objective(model, beta)
        assert penalized_loglik(spec, beta) == pytest.approx(want, rel=1e-10, abs=1e-10)


def test_fast_path_maximizer_matches_rbm():
    X, y = probit_data(n=50)
    spec = GlmSpec("binomial", "probit", X, y)
    tilde = solve_rbm(glm_model(spec), SolverConfig(epsilon=1e-11)).theta
    res = optimize.minimize(lambda b: -penalized_loglik(spec, b), tilde + 0.05, method="BFGS",
                            options={"gtol": 1e-10})
    assert np.allclose(res.x, tilde, atol=1e-6)


def test_glm_unknown_dispersion_rbm_runs():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = rng.gamma(4.0, np.exp(0.5 + 0.3 * X[:, 1]) / 4.0)
    model = glm_model(GlmSpec("gamma", "log", X, y, dispersion=None))
    a = solve_rbm(model)
    b = solve_rbm(model, SolverConfig(method="analytic"))
    assert a.converged and b.converged
    assert np.allclose(a.theta, b.theta, atol=1e-8)
    assert a.theta[-1] > 0


# -- quasi -------------------------------------------------------------------

def quasi_instance(link, variance, mode, seed=0, n=6):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, size=n)])
    if variance == "mu(1-mu)":
        y = rng.integers(0, 2, size=n).astype(float)
        y[:2] = [0.0, 1.0]
    elif link == "probit":
        y = rng.uniform(0.1, 0.9, size=n)
    elif variance in ("mu", "mu^2"):
        y = rng.poisson(3.0, size=n).astype(float) + 0.5
    else:
        y = rng.normal(size=n)
    return QuasiSpec(link, variance, X, y, weights=rng.uniform(0.5, 2.0, size=n), mode=mode)


QUASI_CASES = [
    ("log", "mu"), ("log", "mu^2"), ("identity", "constant"), ("identity", "mu"),
    ("logit", "mu(1-mu)"), ("probit", "mu(1-mu)"), ("probit", "mu^2"),
]


@pytest.mark.parametrize("link,variance", QUASI_CASES)
@pytest.mark.parametrize("mode", ["joint", "moment"])
def test_quasi_closed_forms_match_ad(link, variance, mode):
    spec = quasi_instance(link, variance, mode)
    model = quasi_model(spec)
    rng = np.random.default_rng(6)
    for _ in range(20):
        theta = model.start + rng.normal(scale=0.05, size=model.p)
        if spec.joint:
            theta[-1] = float(np.exp(rng.normal(scale=0.5)))
        want = assemble(model, theta, method="ad")
        got = quasi_appendix_matrices(spec, theta)
        pairs = [(got.psi_sum, want.psi_sum), (got.j, want.j), (got.e, want.e)]
        pairs += list(zip(got.d, want.d)) + list(zip(got.u, want.u))
        for a, b in pairs:
            scale = max(1.0, np.max(np.abs(b)))
            assert np.max(np.abs(a - b)) <= 1e-7 * scale


def test_quasi_j_phiphi_is_n():
    spec = quasi_instance("log", "mu", "joint", n=9)
    mats = quasi_appendix_matrices(spec, [0.3, 0.1, 2.0])
    assert mats.j[-1, -1] == 9.0


def test_quasi_zero_residuals():
    n, phi = 5, 1.7
    X = np.column_stack([np.ones(n), np.linspace(-1, 1, n)])
    beta = np.array([0.5, 0.2])
    spec = QuasiSpec("log", "mu", X, np.exp(X @ beta), mode="joint")
    mats = quasi_appendix_matrices(spec, np.append(beta, phi))
    assert mats.e[-1, -1] == pytest.approx(n * phi**2)
    # d_{p+1}[phi, phi] = sum_i (d psi_phi / d phi) psi_phi = sum_i (-1)(-phi)
    assert mats.d[-1][-1, -1] == pytest.approx(n * phi)
    ad_mats = assemble(quasi_model(spec), np.append(beta, phi))
    assert ad_mats.d[-1][-1, -1] == pytest.approx(n * phi)
    assert phi_moment(spec, beta) == pytest.approx(0.0, abs=1e-28)
    assert phi_moment(spec, beta, R=n) == pytest.approx(0.0, abs=1e-28)


def test_quasi_poisson_score():
    X, y = poisson_data()
    beta = np.array([0.4, 0.25])
    q = quasi_model(QuasiSpec("log", "mu", X, y, mode="moment"))
    g = glm_model(GlmSpec("poisson", "log", X, y))
    assert np.allclose(psi_sum(q, beta), psi_sum(g, beta), rtol=1e-12, atol=1e-12)


def test_quasi_beta_estimate_invariant_to_phi():
    X, y = negbin_data()
    cfg = SolverConfig(epsilon=1e-12)
    fits = [solve_rbm(quasi_model(QuasiSpec("log", "mu", X, y, mode="moment", phi=phi)), cfg).theta
            for phi in (1.0, 4.0, 0.25)]
    assert np.allclose(fits[0], fits[1], atol=1e-9)
    assert np.allclose(fits[0], fits[2], atol=1e-9)


def test_quasi_joint_rbm_converges():
    X, y = negbin_data(n=80)
    model = quasi_model(QuasiSpec("log", "mu", X, y, mode="joint"))
    m = solve_m(model)
    r = solve_rbm(model)
    assert m.converged and r.converged
    # the joint M-estimate of phi divides by n, the moment estimator by n - p
    spec = model.data
    assert m.theta[-1] == pytest.approx(phi_moment(spec, m.theta[:2], R=spec.n), rel=1e-8)
    assert r.theta[-1] > m.theta[-1]


def test_quasi_invalid():
    X = np.ones((3, 1))
    with pytest.raises(InadmissibleSpec):
        QuasiSpec("log", "mu", X, [1.0, 2.0], mode="joint")
    with pytest.raises(InadmissibleSpec):
        QuasiSpec("log", "mu", X, [1.0, 2.0, 3.0], mode="other")
    with pytest.raises(InadmissibleSpec):
        QuasiSpec("log", "mu^3", X, [1.0, 2.0, 3.0])
    spec = QuasiSpec("log", "mu", X, [1.0, 2.0, 3.0], mode="joint")
    with pytest.raises(EvaluationFailed):
        assemble(quasi_model(spec), [0.1, -1.0])
