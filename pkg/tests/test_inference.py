import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rbmest.errors import DomainError, FlavorMismatch
from rbmest.estimating import AdjustmentMatrices, assemble
from rbmest.inference import aic, chisq_sf, clic, criterion_weights, sandwich, score_pivot, tic, wald_pivot
from rbmest.models import GlmSpec, glm_model
from rbmest.solver import SolverConfig, solve_rbm

from conftest import probit_data


def test_ratio_sandwich(ratio3):
    v = sandwich(assemble(ratio3, [2.0]))
    assert v.vhat[0, 0] == pytest.approx(1.0 / 18.0, abs=1e-14)
    assert v.se[0] == pytest.approx(math.sqrt(1.0 / 18.0))


def test_zero_e_sandwich():
    mats = AdjustmentMatrices(theta=np.zeros(2), psi_sum=np.zeros(2), j=np.eye(2), e=np.zeros((2, 2)))
    assert np.array_equal(sandwich(mats).vhat, np.zeros((2, 2)))


def test_sandwich_matches_explicit_inverse():
    X, y = probit_data()
    model = glm_model(GlmSpec("binomial", "probit", X, y))
    mats = assemble(model, model.start, need_second=False)
    jinv = np.linalg.inv(mats.j)
    v = sandwich(mats).vhat
    assert np.allclose(v, jinv @ mats.e @ jinv.T, rtol=1e-10, atol=1e-14)
    assert np.array_equal(v, v.T)


def test_pivots_ratio(ratio3):
    theta_tilde = solve_rbm(ratio3, SolverConfig(epsilon=1e-13)).theta
    v = sandwich(assemble(ratio3, theta_tilde)).vhat
    e = 54 + 1.98**2 * 14 - 2 * 1.98 * 27
    assert v[0, 0] == pytest.approx(e / 36, rel=1e-10)
    assert wald_pivot(theta_tilde, [2.0], v) == pytest.approx(0.02**2 * 36 / e, rel=1e-8)
    assert wald_pivot(theta_tilde, [2.0], v) == pytest.approx(0.007326, abs=5e-7)
    assert wald_pivot(theta_tilde, theta_tilde, v) == 0.0
    assert score_pivot(ratio3, theta_tilde, theta_tilde) < 1e-20


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_wald_reparameterization_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    m = rng.normal(size=(3, 3))
    v = m @ m.T + np.eye(3)
    t1, t0 = rng.normal(size=3), rng.normal(size=3)
    w = wald_pivot(t1, t0, v)
    assert wald_pivot(a @ t1, a @ t0, a @ v @ a.T) == pytest.approx(w, rel=1e-9)


def test_chisq_sf():
    assert chisq_sf(0.0, 3) == 1.0
    assert chisq_sf(2 * math.log(2), 2) == pytest.approx(0.5, abs=1e-14)
    assert chisq_sf(3.841459, 1) == pytest.approx(0.05, abs=1e-4)
    for x, df in [(0.3, 1), (5.0, 4), (40.0, 7)]:
        assert chisq_sf(x, df) == pytest.approx(stats.chi2.sf(x, df), abs=1e-10)
    with pytest.raises(DomainError):
        chisq_sf(-1.0, 1)
    with pytest.raises(DomainError):
        chisq_sf(1.0, 0)


def test_tic_identity_and_clic():
    X, y = probit_data()
    model = glm_model(GlmSpec("binomial", "probit", X, y))
    theta = solve_rbm(model).theta
    t = tic(model, theta, "rbm")
    assert t.value == pytest.approx(-2 * t.objective_value + 2 * t.trace_penalty, abs=1e-12)
    assert -2 * t.larger_is_better == pytest.approx(t.value, abs=1e-12)
    c = clic(model, theta, "rbm")
    assert c.kind == "CLIC" and c.value == t.value
    assert t.as_dict()["at"] == "rbm"


def test_saturated_trace_equals_p():
    # y=(0,2) normal mean with unit dispersion at the mean: j = 2 = e, so the trace is 1
    model = glm_model(GlmSpec("normal", "identity", np.ones((2, 1)), [0.0, 2.0]))
    t = tic(model, [1.0])
    a = aic(model, [1.0])
    assert t.trace_penalty == pytest.approx(1.0)
    assert t.value == pytest.approx(a.value)


def test_aic_value():
    X, y = probit_data()
    model = glm_model(GlmSpec("binomial", "probit", X, y))
    a = aic(model, model.start, "m")
    assert a.larger_is_better == pytest.approx(a.objective_value - 3)
    assert a.value == pytest.approx(-2 * a.objective_value + 6)


def test_criteria_need_objective(ratio3):
    with pytest.raises(FlavorMismatch):
        tic(ratio3, [2.0])


def test_criterion_weights():
    assert np.array_equal(criterion_weights([5.0]), [1.0])
    w = criterion_weights([10.0, 12.0, 10.0])
    assert w.sum() == pytest.approx(1.0)
    assert w[0] == w[2]
    assert w[1] / w[0] == pytest.approx(math.exp(-1.0))
