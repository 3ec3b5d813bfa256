import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clrsens import estimators as E
from clrsens import model as M
from clrsens import oracle as O
from clrsens.integrators import em_step, it2_step, scheme_coefficients

PI = math.pi
COS = M.variant(M.cosine1d(), name="cosine1d-cos", observable=M.cos_observable,
                observable_grad=M.cos_observable_grad)


def test_em_hand_value():
    x, h, dw = 0.25, 0.1, 0.05
    expect = (x + PI * 0.1 + math.sqrt(2) * dw) % 1.0
    assert em_step(M.cosine1d(), x, dw, h)[0] == pytest.approx(expect, abs=1e-14)


def test_it2_hand_value():
    x, h, dw = 0.25, 0.1, 0.05
    b = PI * math.sin(2 * PI * x)
    b1 = 2 * PI**2 * math.cos(2 * PI * x)
    b2 = -4 * PI**3 * math.sin(2 * PI * x)
    s = math.sqrt(2)
    expect = x + b * h + s * dw + 0.5 * (b1 * s) * h * dw + 0.5 * (b * b1 + 0.5 * s * s * b2) * h * h
    assert it2_step(M.cosine1d(), x, dw, h=h)[0] == pytest.approx(expect % 1.0, abs=1e-14)
    assert expect % 1.0 == pytest.approx(0.0147445, abs=1e-6)


def test_constant_coefficients_reduce_to_translation():
    p = M.const1d(c=0.7, sigma=1.0)
    for dw in (-0.3, 0.0, 0.2):
        expect = (0.4 + 0.7 * 0.05 + dw) % 1.0
        assert em_step(p, 0.4, dw, 0.05)[0] == pytest.approx(expect, abs=1e-15)
        assert it2_step(p, 0.4, dw, h=0.05)[0] == pytest.approx(expect, abs=1e-15)


def test_it2_multiplicative_against_formula():
    p = M.mult1d()
    x, h, dw = 0.37, 0.02, -0.11
    sc = scheme_coefficients(p, x)
    b, s, Kb, Lb = sc.b[0], sc.sigma[0, 0], sc.Kb[0, 0], sc.Lb[0]
    V = -h
    expect = (x + b * h + s * dw + 0.5 * (sc.Lsigma + Kb) * h * dw
              + 0.5 * sc.Ksigma * (dw * dw + V) + 0.5 * Lb * h * h)
    assert it2_step(p, x, dw, h=h)[0] == pytest.approx(expect % 1.0, abs=1e-14)


def test_scheme_coefficients_match_finite_differences():
    p, e = M.mult1d(), 1e-4
    s = lambda y: p.sigma_derivs(y)[0]
    b = lambda y: p.b(y)[0]
    for x in (0.05, 0.4, 0.81):
        sc = scheme_coefficients(p, x)
        ds = (s(x + e) - s(x - e)) / (2 * e)
        d2s = (s(x + e) - 2 * s(x) + s(x - e)) / e**2
        db = (b(x + e) - b(x - e)) / (2 * e)
        d2b = (b(x + e) - 2 * b(x) + b(x - e)) / e**2
        assert sc.Ksigma == pytest.approx(s(x) * ds, rel=1e-6)
        assert sc.Lsigma == pytest.approx(b(x) * ds + 0.5 * s(x) ** 2 * d2s, rel=1e-5, abs=1e-6)
        assert sc.Kb[0, 0] == pytest.approx(s(x) * db, rel=1e-6)
        assert sc.Lb[0] == pytest.approx(b(x) * db + 0.5 * s(x) ** 2 * d2b, rel=1e-5, abs=1e-5)


def test_two_dimensional_steps():
    p = M.cosine2d()
    x, dw, h = np.array([0.1, 0.7]), np.array([0.03, -0.02]), 0.01
    s = math.sqrt(2)
    e = em_step(p, x, dw, h)
    np.testing.assert_allclose(e, (x + p.b(x) * h + s * dw) % 1.0, atol=1e-15)
    # separable problem: each coordinate follows the 1D scheme
    one = it2_step(M.cosine1d(), x[0], dw[0], h=h)[0]
    two = it2_step(M.cosine1d(), x[1], dw[1], h=h)[0]
    np.testing.assert_allclose(it2_step(p, x, dw, h=h), [one, two], atol=1e-14)


def test_two_dimensional_constant_noise_ignores_V():
    p = M.cosine2d()
    x, dw, h = np.array([0.3, 0.9]), np.array([0.1, 0.05]), 0.02
    V = np.array([[-h, h], [-h, -h]])
    assert np.array_equal(it2_step(p, x, dw, V, h), it2_step(p, x, dw, -V, h))


def test_rejects_bad_inputs():
    p = M.cosine1d()
    with pytest.raises(ValueError):
        em_step(p, 0.1, 0.0, 0.0)
    with pytest.raises(ValueError):
        em_step(p, 0.1, float("nan"), 0.1)
    with pytest.raises(ValueError):
        em_step(p, [0.1, 0.2], 0.0, 0.1)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(-5, 5), dw=st.floats(-1, 1), h=st.floats(1e-4, 0.2))
def test_steps_stay_on_torus(x, dw, h):
    for p in (M.cosine1d(), M.mult1d()):
        for y in (em_step(p, x, dw, h), it2_step(p, x, dw, h=h)):
            assert 0.0 <= y[0] < 1.0


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0, 1, exclude_max=True), dw=st.floats(-0.5, 0.5), k=st.integers(-4, 4))
def test_steps_commute_with_integer_shifts(x, dw, k):
    p = M.mult1d()
    a, b = it2_step(p, x, dw, h=0.05)[0], it2_step(p, x + k, dw, h=0.05)[0]
    assert min(abs(a - b), 1 - abs(a - b)) <= 1e-11


def test_monte_carlo_matches_exact_chain():
    # expectations of the simulated scheme equal those of its transfer operator
    h, N, s = 0.05, 20, 200_000
    chain = O.DiscreteChain(COS, "it2", h)
    exact = chain.expectation(chain.nodal(COS.theta), N)
    ens = E.simulate(COS, "it2", E.WEIGHT_Z, h, 0, N, s, seed=3)
    v = ens.theta_end
    se = v.std(ddof=1) / math.sqrt(s)
    assert abs(v.mean() - exact) <= 4 * se


@pytest.fixture(scope="module")
def stationary_bias():
    mu = O.reference_solution(COS).mu_theta
    out = {}
    for scheme in ("em", "it2"):
        errs = []
        for h in (0.02, 0.01, 0.005):
            c = O.DiscreteChain(COS, scheme, h)
            errs.append(abs(c.mean(c.nodal(COS.theta)) - mu))
        out[scheme] = errs
    return out


def _slope(errs, hs=(0.02, 0.01, 0.005)):
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def test_em_stationary_bias_first_order(stationary_bias):
    assert 0.9 <= _slope(stationary_bias["em"]) <= 1.1


def test_it2_stationary_bias_second_order(stationary_bias):
    assert 1.8 <= _slope(stationary_bias["it2"]) <= 2.2
