import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clrsens import model as M


@pytest.mark.parametrize("x,expect", [
    (0.0, 0.0), (1.0, 0.0), (2.5, 0.5), (-0.25, 0.75), (-1e-20, 0.0), (0.999, 0.999),
])
def test_torus_wrap_examples(x, expect):
    assert M.torus_wrap(x) == pytest.approx(expect, abs=1e-15)


@settings(deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_torus_wrap_range(x):
    y = float(M.torus_wrap(x))
    assert 0.0 <= y < 1.0
    assert abs(((x - y) + 0.5) % 1.0 - 0.5) <= 1e-9 * max(1.0, abs(x))


@settings(deadline=None)
@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_scalar_agrees_with_array_version(x):
    assert M.wrap_scalar(x) == float(M.torus_wrap(x))


@pytest.mark.parametrize("name", sorted(M.REGISTRY))
def test_registry_problems_validate(name):
    rep = M.validate_problem(M.get_problem(name))
    assert rep.ok, rep.failures


def test_unknown_problem():
    with pytest.raises(KeyError):
        M.get_problem("nope")


def test_benchmark_closed_forms():
    p = M.cosine1d()
    for x in (0.1, 0.25, 0.6):
        assert p.b(x)[0] == pytest.approx(math.pi * math.sin(2 * math.pi * x), abs=1e-14)
        assert p.theta(x) == pytest.approx(p.b(x)[0], abs=0)
        assert p.F(x)[0] == 1.0
        assert p.sigma(x)[0, 0] == pytest.approx(math.sqrt(2.0))


def test_degenerate_diffusion_fails_validation():
    zero, _ = M.constant_observable(0.0)
    p = M.variant(M.cosine1d(), diffusion=M.Scalar1D(zero, zero, zero))
    rep = M.validate_problem(p)
    assert not rep.ok
    assert any(c == "positive-definite" for c, _ in rep.failures)


def test_wrong_derivative_fails_validation():
    import numba as nb

    @nb.njit
    def bad_jac(x, out):
        out[0, 0] = -2.0 * math.pi**2 * math.cos(2 * math.pi * x[0])

    rep = M.validate_problem(M.variant(M.cosine1d(), drift_jac=bad_jac))
    assert {c for c, _ in rep.failures} == {"derivative"}
    assert any("drift_jac" in msg for _, msg in rep.failures)


def test_nonperiodic_field_fails_validation():
    import numba as nb

    @nb.njit
    def ramp(x):
        return x[0]

    @nb.njit
    def ramp_grad(x, out):
        out[0] = 1.0

    rep = M.validate_problem(M.variant(M.cosine1d(), observable=ramp, observable_grad=ramp_grad))
    assert any(c == "periodicity" for c, _ in rep.failures)


def test_singular_constant_diffusion_rejected():
    with pytest.raises(ValueError):
        M.ConstantMatrix(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        M.ConstantMatrix(np.ones((2, 3)))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        M.variant(M.cosine2d(), diffusion=M.cosine1d().diffusion)
    with pytest.raises(ValueError):
        M.variant(M.cosine1d(), diffusion=M.ConstantMatrix(np.eye(2)))


def test_variant_keeps_original():
    p = M.cosine1d()
    q = M.variant(p, forcing=M.zero_field)
    assert q.F(0.3)[0] == 0.0 and p.F(0.3)[0] == 1.0
    assert q.name != p.name


def test_sigma_derivs_only_in_1d():
    with pytest.raises(ValueError):
        M.cosine2d().sigma_derivs(np.zeros(2))
    assert M.const1d().sigma_derivs(0.3) == (1.0, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0, 1, exclude_max=True), y=st.floats(0, 1, exclude_max=True),
       k=st.integers(-3, 3), j=st.integers(-3, 3))
def test_fields_periodic_2d(x, y, k, j):
    p = M.cosine2d()
    a, b = np.array([x, y]), np.array([x + k, y + j])
    np.testing.assert_allclose(p.b(a), p.b(b), atol=1e-11)
    np.testing.assert_allclose(p.jac(a), p.jac(b), atol=1e-10)
    assert p.theta(a) == pytest.approx(p.theta(b), abs=1e-11)


def test_mult1d_sigma_positive():
    xs = np.linspace(0, 1, 501)
    assert min(M.mult1d().sigma(x)[0, 0] for x in xs) >= 0.7 - 1e-12
