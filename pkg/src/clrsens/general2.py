"""Second-order CLR weights for an arbitrary 1D second-order scheme.

A scheme is described by its expansion

    X_{n+1} = X_n + c0 h^{1/2} + c1 h + c2 h^{3/2} + R h^2,   dW = h^{1/2} G,

with ``c0 = sigma G``.  From Gaussian moments of the ``c_k`` one obtains the
factors ``d1``, ``d2`` and the modified-weight slope ``m`` (``gamma = m G``)
that cancel the O(h) error of the centered estimator, together with an
a-posteriori correction.

The ``c_k`` are numba functions of a per-point coefficient vector ``c``
(layout ``COEF_*`` below) and the normal variable ``g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numba as nb
import numpy as np

from .integrators import scheme_coefficients
from .model import Problem

COEF_B, COEF_DB, COEF_D2B, COEF_S, COEF_DS, COEF_D2S, COEF_KB, COEF_LB, COEF_KS, COEF_LS = range(10)
N_COEF = 10

# moment slots: E[c0^3 G], E[c0 c1 G], E[c2 G], E[c1 G], E[c0^2 G]
M_C03G, M_C0C1G, M_C2G, M_C1G, M_C02G = range(5)
N_MOM = 5

DEFAULT_NODES = 32


@nb.njit(inline="always")
def fill_coef_1d(b, J, H, sd, Kb, Lb, c):
    c[COEF_B] = b[0]
    c[COEF_DB] = J[0, 0]
    c[COEF_D2B] = H[0, 0, 0]
    c[COEF_S] = sd[0]
    c[COEF_DS] = sd[3]
    c[COEF_D2S] = sd[4]
    c[COEF_KB] = Kb[0, 0]
    c[COEF_LB] = Lb[0]
    c[COEF_KS] = sd[1]
    c[COEF_LS] = sd[2]


# Expansion of the Ito-Taylor scheme.


@nb.njit(inline="always")
def it2_c0(c, g):
    return c[COEF_S] * g


@nb.njit(inline="always")
def it2_c1(c, g):
    return c[COEF_B] + 0.5 * c[COEF_KS] * (g * g - 1.0)


@nb.njit(inline="always")
def it2_c2(c, g):
    return 0.5 * (c[COEF_KB] + c[COEF_LS]) * g


@nb.njit(inline="always")
def it2_remainder(c, g):
    return 0.5 * c[COEF_LB]


@nb.njit(inline="always")
def it2_moments(c, out):
    s = c[COEF_S]
    out[M_C03G] = 3.0 * s * s * s
    out[M_C0C1G] = s * (c[COEF_B] + c[COEF_KS])
    out[M_C2G] = 0.5 * (c[COEF_KB] + c[COEF_LS])
    out[M_C1G] = 0.0
    out[M_C02G] = 0.0


@nb.njit(inline="always")
def no_moments(c, out):
    out[:] = np.nan


@nb.njit(inline="always")
def quadrature_moments(c0, c1, c2, c, nodes, weights, out):
    m0 = m1 = m2 = m3 = m4 = 0.0
    for q in range(nodes.shape[0]):
        g = nodes[q]
        w = weights[q]
        a0 = c0(c, g)
        a1 = c1(c, g)
        m0 += w * a0 * a0 * a0 * g
        m1 += w * a0 * a1 * g
        m2 += w * c2(c, g) * g
        m3 += w * a1 * g
        m4 += w * a0 * a0 * g
    out[M_C03G] = m0
    out[M_C0C1G] = m1
    out[M_C2G] = m2
    out[M_C1G] = m3
    out[M_C02G] = m4


@nb.njit(inline="always")
def eval_moments(c0, c1, c2, closed, use_closed, c, nodes, weights, out):
    if use_closed:
        closed(c, out)
    else:
        quadrature_moments(c0, c1, c2, c, nodes, weights, out)


@nb.njit(inline="always")
def d1_from(mom, c, F):
    s = c[COEF_S]
    return mom[M_C03G] * (F / s) / (3.0 * s * s)


@nb.njit(inline="always")
def d2_from(mom, c, F, d1):
    s = c[COEF_S]
    return 2.0 / (s * s) * (mom[M_C0C1G] * (F / s) - (c[COEF_B] + s * c[COEF_DS]) * d1)


@nb.njit(inline="always")
def gamma_rhs(mom, c, F, d1, d2):
    return d2 * c[COEF_B] + d1 * c[COEF_DB] - (F / c[COEF_S]) * mom[M_C2G]


@nb.njit(inline="always")
def gamma_slope(mom, c, F, d1, d2):
    """``m`` with ``gamma = m G``; ``nan`` flags an unsatisfiable point."""
    rhs = gamma_rhs(mom, c, F, d1, d2)
    if F != 0.0:
        return rhs / F
    scale = abs(d2 * c[COEF_B]) + abs(d1 * c[COEF_DB]) + 1.0
    if abs(rhs) <= 1e-12 * scale:
        return 0.0
    return np.nan


def gauss_hermite(n: int = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for expectations over a standard normal."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SchemeExpansion:
    """Coefficients ``c0, c1, c2`` (and the ``h^2`` remainder) of a 1D scheme.

    ``moments`` is an optional closed form for the five Gaussian moments; when
    absent they are computed by Gauss-Hermite quadrature.
    """

    name: str
    c0: Callable
    c1: Callable
    c2: Callable
    remainder: Callable | None = None
    moments: Callable | None = None
    nodes: int = DEFAULT_NODES

    @property
    def closed_form(self) -> bool:
        return self.moments is not None

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        return gauss_hermite(self.nodes)

    def without_closed_form(self) -> "SchemeExpansion":
        return SchemeExpansion(self.name, self.c0, self.c1, self.c2, self.remainder, None, self.nodes)

    def kernel_args(self) -> tuple:
        nodes, weights = self.quadrature()
        closed = self.moments if self.moments is not None else no_moments
        return self.c0, self.c1, self.c2, closed, self.closed_form, nodes, weights


def it2_expansion() -> SchemeExpansion:
    return SchemeExpansion("it2", it2_c0, it2_c1, it2_c2, it2_remainder, it2_moments)


EXPANSIONS = {"it2": it2_expansion}


def coefficient_vector(p: Problem, x) -> np.ndarray:
    if p.dim != 1:
        raise ValueError("the general construction is one-dimensional")
    sc = scheme_coefficients(p, x)
    s, s1, s2 = p.sigma_derivs(x)
    c = np.empty(N_COEF)
    c[COEF_B] = sc.b[0]
    c[COEF_DB] = sc.jac[0, 0]
    c[COEF_D2B] = sc.hess[0, 0, 0]
    c[COEF_S] = s
    c[COEF_DS] = s1
    c[COEF_D2S] = s2
    c[COEF_KB] = sc.Kb[0, 0]
    c[COEF_LB] = sc.Lb[0]
    c[COEF_KS] = sc.Ksigma
    c[COEF_LS] = sc.Lsigma
    return c


@nb.njit
def _moments_py(c0, c1, c2, closed, use_closed, c, nodes, weights):
    out = np.empty(N_MOM)
    eval_moments(c0, c1, c2, closed, use_closed, c, nodes, weights, out)
    return out


def moments(se: SchemeExpansion, p: Problem, x) -> np.ndarray:
    """The five Gaussian moments at ``x``."""
    c = coefficient_vector(p, x)
    nodes, weights = se.quadrature()
    closed = se.moments if se.moments is not None else no_moments
    return _moments_py(se.c0, se.c1, se.c2, closed, se.closed_form, c, nodes, weights)


def validate_expansion(se: SchemeExpansion, p: Problem, points=None, tol: float = 1e-8) -> None:
    """Reject expansions violating ``c0 = sigma G``, ``E[c1 G] = 0`` or ``E[c0^2 G] = 0``."""
    if points is None:
        points = (np.arange(64) + 0.5) / 64
    probe = np.array([-1.7, -0.3, 0.0, 0.4, 2.1])
    for x in np.atleast_1d(points):
        c = coefficient_vector(p, x)
        m = moments(se, p, x)
        for g in probe:
            if abs(se.c0(c, g) - c[COEF_S] * g) > tol * max(1.0, abs(c[COEF_S] * g)):
                raise ValueError(f"{se.name}: c0 != sigma G at x={x}")
        if abs(m[M_C1G]) > tol:
            raise ValueError(f"{se.name}: E[c1 G] = {m[M_C1G]:.3e} != 0 at x={x}")
        if abs(m[M_C02G]) > tol:
            raise ValueError(f"{se.name}: E[c0^2 G] = {m[M_C02G]:.3e} != 0 at x={x}")


def _sigma_nonzero(c, x):
    if c[COEF_S] == 0.0:
        raise ZeroDivisionError(f"sigma vanishes at x={x}")


def compute_d1(se: SchemeExpansion, p: Problem, x) -> float:
    c = coefficient_vector(p, x)
    _sigma_nonzero(c, x)
    return float(d1_from(moments(se, p, x), c, p.F(x)[0]))


def compute_d2(se: SchemeExpansion, p: Problem, x, d1: float) -> float:
    c = coefficient_vector(p, x)
    _sigma_nonzero(c, x)
    return float(d2_from(moments(se, p, x), c, p.F(x)[0], d1))


def solve_gamma(se: SchemeExpansion, p: Problem, x, d1: float, d2: float) -> float:
    """Slope ``m(x)`` of ``gamma(x; G) = m(x) G``."""
    c = coefficient_vector(p, x)
    _sigma_nonzero(c, x)
    m = float(gamma_slope(moments(se, p, x), c, p.F(x)[0], d1, d2))
    if math.isnan(m):
        raise ValueError(f"gamma equation unsatisfiable at x={x}: F = 0 with nonzero right side")
    return m


def assemble_general_correction(d1, d2, theta, dtheta, F, center: float, h: float) -> float:
    """Additive per-replica correction from per-step samples ``X_n, n < N``:

    ``h mean(d1 theta' + d2 (theta - center)) - (h/2) mean(theta' F)``.
    """
    d1, d2, theta, dtheta, F = map(np.asarray, (d1, d2, theta, dtheta, F))
    first = np.mean(d1 * dtheta + d2 * (theta - center))
    return float(h * first - 0.5 * h * np.mean(dtheta * F))
