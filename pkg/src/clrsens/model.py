"""SDE problems on the unit torus.

A :class:`Problem` bundles numba-compiled field closures.  Vector-valued
fields write into a caller-provided buffer so the simulation loop never
allocates::

    drift(x, out)        out[i]       = b_i(x)
    drift_jac(x, out)    out[i, j]    = d_j b_i(x)
    drift_hess(x, out)   out[i, j, k] = d_j d_k b_i(x)
    forcing(x, out)      out[i]       = F_i(x)
    observable(x)        -> theta(x)
    observable_grad(x, out)

Scalar 1D diffusion is given by three scalar closures ``sigma(x)``,
``dsigma(x)`` and ``d2sigma(x)``; additive noise by a constant matrix.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numba as nb
import numpy as np

TWO_PI = 2.0 * math.pi
PI = math.pi


def torus_wrap(x) -> np.ndarray:
    """Reduce coordinates to ``[0, 1)``."""
    x = np.asarray(x, dtype=float)
    y = x - np.floor(x)
    # floor can round a tiny negative up to exactly 1.0
    return np.where(y >= 1.0, 0.0, y)


@nb.njit(inline="always")
def wrap_scalar(v):
    y = v - math.floor(v)
    if y >= 1.0:
        y = 0.0
    return y


@dataclass(frozen=True)
class Scalar1D:
    sigma: Callable
    dsigma: Callable
    d2sigma: Callable


@dataclass(frozen=True)
class ConstantMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"diffusion matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < 1e-300:
            raise ValueError("constant diffusion matrix must be invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


@dataclass(frozen=True)
class Problem:
    name: str
    dim: int
    drift: Callable
    drift_jac: Callable
    drift_hess: Callable
    diffusion: Scalar1D | ConstantMatrix
    forcing: Callable
    observable: Callable
    observable_grad: Callable
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if isinstance(self.diffusion, Scalar1D) and self.dim != 1:
            raise ValueError("scalar diffusion is only defined for dim == 1")
        if isinstance(self.diffusion, ConstantMatrix) and self.diffusion.matrix.shape[0] != self.dim:
            raise ValueError("diffusion matrix shape does not match dim")

    @property
    def constant_diffusion(self) -> bool:
        return isinstance(self.diffusion, ConstantMatrix)

    # Point evaluations from Python; used by validation, the oracle and tests.

    def b(self, x) -> np.ndarray:
        out = np.empty(self.dim)
        self.drift(_pt(x), out)
        return out

    def jac(self, x) -> np.ndarray:
        out = np.empty((self.dim, self.dim))
        self.drift_jac(_pt(x), out)
        return out

    def hess(self, x) -> np.ndarray:
        out = np.empty((self.dim, self.dim, self.dim))
        self.drift_hess(_pt(x), out)
        return out

    def F(self, x) -> np.ndarray:
        out = np.empty(self.dim)
        self.forcing(_pt(x), out)
        return out

    def theta(self, x) -> float:
        return float(self.observable(_pt(x)))

    def grad_theta(self, x) -> np.ndarray:
        out = np.empty(self.dim)
        self.observable_grad(_pt(x), out)
        return out

    def sigma(self, x) -> np.ndarray:
        """Diffusion matrix at ``x``."""
        if self.constant_diffusion:
            return np.array(self.diffusion.matrix)
        return np.array([[self.diffusion.sigma(_pt(x))]])

    def sigma_derivs(self, x) -> tuple[float, float, float]:
        """``(sigma, sigma', sigma'')`` for 1D problems."""
        if self.dim != 1:
            raise ValueError("sigma derivatives are only defined in 1D")
        if self.constant_diffusion:
            return float(self.diffusion.matrix[0, 0]), 0.0, 0.0
        p = _pt(x)
        d = self.diffusion
        return float(d.sigma(p)), float(d.dsigma(p)), float(d.d2sigma(p))

    def on_points(self, name: str, pts: np.ndarray) -> np.ndarray:
        """Evaluate a field (``b``, ``F``, ``theta``, ...) at each row of ``pts``."""
        fn = getattr(self, name)
        return np.array([fn(p) for p in np.atleast_2d(pts)])


def _pt(x) -> np.ndarray:
    return np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    problem: str
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, check: str, detail: str) -> None:
        self.failures.append((check, detail))


def _sample_points(dim: int, per_dim: int) -> np.ndarray:
    g = (np.arange(per_dim) + 0.5) / per_dim
    mesh = np.meshgrid(*([g] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def validate_problem(
    p: Problem,
    grid: int = 32,
    fd_step: float = 1e-5,
    fd_rtol: float = 1e-4,
    periodic_tol: float = 1e-12,
) -> ValidationReport:
    """Check positive definiteness, periodicity and supplied derivatives.

    Failures are collected in the report instead of raising.
    """
    rep = ValidationReport(p.name)
    d = p.dim
    pts = _sample_points(d, grid)

    for x in pts:
        s = p.sigma(x)
        a = s @ s.T
        if not np.all(np.isfinite(a)) or np.linalg.eigvalsh(a).min() <= 0.0:
            rep.fail("positive-definite", f"sigma sigma^T not positive definite at x={x.tolist()}")
            break

    fields = {
        "b": p.b,
        "F": p.F,
        "theta": p.theta,
        "grad_theta": p.grad_theta,
        "jac": p.jac,
        "sigma": p.sigma,
    }
    sub = pts[:: max(1, len(pts) // 64)]
    for name, fn in fields.items():
        worst = 0.0
        for x in sub:
            f0 = np.asarray(fn(x))
            for i in range(d):
                for k in (1, -1, 3):
                    xs = x.copy()
                    xs[i] += k
                    worst = max(worst, float(np.max(np.abs(np.asarray(fn(xs)) - f0))))
        if worst > periodic_tol:
            rep.fail("periodicity", f"{name} differs by {worst:.3e} under integer shifts")

    def fd_check(label, fn, dfn, shape_fn):
        worst, where = 0.0, None
        vals = []
        for x in sub:
            analytic = np.asarray(dfn(x), dtype=float)
            num = np.empty_like(analytic)
            for j in range(d):
                e = np.zeros(d)
                e[j] = fd_step
                col = (np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * fd_step)
                num[shape_fn(j)] = col.reshape(np.shape(num[shape_fn(j)]))
            vals.append((x, analytic, num))
        scale = max(1.0, max(float(np.max(np.abs(n))) for _, _, n in vals))
        for x, a, n in vals:
            err = float(np.max(np.abs(a - n))) / scale
            if err > worst:
                worst, where = err, x
        if worst > fd_rtol:
            rep.fail(
                "derivative",
                f"{label} disagrees with finite differences (rel err {worst:.2e} at x={where.tolist()})",
            )

    fd_check("drift_jac", p.b, p.jac, lambda j: (slice(None), j))
    fd_check("drift_hess", p.jac, p.hess, lambda j: (slice(None), slice(None), j))
    fd_check("observable_grad", lambda x: np.array([p.theta(x)]), p.grad_theta, lambda j: j)
    if d == 1 and not p.constant_diffusion:
        fd_check("dsigma", lambda x: np.array([p.sigma_derivs(x)[0]]),
                 lambda x: np.array([p.sigma_derivs(x)[1]]), lambda j: j)
        fd_check("d2sigma", lambda x: np.array([p.sigma_derivs(x)[1]]),
                 lambda x: np.array([p.sigma_derivs(x)[2]]), lambda j: j)
    return rep


# ---------------------------------------------------------------------------
# Built-in problems


@nb.njit(inline="always")
def _cos_drift(x, out):
    out[0] = PI * math.sin(TWO_PI * x[0])


@nb.njit(inline="always")
def _cos_drift_jac(x, out):
    out[0, 0] = 2.0 * PI * PI * math.cos(TWO_PI * x[0])


@nb.njit(inline="always")
def _cos_drift_hess(x, out):
    out[0, 0, 0] = -4.0 * PI**3 * math.sin(TWO_PI * x[0])


@nb.njit(inline="always")
def _unit_forcing(x, out):
    out[0] = 1.0


@nb.njit(inline="always")
def _cos_theta(x):
    return PI * math.sin(TWO_PI * x[0])


@nb.njit(inline="always")
def _cos_theta_grad(x, out):
    out[0] = 2.0 * PI * PI * math.cos(TWO_PI * x[0])


@nb.njit(inline="always")
def _sqrt2(x):
    return math.sqrt(2.0)


@nb.njit(inline="always")
def _zero(x):
    return 0.0


def cosine1d() -> Problem:
    """Gradient drift of ``V(x) = cos(2 pi x)/2`` with ``sigma = sqrt(2)``, ``F = 1``, ``theta = b``."""
    return Problem(
        name="cosine1d",
        dim=1,
        drift=_cos_drift,
        drift_jac=_cos_drift_jac,
        drift_hess=_cos_drift_hess,
        diffusion=Scalar1D(_sqrt2, _zero, _zero),
        forcing=_unit_forcing,
        observable=_cos_theta,
        observable_grad=_cos_theta_grad,
    )


@functools.lru_cache(maxsize=None)
def const1d(c: float = 0.7, sigma: float = 1.0, forcing: float = 1.0) -> Problem:
    """Constant drift and noise; the invariant measure is uniform for every
    perturbation, so the response is exactly zero."""

    @nb.njit(inline="always")
    def drift(x, out):
        out[0] = c

    @nb.njit(inline="always")
    def jac(x, out):
        out[0, 0] = 0.0

    @nb.njit(inline="always")
    def hess(x, out):
        out[0, 0, 0] = 0.0

    @nb.njit(inline="always")
    def force(x, out):
        out[0] = forcing

    @nb.njit(inline="always")
    def theta(x):
        return math.sin(TWO_PI * x[0])

    @nb.njit(inline="always")
    def grad(x, out):
        out[0] = TWO_PI * math.cos(TWO_PI * x[0])

    return Problem(
        name="const1d",
        dim=1,
        drift=drift,
        drift_jac=jac,
        drift_hess=hess,
        diffusion=ConstantMatrix(np.array([[sigma]])),
        forcing=force,
        observable=theta,
        observable_grad=grad,
        params={"c": c, "sigma": sigma, "forcing": forcing},
    )


@nb.njit(inline="always")
def _cos2_drift(x, out):
    out[0] = PI * math.sin(TWO_PI * x[0])
    out[1] = PI * math.sin(TWO_PI * x[1])


@nb.njit(inline="always")
def _cos2_jac(x, out):
    out[0, 0] = 2.0 * PI * PI * math.cos(TWO_PI * x[0])
    out[0, 1] = 0.0
    out[1, 0] = 0.0
    out[1, 1] = 2.0 * PI * PI * math.cos(TWO_PI * x[1])


@nb.njit(inline="always")
def _cos2_hess(x, out):
    out[:] = 0.0
    out[0, 0, 0] = -4.0 * PI**3 * math.sin(TWO_PI * x[0])
    out[1, 1, 1] = -4.0 * PI**3 * math.sin(TWO_PI * x[1])


@nb.njit(inline="always")
def _cos2_forcing(x, out):
    out[0] = 1.0
    out[1] = 0.0


@nb.njit(inline="always")
def _cos2_grad(x, out):
    out[0] = 2.0 * PI * PI * math.cos(TWO_PI * x[0])
    out[1] = 0.0


def cosine2d() -> Problem:
    """Separable potential ``(cos 2 pi x + cos 2 pi y)/2`` with ``sigma = sqrt(2) I``,
    forcing ``(1, 0)`` and ``theta = pi sin(2 pi x)``."""
    return Problem(
        name="cosine2d",
        dim=2,
        drift=_cos2_drift,
        drift_jac=_cos2_jac,
        drift_hess=_cos2_hess,
        diffusion=ConstantMatrix(math.sqrt(2.0) * np.eye(2)),
        forcing=_cos2_forcing,
        observable=_cos_theta,
        observable_grad=_cos2_grad,
    )


@nb.njit(inline="always")
def _mult_sigma(x):
    return 1.0 + 0.3 * math.sin(TWO_PI * x[0])


@nb.njit(inline="always")
def _mult_dsigma(x):
    return 0.3 * TWO_PI * math.cos(TWO_PI * x[0])


@nb.njit(inline="always")
def _mult_d2sigma(x):
    return -0.3 * TWO_PI * TWO_PI * math.sin(TWO_PI * x[0])


@nb.njit(inline="always")
def _mult_forcing(x, out):
    out[0] = 1.0 + 0.5 * math.cos(TWO_PI * x[0])


def mult1d() -> Problem:
    """The cosine drift with multiplicative noise ``1 + 0.3 sin(2 pi x)`` and a
    state-dependent forcing; exercises every sigma-derivative term."""
    return Problem(
        name="mult1d",
        dim=1,
        drift=_cos_drift,
        drift_jac=_cos_drift_jac,
        drift_hess=_cos_drift_hess,
        diffusion=Scalar1D(_mult_sigma, _mult_dsigma, _mult_d2sigma),
        forcing=_mult_forcing,
        observable=_cos_theta,
        observable_grad=_cos_theta_grad,
    )


# Building blocks for problem variants (zero forcing, other observables).


@nb.njit(inline="always")
def zero_field(x, out):
    out[:] = 0.0


@nb.njit(inline="always")
def cos_observable(x):
    return math.cos(TWO_PI * x[0])


@nb.njit(inline="always")
def cos_observable_grad(x, out):
    out[:] = 0.0
    out[0] = -TWO_PI * math.sin(TWO_PI * x[0])


@functools.lru_cache(maxsize=None)
def constant_observable(value: float = 1.0):
    """``(theta, grad theta)`` closures of a constant observable."""

    @nb.njit(inline="always")
    def theta(x):
        return value

    return theta, zero_field


def variant(p: Problem, name: str | None = None, **changes) -> Problem:
    """Copy of ``p`` with some fields replaced, e.g. ``forcing=zero_field``."""
    return dataclasses.replace(p, name=name or p.name + "-variant", **changes)


REGISTRY: dict[str, Callable[[], Problem]] = {
    "cosine1d": cosine1d,
    "const1d": const1d,
    "cosine2d": cosine2d,
    "mult1d": mult1d,
}


def get_problem(name: str) -> Problem:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(REGISTRY)}") from None
