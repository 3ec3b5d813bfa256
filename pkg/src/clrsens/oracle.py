"""Deterministic reference solutions on the 1D and 2D torus.

Everything is discretized by Fourier collocation on the uniform grid
``x_j = j/M``.  With ``D1`` (Nyquist mode removed) and ``D2`` the spectral
first and second derivative matrices,

    L  = sum_i diag(b_i) D_i + 1/2 sum_jl diag(A_jl) D_jl,        A = sigma sigma^T
    L* = -sum_i D_i diag(b_i) + 1/2 sum_jl D_jl diag(A_jl)

so that ``L*`` is exactly the transpose of ``L``: the discrete adjoint with
respect to the (spectrally exact) uniform quadrature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

from .model import Problem

DEFAULT_M = {1: 128, 2: 48}


_DENSE_EXPM_MAX = 1024


class OracleError(RuntimeError):
    """The discrete problem is singular or a residual check failed."""


def _fourier_matrices(M: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.fft.fftfreq(M, d=1.0 / M)
    ik = 2j * np.pi * k
    ik1 = ik.copy()
    if M % 2 == 0:
        ik1[M // 2] = 0.0  # the Nyquist mode has no real-valued first derivative
    E = np.fft.fft(np.eye(M), axis=0)
    D1 = np.fft.ifft(ik1[:, None] * E, axis=0).real
    D2 = np.fft.ifft((ik * ik)[:, None] * E, axis=0).real
    return D1, D2


@dataclass(frozen=True)
class SpectralGrid:
    d: int
    M: int = 0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("spectral oracle supports d = 1 or 2")
        if self.M == 0:
            object.__setattr__(self, "M", DEFAULT_M[self.d])
        if self.M < 4 or self.M % 2:
            raise ValueError("M must be an even integer >= 4")

    @property
    def size(self) -> int:
        return self.M**self.d

    @cached_property
    def points(self) -> np.ndarray:
        """Nodes as an ``(M^d, d)`` array; the last coordinate varies fastest."""
        x = np.arange(self.M) / self.M
        if self.d == 1:
            return x[:, None]
        X, Y = np.meshgrid(x, x, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def _ops(self):
        D1, D2 = _fourier_matrices(self.M)
        if self.d == 1:
            return [D1], [[D2]]
        I = np.eye(self.M)
        Dx, Dy = np.kron(D1, I), np.kron(I, D1)
        Dxy = np.kron(D1, D1)
        return [Dx, Dy], [[np.kron(D2, I), Dxy], [Dxy, np.kron(I, D2)]]

    @property
    def first(self) -> list[np.ndarray]:
        return self._ops[0]

    @property
    def second(self) -> list[list[np.ndarray]]:
        return self._ops[1]

    def integrate(self, f: np.ndarray) -> float:
        return float(np.mean(f))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """``(M^d, d)`` spectral gradient of nodal values ``u``."""
        return np.column_stack([D @ u for D in self.first])


@dataclass(frozen=True)
class FieldValues:
    """Problem fields sampled on a grid."""

    b: np.ndarray  # (n, d)
    A: np.ndarray  # (n, d, d)
    F: np.ndarray  # (n, d)
    theta: np.ndarray  # (n,)


def sample_fields(p: Problem, g: SpectralGrid) -> FieldValues:
    if p.dim != g.d:
        raise ValueError("grid and problem dimensions differ")
    pts = g.points
    b = np.array([p.b(x) for x in pts])
    S = np.array([p.sigma(x) for x in pts])
    A = np.einsum("nik,njk->nij", S, S)
    F = np.array([p.F(x) for x in pts])
    theta = np.array([p.theta(x) for x in pts])
    return FieldValues(b, A, F, theta)


def generator_matrix(g: SpectralGrid, b: np.ndarray, A: np.ndarray) -> np.ndarray:
    L = np.zeros((g.size, g.size))
    for i, D in enumerate(g.first):
        L += b[:, i, None] * D
    for j in range(g.d):
        for l in range(g.d):
            if np.any(A[:, j, l] != 0.0):
                L += 0.5 * A[:, j, l, None] * g.second[j][l]
    return L


def adjoint_matrix(g: SpectralGrid, b: np.ndarray, A: np.ndarray) -> np.ndarray:
    Ls = np.zeros((g.size, g.size))
    for i, D in enumerate(g.first):
        Ls -= D * b[None, :, i]
    for j in range(g.d):
        for l in range(g.d):
            if np.any(A[:, j, l] != 0.0):
                Ls += 0.5 * g.second[j][l] * A[None, :, j, l]
    return Ls


def _bordered_solve(K: np.ndarray, col: np.ndarray, row: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``[[K, col], [row, 0]] [u; lam] = [rhs; 0 or 1]`` by LU.

    The border removes a one-dimensional null space of ``K``; if ``K`` has a
    larger one the bordered matrix is singular and this raises.
    """
    n = K.shape[0]
    B = np.zeros((n + 1, n + 1))
    B[:n, :n] = K
    B[:n, n] = col
    B[n, :n] = row
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            sol = sla.solve(B, rhs, check_finite=True)
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
            raise OracleError(f"bordered system is singular: {exc}") from exc
    return sol[:n]


def _density_from(g: SpectralGrid, b: np.ndarray, A: np.ndarray, check: bool = True) -> np.ndarray:
    Ls = adjoint_matrix(g, b, A)
    n = g.size
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    f = _bordered_solve(Ls, np.ones(n), np.full(n, 1.0 / n), rhs)
    if check:
        res = np.max(np.abs(Ls @ f))
        if res > 1e-8 * np.max(np.abs(f)):
            raise OracleError(f"stationary residual {res:.3e} too large")
        if np.min(f) <= 0.0:
            raise OracleError("stationary density is not positive; refine the grid")
    return f


def stationary_density(p: Problem, g: SpectralGrid | None = None) -> np.ndarray:
    """Nodal values of the invariant density, normalized to unit mass."""
    g = g or SpectralGrid(p.dim)
    fv = sample_fields(p, g)
    return _density_from(g, fv.b, fv.A)


def _poisson_from(g: SpectralGrid, L: np.ndarray, f: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n = g.size
    w = f / n
    mu = float(w @ theta)
    rhs = np.zeros(n + 1)
    rhs[:n] = theta - mu
    return _bordered_solve(-L, np.ones(n), w, rhs)


def poisson_solve(p: Problem, g: SpectralGrid | None = None, theta=None) -> np.ndarray:
    """Solution of ``-L u = theta - mu(theta)`` with ``mu(u) = 0``.

    ``theta`` may be nodal values, a callable of a point, or ``None`` for the
    problem's observable.
    """
    g = g or SpectralGrid(p.dim)
    fv = sample_fields(p, g)
    th = _theta_values(p, g, theta, fv)
    f = _density_from(g, fv.b, fv.A)
    L = generator_matrix(g, fv.b, fv.A)
    return _poisson_from(g, L, f, th)


def _theta_values(p, g, theta, fv=None) -> np.ndarray:
    if theta is None:
        return fv.theta if fv is not None else np.array([p.theta(x) for x in g.points])
    if callable(theta):
        return np.array([float(theta(x)) for x in g.points])
    th = np.asarray(theta, dtype=float)
    if th.shape != (g.size,):
        raise ValueError("nodal theta has the wrong shape")
    return th


@dataclass(frozen=True)
class ReferenceSolution:
    grid: SpectralGrid
    density: np.ndarray
    poisson: np.ndarray
    mu_theta: float
    rho: float
    density_residual: float  # max |L* f| / max |f|
    poisson_residual: float  # max |L u + theta - mu| / max |theta|


def reference_solution(p: Problem, g: SpectralGrid | None = None, theta=None) -> ReferenceSolution:
    g = g or SpectralGrid(p.dim)
    fv = sample_fields(p, g)
    th = _theta_values(p, g, theta, fv)
    f = _density_from(g, fv.b, fv.A)
    L = generator_matrix(g, fv.b, fv.A)
    u = _poisson_from(g, L, f, th)
    mu = g.integrate(f * th)
    rho = g.integrate(f * np.sum(fv.F * g.gradient(u), axis=1))
    dres = float(np.max(np.abs(L.T @ f)) / np.max(np.abs(f)))
    pres_abs = float(np.max(np.abs(L @ u + th - mu)))
    scale = float(np.max(np.abs(th)))
    pres = pres_abs / scale if scale > 0 else pres_abs
    if pres > 1e-8:
        raise OracleError(f"Poisson residual {pres:.3e} too large")
    return ReferenceSolution(g, f, u, mu, float(rho), dres, pres)


def response_reference(p: Problem, g: SpectralGrid | None = None) -> float:
    """``rho = mu(F . grad u)`` with ``u`` the Poisson solution for the observable."""
    return reference_solution(p, g).rho


def response_fd(p: Problem, g: SpectralGrid | None = None, eps: float = 1e-3) -> float:
    """Central difference of the stationary average under the drift ``b +- eps F``."""
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    g = g or SpectralGrid(p.dim)
    fv = sample_fields(p, g)
    if not np.any(fv.F):
        return 0.0
    mus = []
    for sgn in (1.0, -1.0):
        f = _density_from(g, fv.b + sgn * eps * fv.F, fv.A)
        mus.append(g.integrate(f * fv.theta))
    return (mus[0] - mus[1]) / (2.0 * eps)


def time_evolved_expectation(p: Problem, g: SpectralGrid | None = None, theta=None, T: float = 1.0,
                             initial=None) -> float:
    """``E[theta(X_T)]`` for ``X_0`` with nodal density ``initial`` (uniform by default).

    The Fokker-Planck flow ``f_T = exp(T L*) f_0`` is a matrix exponential,
    so no time-step refinement is involved.  Small grids use a dense
    scaling-and-squaring exponential (cost independent of ``T``); larger ones
    use the exponential action.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    g = g or SpectralGrid(p.dim)
    fv = sample_fields(p, g)
    th = _theta_values(p, g, theta, fv)
    f0 = np.ones(g.size) if initial is None else np.asarray(initial, dtype=float)
    if f0.shape != (g.size,):
        raise ValueError("initial density has the wrong shape")
    Ls = adjoint_matrix(g, fv.b, fv.A)
    if g.size <= _DENSE_EXPM_MAX:
        fT = expm(T * Ls) @ f0
    else:
        fT = expm_multiply(T * Ls, f0)
    if not np.all(np.isfinite(fT)):
        raise OracleError("time evolution produced non-finite values")
    return g.integrate(fT * th)


def oracle_report(p: Problem, M: int = 0, eps: float = 1e-3) -> dict:
    """Reference response, its finite-difference cross-check and residuals."""
    g = SpectralGrid(p.dim, M)
    ref = reference_solution(p, g)
    return {
        "problem": p.name,
        "M": g.M,
        "mu_theta": ref.mu_theta,
        "rho": ref.rho,
        "rho_fd": response_fd(p, g, eps),
        "density_residual": ref.density_residual,
        "poisson_residual": ref.poisson_residual,
    }


def periodic_interpolation(y: np.ndarray, M: int) -> np.ndarray:
    """Rows of weights ``W`` with ``(W @ u)[r]`` the trigonometric interpolant of
    nodal values ``u`` (grid ``j/M``, ``M`` even) evaluated at ``y[r]``."""
    d = np.asarray(y, dtype=float)[:, None] - np.arange(M)[None, :] / M
    s = np.sin(np.pi * d)
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.sin(np.pi * M * d) * np.cos(np.pi * d) / (M * s)
    K[np.abs(s) < 1e-14] = 1.0
    return K


class DiscreteChain:
    """Transfer operator of a one-dimensional one-step scheme.

    ``(P u)(x_i) = E_G[u(step(x_i, sqrt(h) G))]`` with Gauss-Hermite
    quadrature in ``G`` and trigonometric interpolation in space.  Gives the
    exact (time-continuous-free) expectations that Monte Carlo runs of the
    scheme converge to.  Once ``h |b'|`` is of order one the integrand becomes
    oscillatory in ``G`` and ``nodes`` must be raised; compare two values of
    ``nodes`` before trusting a result at large ``h``.
    """

    def __init__(self, p: Problem, scheme: str, h: float, M: int = 256, nodes: int = 80):
        from .integrators import em_step, it2_step

        if p.dim != 1:
            raise ValueError("DiscreteChain is one-dimensional")
        if not h > 0:
            raise ValueError("h must be positive")
        self.p, self.scheme, self.h, self.M = p, scheme, h, M
        g, w = np.polynomial.hermite_e.hermegauss(nodes)
        self.g, self.w = g, w / np.sqrt(2.0 * np.pi)
        self.x = np.arange(M) / M
        self.dW = np.sqrt(h) * g
        if scheme == "em":
            step = lambda x, dw: em_step(p, x, dw, h)
        elif scheme == "it2":
            step = lambda x, dw: it2_step(p, x, dw, h=h)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.targets = np.array([[step(xi, dw)[0] for dw in self.dW] for xi in self.x])
        self._interp = [periodic_interpolation(self.targets[:, q], M) for q in range(nodes)]
        self.P = sum(wq * Iq for wq, Iq in zip(self.w, self._interp))

    def nodal(self, fn) -> np.ndarray:
        return np.array([float(fn(np.array([xi]))) for xi in self.x])

    @cached_property
    def stationary(self) -> np.ndarray:
        """Weights ``pi`` with ``pi P = pi`` and ``sum(pi) = 1``."""
        M = self.M
        rhs = np.zeros(M + 1)
        rhs[M] = 1.0
        return _bordered_solve(self.P.T - np.eye(M), np.ones(M), np.ones(M), rhs)

    def mean(self, values: np.ndarray) -> float:
        return float(self.stationary @ values)

    def expectation(self, values: np.ndarray, N: int, initial: np.ndarray | None = None) -> float:
        """``E[u(X_N)]`` for ``X_0`` distributed with nodal density ``initial``."""
        u = np.asarray(values, dtype=float)
        for _ in range(N):
            u = self.P @ u
        f0 = np.ones(self.M) if initial is None else np.asarray(initial, dtype=float)
        return float(np.mean(f0 * u))

    def clr_limit(self, estimator: str = "clr1") -> float:
        """Large-``N`` expectation of a CLR estimator for this chain:
        ``E_pi[dY_0 Theta(X_1)]`` (plus the order-2 correction), where
        ``Theta = sum_k P^k (theta - mu_h(theta))``."""
        from .estimators import y_update, z_update

        p, h, M = self.p, self.h, self.M
        th = self.nodal(p.theta)
        pi = self.stationary
        mu = float(pi @ th)
        Theta = _bordered_solve(np.eye(M) - self.P, np.ones(M), pi, np.r_[th - mu, 0.0])
        second = estimator in ("clr2", "clr2-raw", "clr2-general")
        cross = 0.0
        for q, dw in enumerate(self.dW):
            Th1 = self._interp[q] @ Theta
            if second:
                inc = np.array([y_update(p, [xi], [dw], 0.0, h) for xi in self.x])
            else:
                inc = np.array([z_update(p, [xi], [dw], 0.0) for xi in self.x])
            cross += self.w[q] * float(pi @ (inc * Th1))
        if estimator in ("clr2", "clr2-general"):
            gF = np.array([float(p.grad_theta(np.array([xi])) @ p.F(np.array([xi]))) for xi in self.x])
            cross += 0.5 * h * float(pi @ gF)
        return cross


def gibbs_density(V: np.ndarray) -> np.ndarray:
    """Normalized ``exp(-V)`` on a uniform grid (the invariant density of
    ``dX = -V' dt + sqrt(2) dW``)."""
    e = np.exp(-(V - np.min(V)))
    return e / np.mean(e)


__all__ = [
    "SpectralGrid", "ReferenceSolution", "OracleError", "stationary_density", "poisson_solve",
    "reference_solution", "response_reference", "response_fd", "time_evolved_expectation",
    "oracle_report", "DiscreteChain", "periodic_interpolation", "generator_matrix", "adjoint_matrix", "gibbs_density", "sample_fields",
]
