"""One-step maps: Euler-Maruyama (weak order 1) and the Ito-Taylor scheme
(weak order 2).

The numba cores below are shared by the Python wrappers and the ensemble
kernel in :mod:`clrsens.estimators`, so a single step is computed by exactly
the same code in both places.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import Problem, wrap_scalar

EM = 0
IT2 = 1
SCHEMES = {"em": EM, "it2": IT2}


@nb.njit(inline="always")
def _noop_scalar(x):
    return 0.0


def problem_args(p: Problem) -> tuple:
    """Flatten a problem into the positional arguments of the numba cores."""
    if p.constant_diffusion:
        sig = dsig = d2sig = _noop_scalar
        S = np.ascontiguousarray(p.diffusion.matrix)
        Sinv = np.ascontiguousarray(p.diffusion.inverse)
    else:
        d = p.diffusion
        sig, dsig, d2sig = d.sigma, d.dsigma, d.d2sigma
        S = np.zeros((1, 1))
        Sinv = np.zeros((1, 1))
    return (
        p.drift, p.drift_jac, p.drift_hess, sig, dsig, d2sig,
        p.forcing, p.observable, p.observable_grad,
        p.constant_diffusion, S, Sinv,
    )


@nb.njit(inline="always")
def eval_diffusion(sig, dsig, const, Smat, Sinv, x, S, Si, sd):
    d = x.shape[0]
    if const:
        for i in range(d):
            for j in range(d):
                S[i, j] = Smat[i, j]
                Si[i, j] = Sinv[i, j]
        sd[0] = Smat[0, 0]
        sd[1] = 0.0
        sd[2] = 0.0
        sd[3] = 0.0
        sd[4] = 0.0
    else:
        s = sig(x)
        S[0, 0] = s
        Si[0, 0] = 1.0 / s
        sd[0] = s
        sd[3] = dsig(x)


@nb.njit(inline="always")
def eval_coefficients(drift, jac, hess, sig, dsig, d2sig, const, Smat, Sinv,
                      x, b, J, H, S, Si, Kb, Lb, sd):
    """Fill b, grad b, Hess b, sigma, K^k b, L b and (1D) K sigma, L sigma at ``x``."""
    d = x.shape[0]
    drift(x, b)
    jac(x, J)
    hess(x, H)
    eval_diffusion(sig, dsig, const, Smat, Sinv, x, S, Si, sd)
    for i in range(d):
        for k in range(d):
            acc = 0.0
            for j in range(d):
                acc += J[i, j] * S[j, k]
            Kb[i, k] = acc
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += b[j] * J[i, j]
        acc2 = 0.0
        for j in range(d):
            for l in range(d):
                a = 0.0
                for k in range(d):
                    a += S[j, k] * S[l, k]
                acc2 += a * H[i, j, l]
        Lb[i] = acc + 0.5 * acc2
    if not const:
        s = sd[0]
        s1 = sd[3]
        s2 = d2sig(x)
        sd[4] = s2
        sd[1] = s * s1
        sd[2] = b[0] * s1 + 0.5 * s * s * s2


@nb.njit(inline="always")
def em_increment(b, S, dW, h, out):
    d = b.shape[0]
    for i in range(d):
        acc = b[i] * h
        for k in range(d):
            acc += S[i, k] * dW[k]
        out[i] = acc


@nb.njit(inline="always")
def it2_increment(b, S, Kb, Lb, sd, const, dW, V, h, out):
    d = b.shape[0]
    for i in range(d):
        acc = b[i] * h
        for k in range(d):
            acc += S[i, k] * dW[k]
        corr = 0.0
        for k in range(d):
            corr += Kb[i, k] * dW[k]
        if not const:
            # scalar noise: L sigma dW h and K sigma (dW^2 + V)
            corr += sd[2] * dW[0]
            acc += 0.5 * sd[1] * (dW[0] * dW[0] + V[0, 0])
        acc += 0.5 * corr * h + 0.5 * Lb[i] * h * h
        out[i] = acc


@nb.njit(nogil=True)
def _step_core(drift, jac, hess, sig, dsig, d2sig, const, Smat, Sinv,
               scheme, x, dW, V, h):
    d = x.shape[0]
    b = np.empty(d)
    J = np.empty((d, d))
    H = np.empty((d, d, d))
    S = np.empty((d, d))
    Si = np.empty((d, d))
    Kb = np.empty((d, d))
    Lb = np.empty(d)
    sd = np.zeros(5)
    inc = np.empty(d)
    if scheme == 0:
        eval_diffusion(sig, dsig, const, Smat, Sinv, x, S, Si, sd)
        drift(x, b)
        em_increment(b, S, dW, h, inc)
    else:
        eval_coefficients(drift, jac, hess, sig, dsig, d2sig, const, Smat, Sinv,
                          x, b, J, H, S, Si, Kb, Lb, sd)
        it2_increment(b, S, Kb, Lb, sd, const, dW, V, h, inc)
    out = np.empty(d)
    for i in range(d):
        out[i] = wrap_scalar(x[i] + inc[i])
    return out


def _call_step(p: Problem, scheme: int, x, dW, V, h: float) -> np.ndarray:
    if not h > 0:
        raise ValueError("time step must be positive")
    x = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))
    dW = np.ascontiguousarray(np.atleast_1d(np.asarray(dW, dtype=float)))
    if x.shape != (p.dim,) or dW.shape != (p.dim,):
        raise ValueError("x and dW must have shape (dim,)")
    if not np.all(np.isfinite(dW)):
        raise ValueError("dW must be finite")
    V = np.ascontiguousarray(np.atleast_2d(np.asarray(V, dtype=float)))
    a = problem_args(p)
    return _step_core(a[0], a[1], a[2], a[3], a[4], a[5], a[9], a[10], a[11],
                      scheme, x, dW, V, h)


def em_step(p: Problem, x, dW, h: float) -> np.ndarray:
    """``wrap(x + b(x) h + sigma(x) dW)``."""
    return _call_step(p, EM, x, dW, np.zeros((1, 1)), h)


def it2_step(p: Problem, x, dW, V=None, h: float = None) -> np.ndarray:
    """Second-order Ito-Taylor step.  ``V`` defaults to ``[[-h]]`` (the only
    value it takes in 1D); for ``dim >= 2`` it is ignored for constant noise."""
    if h is None:
        raise TypeError("h is required")
    if p.dim >= 2 and not p.constant_diffusion:
        raise ValueError("second-order scheme needs constant diffusion for dim >= 2")
    if V is None:
        V = -h * np.eye(p.dim)
    return _call_step(p, IT2, x, dW, V, h)


@dataclass
class SchemeCoefficients:
    b: np.ndarray
    jac: np.ndarray
    hess: np.ndarray
    sigma: np.ndarray
    Kb: np.ndarray  # Kb[i, k] = K^k b^i
    Lb: np.ndarray
    Ksigma: float = 0.0  # 1D only
    Lsigma: float = 0.0


def scheme_coefficients(p: Problem, x) -> SchemeCoefficients:
    """Coefficients and operator applications entering the second-order step."""
    x = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))
    d = p.dim
    b, J, H, S = p.b(x), p.jac(x), p.hess(x), p.sigma(x)
    Kb = J @ S
    A = S @ S.T
    Lb = J @ b + 0.5 * np.einsum("jl,ijl->i", A, H)
    ks = ls = 0.0
    if d == 1 and not p.constant_diffusion:
        s, s1, s2 = p.sigma_derivs(x)
        ks = s * s1
        ls = b[0] * s1 + 0.5 * s * s * s2
    return SchemeCoefficients(b, J, H, S, Kb, Lb, ks, ls)
