"""Weight processes, replica simulation and CLR/LR aggregation."""

from __future__ import annotations

import enum
import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import general2 as g2
from .integrators import EM, IT2, SCHEMES, eval_coefficients, eval_diffusion, em_increment, it2_increment, problem_args
from .model import Problem, wrap_scalar
from .rng import normal_block, uniform_at

WEIGHT_Z = 0
WEIGHT_Y = 1
WEIGHT_GENERAL = 2


class Centering(str, enum.Enum):
    EMPIRICAL = "empirical"
    ORACLE = "oracle"
    OPTIMAL = "optimal"


def n_steps(T: float, h: float) -> int:
    """``floor(T / h)``, tolerant to the rounding of ``T / h`` itself."""
    if not h > 0 or T < 0:
        raise ValueError("need h > 0 and T >= 0")
    return int(math.floor(T / h + 1e-9))


# ---------------------------------------------------------------------------
# numba kernel


@functools.lru_cache(maxsize=None)
def _kernel(scheme: int, weight: int, d: int, const: bool):
    """Replica loop specialised on the scheme, the weight process, the
    dimension and the noise type (all compile-time constants)."""
    full = scheme == IT2 or weight >= WEIGHT_Y

    @nb.njit(nogil=True)
    def run(drift, jac, hess, sig, dsig, d2sig, forcing, obs, obs_grad, Smat, Sinv,
            c0, c1, c2, closed, use_closed, nodes, weights,
            seed_word, replica_start, count, h, n_burn, n_acc,
            init_mode, x0, alpha, beta, zN, g1, g2t, g2s, tend):
        x = np.empty(d)
        b = np.empty(d)
        J = np.zeros((d, d))
        H = np.zeros((d, d, d))
        S = np.empty((d, d))
        Si = np.empty((d, d))
        Kb = np.zeros((d, d))
        Lb = np.zeros(d)
        sd = np.zeros(5)
        Fv = np.empty(d)
        U = np.empty(d)
        gt = np.empty(d)
        w = np.empty(d)
        dW = np.empty(d)
        inc = np.empty(d)
        V = np.empty((d, d))
        buf = np.empty(4)
        coef = np.empty(g2.N_COEF)
        mom = np.empty(g2.N_MOM)
        sqh = math.sqrt(h)
        inv_n = 1.0 / n_acc

        for r in range(count):
            rep = replica_start + r
            k1 = np.uint64(rep)
            if init_mode == 1:
                for i in range(d):
                    x[i] = uniform_at(seed_word, k1, i, 2)
            else:
                for i in range(d):
                    x[i] = x0[i]
            for a in range(d):
                for c in range(d):
                    V[a, c] = 0.0
                V[a, a] = -h
            z = 0.0
            sa = 0.0
            sb = 0.0
            s1 = 0.0
            s2t = 0.0
            s2 = 0.0
            block = -1
            total = n_burn + n_acc
            for n in range(total):
                gi = n * d
                for k in range(d):
                    bi = (gi + k) >> 2
                    if bi != block:
                        normal_block(seed_word, k1, bi, 0, buf)
                        block = bi
                    dW[k] = sqh * buf[(gi + k) & 3]

                if full:
                    eval_coefficients(drift, jac, hess, sig, dsig, d2sig, const, Smat, Sinv,
                                      x, b, J, H, S, Si, Kb, Lb, sd)
                else:
                    eval_diffusion(sig, dsig, const, Smat, Sinv, x, S, Si, sd)
                    drift(x, b)
                if not const and sd[0] == 0.0:
                    raise ZeroDivisionError("diffusion coefficient vanishes on the trajectory")

                if n >= n_burn:
                    th = obs(x)
                    sa += th
                    forcing(x, Fv)
                    for i in range(d):
                        acc = 0.0
                        for j in range(d):
                            acc += Si[i, j] * Fv[j]
                        U[i] = acc
                    if weight == 0:
                        for i in range(d):
                            z += U[i] * dW[i]
                    else:
                        obs_grad(x, gt)
                        acc = 0.0
                        for i in range(d):
                            acc += gt[i] * Fv[i]
                        sb += acc
                        if weight == 1:
                            if d == 1:
                                z += U[0] * (dW[0] + 0.5 * (Kb[0, 0] - sd[2]) * Si[0, 0] * dW[0] * h)
                            else:
                                for i in range(d):
                                    acc = 0.0
                                    for j in range(d):
                                        acc += Si[j, i] * dW[j]
                                    w[i] = acc
                                acc = 0.0
                                for i in range(d):
                                    kbu = 0.0
                                    for k in range(d):
                                        kbu += Kb[i, k] * U[k]
                                    acc += kbu * w[i]
                                for i in range(d):
                                    z += U[i] * dW[i]
                                z += 0.5 * h * acc
                        else:
                            g2.fill_coef_1d(b, J, H, sd, Kb, Lb, coef)
                            g2.eval_moments(c0, c1, c2, closed, use_closed, coef, nodes, weights, mom)
                            F0 = Fv[0]
                            d1 = g2.d1_from(mom, coef, F0)
                            d2 = g2.d2_from(mom, coef, F0, d1)
                            m = g2.gamma_slope(mom, coef, F0, d1, d2)
                            if m != m:
                                raise ValueError("gamma equation unsatisfiable (F = 0, nonzero right side)")
                            z += U[0] * (dW[0] + m * dW[0] * h)
                            s1 += d1 * gt[0]
                            s2t += d2 * th
                            s2 += d2

                if scheme == EM:
                    em_increment(b, S, dW, h, inc)
                else:
                    it2_increment(b, S, Kb, Lb, sd, const, dW, V, h, inc)
                for i in range(d):
                    x[i] = wrap_scalar(x[i] + inc[i])

            alpha[r] = sa * inv_n
            beta[r] = sb * inv_n
            zN[r] = z
            g1[r] = s1 * inv_n
            g2t[r] = s2t * inv_n
            g2s[r] = s2 * inv_n
            tend[r] = obs(x)

    return run


# ---------------------------------------------------------------------------
# Python-facing single updates


def _U(p: Problem, x) -> np.ndarray:
    S = p.sigma(x)
    if p.constant_diffusion:
        return p.diffusion.inverse @ p.F(x)
    if S[0, 0] == 0.0:
        raise ZeroDivisionError(f"singular diffusion at x={np.atleast_1d(x).tolist()}")
    return p.F(x) / S[0, 0]


def z_update(p: Problem, x, dW, z: float) -> float:
    """``z + (sigma(x)^{-1} F(x))^T dW``."""
    return float(z + _U(p, x) @ np.atleast_1d(dW))


def y_update(p: Problem, x, dW, y: float, h: float) -> float:
    """Second-order weight increment (scalar noise in 1D, constant noise otherwise)."""
    from .integrators import scheme_coefficients

    if p.dim >= 2 and not p.constant_diffusion:
        raise ValueError("modified weight needs constant diffusion for dim >= 2")
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    U = _U(p, x)
    sc = scheme_coefficients(p, x)
    if p.dim == 1:
        s = sc.sigma[0, 0]
        return float(y + U[0] * (dW[0] + 0.5 * (-sc.Lsigma + sc.Kb[0, 0]) / s * dW[0] * h))
    w = np.linalg.solve(sc.sigma.T, dW)
    return float(y + U @ (dW + 0.5 * h * sc.Kb.T @ w))


# ---------------------------------------------------------------------------
# Ensembles


ESTIMATOR_WEIGHT = {
    "lr": WEIGHT_Z,
    "clr1": WEIGHT_Z,
    "clr2": WEIGHT_Y,
    "clr2-raw": WEIGHT_Y,
    "clr2-general": WEIGHT_GENERAL,
}


@dataclass
class ReplicaPlan:
    scheme: str
    estimator: str
    h: float
    n_burn: int
    n_steps: int
    seed: int = 0
    replica: int = 0


@dataclass
class ReplicaResult:
    alpha: float
    beta: float
    zN: float
    g1: float = 0.0
    g2t: float = 0.0
    g2: float = 0.0


@dataclass
class Ensemble:
    """Per-replica results, indexed by replica."""

    alpha: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    h: float
    T: float
    N: int
    scheme: str
    weight: int
    seed: int
    g1: np.ndarray = field(default=None)
    g2t: np.ndarray = field(default=None)
    g2: np.ndarray = field(default=None)
    theta_end: np.ndarray = field(default=None)  # theta(X_N) after the last step

    @property
    def s(self) -> int:
        return self.alpha.shape[0]

    def take(self, idx) -> "Ensemble":
        sel = lambda a: None if a is None else a[idx]
        return Ensemble(self.alpha[idx], self.beta[idx], self.z[idx], self.h, self.T, self.N,
                        self.scheme, self.weight, self.seed, sel(self.g1), sel(self.g2t), sel(self.g2),
                        sel(self.theta_end))


def _check_compat(p: Problem, scheme: str, weight: int) -> None:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if p.dim >= 2 and not p.constant_diffusion and (scheme == "it2" or weight >= WEIGHT_Y):
        raise ValueError("second-order scheme/weights need constant diffusion for dim >= 2")
    if weight == WEIGHT_GENERAL and p.dim != 1:
        raise ValueError("the general second-order construction is one-dimensional")


def run_ensemble(
    p: Problem,
    scheme: str,
    weight: int,
    h: float,
    T: float,
    burn_in: float,
    replicas: int,
    seed: int = 0,
    workers: int = 1,
    x0=None,
    expansion: g2.SchemeExpansion | None = None,
    first_replica: int = 0,
) -> Ensemble:
    """Simulate ``replicas`` independent trajectories of ``floor(T/h)``
    accumulation steps after ``floor(burn_in/h)`` burn-in steps.

    Replica ``i`` is driven by the keyed stream ``(seed, first_replica + i)``;
    results do not depend on ``workers``.  Without ``x0`` the initial state is
    uniform on the torus.
    """
    n_burn = n_steps(burn_in, h) if burn_in > 0 else 0
    return simulate(p, scheme, weight, h, n_burn, n_steps(T, h), replicas, seed, workers,
                    x0, expansion, first_replica)


def simulate(p: Problem, scheme: str, weight: int, h: float, n_burn: int, N: int, replicas: int,
             seed: int = 0, workers: int = 1, x0=None, expansion: g2.SchemeExpansion | None = None,
             first_replica: int = 0, chunk: int | None = None) -> Ensemble:
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if N < 1:
        raise ValueError("need at least one accumulation step")
    if not h > 0:
        raise ValueError("time step must be positive")
    _check_compat(p, scheme, weight)
    args = problem_args(p)
    kern = _kernel(SCHEMES[scheme], weight, p.dim, p.constant_diffusion)
    pargs = args[:9] + args[10:]
    se = expansion if expansion is not None else g2.it2_expansion()
    gargs = se.kernel_args()
    if x0 is None:
        init_mode, xinit = 1, np.zeros(p.dim)
    else:
        init_mode, xinit = 0, np.ascontiguousarray(np.atleast_1d(np.asarray(x0, dtype=float)))
    out = [np.zeros(replicas) for _ in range(7)]
    seed_word = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    if chunk is None:
        # several chunks per worker; each replica is computed independently of
        # the chunking, so this only affects scheduling
        chunk = max(256, min(16384, -(-replicas // (4 * max(1, workers)))))

    def work(lo: int, hi: int) -> None:
        kern(*pargs, *gargs, seed_word, first_replica + lo, hi - lo, h,
             n_burn, N, init_mode, xinit, *(a[lo:hi] for a in out))

    bounds = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    if workers <= 1:
        for lo, hi in bounds:
            work(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: work(*b), bounds))
    alpha, beta, z, a1, a2t, a2, tend = out
    return Ensemble(alpha, beta, z, h, N * h, N, scheme, weight, seed, a1, a2t, a2, tend)


def run_replica(p: Problem, plan: ReplicaPlan, x0=None) -> ReplicaResult:
    """One trajectory of ``plan.n_burn`` burn-in and ``plan.n_steps`` accumulation steps."""
    ens = simulate(p, plan.scheme, ESTIMATOR_WEIGHT[plan.estimator], plan.h, plan.n_burn,
                   plan.n_steps, 1, plan.seed, x0=x0, first_replica=plan.replica)
    return ReplicaResult(float(ens.alpha[0]), float(ens.beta[0]), float(ens.z[0]),
                         float(ens.g1[0]), float(ens.g2t[0]), float(ens.g2[0]))


# ---------------------------------------------------------------------------
# Aggregation


@dataclass
class EstimateSummary:
    estimate: float
    std_error: float
    variance: float
    s: int
    h: float
    T: float
    centering: str
    center: float = float("nan")
    fallback: bool = False
    estimator: str = ""


def _mean(a: np.ndarray) -> float:
    return math.fsum(a) / a.shape[0]


def _cov(a: np.ndarray, b: np.ndarray) -> float:
    # population covariance, as in the optimal-centering formula
    return _mean(a * b) - _mean(a) * _mean(b)


def _summary(terms: np.ndarray, h: float, T: float, centering: str, center: float,
             fallback: bool, name: str) -> EstimateSummary:
    s = terms.shape[0]
    est = _mean(terms)
    var = math.fsum((terms - est) ** 2) / (s - 1)
    return EstimateSummary(est, math.sqrt(var / s), var, s, h, T, centering, center, fallback, name)


def empirical_center(alpha: np.ndarray) -> float:
    """Sample mean computed as ``min + mean(alpha - min)``: order invariant and
    exactly equal to the common value when all entries coincide."""
    ref = float(np.min(alpha))
    return ref + _mean(alpha - ref)


def _as_ensemble(results) -> Ensemble:
    if isinstance(results, Ensemble):
        return results
    results = list(results)
    col = lambda k: np.array([getattr(r, k) for r in results], dtype=float)
    return Ensemble(col("alpha"), col("beta"), col("zN"), float("nan"), float("nan"), 0, "", -1, 0,
                    col("g1"), col("g2t"), col("g2"))


def aggregate_clr(results, order: int, h: float | None = None, centering: str = "empirical",
                  mu: float | None = None, correction: bool = True, general: bool = False) -> EstimateSummary:
    """Centered estimator ``mean((alpha - c) z)`` plus, for ``order == 2``, the
    ``(h/2) mean(beta)`` correction (or the general-construction correction)."""
    ens = _as_ensemble(results)
    s = ens.s
    if s < 2:
        raise ValueError("need at least two replicas")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    h = ens.h if h is None else h
    centering = Centering(centering).value
    alpha, z = ens.alpha, ens.z
    fallback = False
    if centering == "oracle":
        if mu is None:
            raise ValueError("oracle centering needs mu")
        c = float(mu)
    elif centering == "optimal":
        vz = _cov(z, z)
        c = empirical_center(alpha)
        if vz == 0.0:
            fallback = True
        else:
            # offset from the sample mean: same value, better conditioned, and
            # exactly the common value when alpha is constant
            c = c + _cov((alpha - c) * z, z) / vz
    else:
        c = empirical_center(alpha)
    terms = (alpha - c) * z
    name = "clr1" if order == 1 else "clr2"
    if order == 2 and general:
        terms = terms + h * (ens.g1 + ens.g2t - c * ens.g2) - 0.5 * h * ens.beta
        name = "clr2-general"
    elif order == 2 and correction:
        terms = terms + 0.5 * h * ens.beta
    elif order == 2:
        name = "clr2-raw"
    return _summary(terms, h, ens.T, centering, c, fallback, name)


def aggregate_lr_uncentered(results) -> EstimateSummary:
    """Plain likelihood-ratio estimator ``mean(alpha z)``."""
    ens = _as_ensemble(results)
    if ens.s < 2:
        raise ValueError("need at least two replicas")
    return _summary(ens.alpha * ens.z, ens.h, ens.T, "none", 0.0, False, "lr")


def aggregate(ens: Ensemble, estimator: str, centering: str = "empirical", mu: float | None = None) -> EstimateSummary:
    """Dispatch on the estimator name used by the harness and CLI."""
    if estimator == "lr":
        return aggregate_lr_uncentered(ens)
    if estimator == "clr1":
        return aggregate_clr(ens, 1, centering=centering, mu=mu)
    if estimator == "clr2":
        return aggregate_clr(ens, 2, centering=centering, mu=mu)
    if estimator == "clr2-raw":
        return aggregate_clr(ens, 2, centering=centering, mu=mu, correction=False)
    if estimator == "clr2-general":
        return aggregate_clr(ens, 2, centering=centering, mu=mu, general=True)
    raise ValueError(f"unknown estimator {estimator!r}")
