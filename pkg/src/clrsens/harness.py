"""Experiment orchestration: h-sweeps, horizon scans, rate fits and CSV output."""

from __future__ import annotations

import csv
import functools
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from . import estimators as est
from . import oracle
from .integrators import SCHEMES
from .model import Problem, get_problem

ESTIMATORS = ("lr", "clr1", "clr2", "clr2-raw", "clr2-general")
DEFAULT_H_GRID = (0.08, 0.04, 0.02, 0.01, 0.005)
DEFAULT_T_GRID = (5.0, 10.0, 20.0, 50.0)


class InconclusiveFit(RuntimeError):
    pass


@dataclass
class ExperimentPlan:
    problem: str = "cosine1d"
    scheme: str = "em"
    estimator: str = "clr1"
    centering: str = "empirical"
    h_grid: tuple = DEFAULT_H_GRID
    T: float = 20.0
    burn_in: float = 100.0
    replicas: int = 200_000
    seed: int = 0
    grid_M: int = 0
    workers: int = 1
    T_grid: tuple = DEFAULT_T_GRID

    def validate(self) -> "ExperimentPlan":
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        est.Centering(self.centering)
        if self.replicas < 2:
            raise ValueError("replicas must be >= 2")
        hs = [float(h) for h in self.h_grid]
        if not hs or any(not h > 0 for h in hs):
            raise ValueError("h_grid must be a non-empty list of positive steps")
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ValueError("h_grid must be strictly decreasing")
        Ts = [float(t) for t in self.T_grid]
        if any(a >= b for a, b in zip(Ts, Ts[1:])):
            raise ValueError("T_grid must be strictly increasing")
        if not self.T > 0 or self.burn_in < 0:
            raise ValueError("need T > 0 and burn_in >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        get_problem(self.problem)
        return self


_LISTS = {"h_grid", "T_grid"}


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment, lists are comma separated."""
    types = {f.name: f.type for f in fields(ExperimentPlan)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def _coerce(key: str, val):
    if key in _LISTS:
        return tuple(float(v) for v in val.split(",") if v.strip())
    default = getattr(ExperimentPlan(), key)
    if isinstance(default, bool):
        return val.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val


def plan_from(config: dict | None = None, **overrides) -> ExperimentPlan:
    """Defaults, then ``config``, then the non-``None`` ``overrides``."""
    merged = dict(config or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentPlan(**merged).validate()


@functools.lru_cache(maxsize=None)
def oracle_values(problem: str, grid_M: int = 0) -> tuple[float, float]:
    """``(rho, mu_theta)`` from the spectral oracle, computed once per process."""
    p = get_problem(problem)
    ref = oracle.reference_solution(p, oracle.SpectralGrid(p.dim, grid_M))
    return ref.rho, ref.mu_theta


@dataclass
class SweepRow:
    problem: str
    scheme: str
    estimator: str
    centering: str
    h: float
    T: float
    N: int
    replicas: int
    estimate: float
    std_error: float
    variance: float
    oracle_ref: float
    abs_error: float
    wall_time_s: float = 0.0
    error: str = ""


def _row(plan: ExperimentPlan, estimator: str, h: float, N: int, summary, ref: float, wall: float) -> SweepRow:
    return SweepRow(plan.problem, plan.scheme, estimator, plan.centering, h, N * h, N, plan.replicas,
                    summary.estimate, summary.std_error, summary.variance, ref,
                    abs(summary.estimate - ref), wall)


def _failed_row(plan, estimator, h, N, ref, wall, exc) -> SweepRow:
    nan = float("nan")
    return SweepRow(plan.problem, plan.scheme, estimator, plan.centering, h, N * h, N, plan.replicas,
                    nan, nan, nan, ref, nan, wall, f"{type(exc).__name__}: {exc}")


def run_sweep_multi(plan: ExperimentPlan, estimators=None) -> dict[str, list[SweepRow]]:
    """One row per ``h`` for each estimator in ``estimators``; estimators that
    use the same weight process share a single ensemble (same keys, same
    trajectories)."""
    plan.validate()
    estimators = tuple(estimators or (plan.estimator,))
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}")
    p = get_problem(plan.problem)
    rho, mu = oracle_values(plan.problem, plan.grid_M)
    mu_c = mu if plan.centering == "oracle" else None
    groups: dict[int, list[str]] = {}
    for e in estimators:
        groups.setdefault(est.ESTIMATOR_WEIGHT[e], []).append(e)
    rows = {e: [] for e in estimators}
    for h in plan.h_grid:
        N = est.n_steps(plan.T, h)
        for weight, names in groups.items():
            t0 = time.perf_counter()
            try:
                ens = est.run_ensemble(p, plan.scheme, weight, h, plan.T, plan.burn_in, plan.replicas,
                                       plan.seed, plan.workers)
                wall = time.perf_counter() - t0
                for e in names:
                    s = est.aggregate(ens, e, plan.centering, mu_c)
                    rows[e].append(_row(plan, e, h, N, s, rho, wall))
            except (ValueError, ZeroDivisionError, FloatingPointError, ArithmeticError) as exc:
                wall = time.perf_counter() - t0
                for e in names:
                    rows[e].append(_failed_row(plan, e, h, N, rho, wall, exc))
    return rows


def run_sweep(plan: ExperimentPlan) -> list[SweepRow]:
    if plan.replicas < 1:
        raise ValueError("replicas must be >= 1")
    return run_sweep_multi(plan, (plan.estimator,))[plan.estimator]


@dataclass
class RateFit:
    slope: float
    intercept: float
    stderr_slope: float
    used: list = field(default_factory=list)  # h values entering the fit
    excluded: list = field(default_factory=list)  # h values dropped as noise dominated
    conclusive: bool = True

    def check(self) -> "RateFit":
        if not self.conclusive:
            raise InconclusiveFit(f"only {len(self.used)} rows resolve the bias above noise")
        return self


def fit_rate(rows, noise_factor: float = 3.0, min_rows: int = 3) -> RateFit:
    """Least-squares slope of ``log abs_error`` against ``log h`` over rows whose
    error exceeds ``noise_factor`` standard errors."""
    used, excluded = [], []
    for r in rows:
        if r.error or not math.isfinite(r.abs_error):
            excluded.append(r.h)
        elif r.abs_error > noise_factor * r.std_error and r.abs_error > 0:
            used.append(r)
        else:
            excluded.append(r.h)
    hs = [r.h for r in used]
    if len(used) < min_rows:
        return RateFit(float("nan"), float("nan"), float("nan"), hs, excluded, False)
    x = np.log([r.h for r in used])
    y = np.log([r.abs_error for r in used])
    res = stats.linregress(x, y)
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr), hs, excluded, True)


@dataclass
class VarianceRow:
    problem: str
    scheme: str
    estimator: str
    h: float
    T: float
    N: int
    replicas: int
    variance_clr: float
    variance_lr: float
    estimate_clr: float
    estimate_lr: float


def variance_scan(plan: ExperimentPlan, h: float | None = None) -> list[VarianceRow]:
    """Per-horizon variance of the CLR per-replica term and of the uncentered
    LR term, both computed from the same ensemble (hence the same keys)."""
    plan.validate()
    h = float(plan.h_grid[-1] if h is None else h)
    p = get_problem(plan.problem)
    weight = est.ESTIMATOR_WEIGHT[plan.estimator]
    clr_name = plan.estimator if plan.estimator != "lr" else "clr1"
    mu = oracle_values(plan.problem, plan.grid_M)[1] if plan.centering == "oracle" else None
    out = []
    for T in plan.T_grid:
        ens = est.run_ensemble(p, plan.scheme, weight, h, T, plan.burn_in, plan.replicas,
                               plan.seed, plan.workers)
        c = est.aggregate(ens, clr_name, plan.centering, mu)
        lr = est.aggregate_lr_uncentered(ens)
        out.append(VarianceRow(plan.problem, plan.scheme, clr_name, h, ens.T, ens.N, plan.replicas,
                               c.variance, lr.variance, c.estimate, lr.estimate))
    return out


@dataclass
class WeakRow:
    problem: str
    scheme: str
    h: float
    T: float
    N: int
    replicas: int
    estimate: float
    std_error: float
    variance: float
    oracle_ref: float
    abs_error: float
    error: str = ""


def weak_error_sweep(problem: str | Problem, scheme: str, h_grid, T: float = 1.0, replicas: int = 1_000_000,
                     seed: int = 0, workers: int = 1, grid_M: int = 0) -> list[WeakRow]:
    """Finite-horizon error ``|E theta(X_N) - E theta(X(T))|`` from a uniform
    start, against the oracle's Fokker-Planck evolution."""
    p = problem if isinstance(problem, Problem) else get_problem(problem)
    g = oracle.SpectralGrid(p.dim, grid_M)
    rows = []
    for h in h_grid:
        N = est.n_steps(T, h)
        ref = oracle.time_evolved_expectation(p, g, T=N * h)
        ens = est.simulate(p, scheme, est.WEIGHT_Z, h, 0, N, replicas, seed, workers)
        v = ens.theta_end
        m = math.fsum(v) / v.size
        var = math.fsum((v - m) ** 2) / (v.size - 1)
        rows.append(WeakRow(p.name, scheme, h, N * h, N, replicas, m, math.sqrt(var / v.size), var,
                            ref, abs(m - ref)))
    return rows


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, timing: bool = False, plot_data: bool = False, meta: dict | None = None) -> str:
    """Deterministic CSV text.  Wall times are omitted unless ``timing`` is set,
    so repeated runs of one plan are byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={_fmt(v)}\n")
    rows = list(rows)
    if plot_data:
        w.writerow(["x", "y", "yerr"])
        for r in rows:
            w.writerow([_fmt(x) for x in plot_triple(r)])
        return buf.getvalue()
    if not rows:
        return buf.getvalue()
    names = [k for k in asdict(rows[0]) if timing or k != "wall_time_s"]
    w.writerow(names)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[k]) for k in names])
    return buf.getvalue()


def plot_triple(r) -> tuple:
    if isinstance(r, VarianceRow):
        return r.T, r.variance_clr, r.variance_lr
    return r.h, r.abs_error, r.std_error


__all__ = [
    "ExperimentPlan", "SweepRow", "RateFit", "VarianceRow", "WeakRow", "InconclusiveFit",
    "parse_config", "plan_from", "oracle_values", "run_sweep", "run_sweep_multi", "fit_rate",
    "variance_scan", "weak_error_sweep", "rows_to_csv", "replace",
]
