"""Command line interface.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 inconclusive fit.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import estimators as est
from . import harness, oracle
from .model import REGISTRY, get_problem, validate_problem

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INCONCLUSIVE = 0, 1, 2, 3


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _plan_args(sp: argparse.ArgumentParser, grids: bool = True) -> None:
    sp.add_argument("--config", help="key=value file with plan fields")
    sp.add_argument("--problem", choices=sorted(REGISTRY))
    sp.add_argument("--scheme", choices=["em", "it2"])
    sp.add_argument("--estimator", choices=list(harness.ESTIMATORS))
    sp.add_argument("--centering", choices=[c.value for c in est.Centering])
    sp.add_argument("--T", type=float, dest="T")
    sp.add_argument("--burn-in", type=float, dest="burn_in")
    sp.add_argument("--replicas", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--grid", type=int, dest="grid_M", help="oracle grid size M")
    if grids:
        sp.add_argument("--h-grid", type=_floats, dest="h_grid", help="comma separated, decreasing")
    _out_args(sp)


def _out_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--out", help="write CSV here instead of stdout")
    sp.add_argument("--plot-data", action="store_true", help="emit x,y,yerr triples")
    sp.add_argument("--timing", action="store_true", help="include wall_time_s")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clrsens", description="CLR linear-response estimators for SDEs on the torus")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("estimate", help="one estimate at a single time step")
    _plan_args(sp, grids=False)
    sp.add_argument("--h", type=float)

    sp = sub.add_parser("sweep", help="estimates over a decreasing h grid, with a rate fit")
    _plan_args(sp)
    sp.add_argument("--fit", action="store_true", help="fit the error slope (exit 3 if inconclusive)")

    sp = sub.add_parser("variance-scan", help="CLR and LR variance against the horizon T")
    _plan_args(sp, grids=False)
    sp.add_argument("--h", type=float)
    sp.add_argument("--T-grid", type=_floats, dest="T_grid")

    sp = sub.add_parser("oracle", help="spectral reference response and residuals")
    sp.add_argument("--problem", choices=sorted(REGISTRY), default="cosine1d")
    sp.add_argument("--grid", type=int, default=0)
    sp.add_argument("--fd-eps", type=float, default=1e-3)
    _out_args(sp)

    sub.add_parser("selftest", help="fast consistency checks of the installed package")
    return ap


def _plan(ns, **extra) -> harness.ExperimentPlan:
    cfg = {}
    if getattr(ns, "config", None):
        with open(ns.config) as fh:
            cfg = harness.parse_config(fh.read())
    keys = ["problem", "scheme", "estimator", "centering", "T", "burn_in", "replicas", "seed",
            "workers", "grid_M", "h_grid", "T_grid"]
    over = {k: getattr(ns, k, None) for k in keys}
    over.update(extra)
    return harness.plan_from(cfg, **over)


def _emit(text: str, ns) -> None:
    if getattr(ns, "out", None):
        with open(ns.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _meta(plan: harness.ExperimentPlan) -> dict:
    rho, mu = harness.oracle_values(plan.problem, plan.grid_M)
    return {"problem": plan.problem, "seed": plan.seed, "burn_in": plan.burn_in,
            "oracle_rho": rho, "oracle_mu_theta": mu}


def cmd_estimate(ns) -> int:
    plan = _plan(ns)
    h = ns.h if ns.h is not None else plan.h_grid[-1]
    plan = harness.replace(plan, h_grid=(h,))
    rows = harness.run_sweep(plan)
    _emit(harness.rows_to_csv(rows, ns.timing, ns.plot_data, _meta(plan)), ns)
    return EXIT_NUMERICAL if any(r.error for r in rows) else EXIT_OK


def cmd_sweep(ns) -> int:
    plan = _plan(ns)
    rows = harness.run_sweep(plan)
    _emit(harness.rows_to_csv(rows, ns.timing, ns.plot_data, _meta(plan)), ns)
    if ns.fit:
        fit = harness.fit_rate(rows)
        print(f"# slope={fit.slope!r} stderr={fit.stderr_slope!r} used={fit.used} excluded={fit.excluded}",
              file=sys.stderr)
        if not fit.conclusive:
            return EXIT_INCONCLUSIVE
    return EXIT_NUMERICAL if any(r.error for r in rows) else EXIT_OK


def cmd_variance_scan(ns) -> int:
    plan = _plan(ns)
    rows = harness.variance_scan(plan, ns.h)
    _emit(harness.rows_to_csv(rows, ns.timing, ns.plot_data), ns)
    return EXIT_OK


def cmd_oracle(ns) -> int:
    rep = oracle.oracle_report(get_problem(ns.problem), ns.grid, ns.fd_eps)
    if ns.plot_data:
        g = oracle.SpectralGrid(get_problem(ns.problem).dim, ns.grid)
        f = oracle.stationary_density(get_problem(ns.problem), g)
        lines = ["x,y,yerr"] + [f"{x!r},{v!r},0.0" for x, v in zip(g.points[:, 0], f)]
        _emit("\n".join(lines) + "\n", ns)
        return EXIT_OK
    keys = list(rep)
    _emit(",".join(keys) + "\n" + ",".join(harness._fmt(rep[k]) for k in keys) + "\n", ns)
    return EXIT_OK


def cmd_selftest(ns) -> int:
    for name in sorted(REGISTRY):
        rep = validate_problem(get_problem(name))
        if not rep.ok:
            print(f"FAIL validate {name}: {rep.failures}")
            return EXIT_VALIDATION
    for name in ("cosine1d", "const1d"):
        r = oracle.oracle_report(get_problem(name))
        if abs(r["rho"] - r["rho_fd"]) > 1e-5 * max(1.0, abs(r["rho"])):
            print(f"FAIL oracle {name}: rho={r['rho']} rho_fd={r['rho_fd']}")
            return EXIT_NUMERICAL
    p = get_problem("cosine1d")
    ens = est.run_ensemble(p, "it2", est.WEIGHT_Y, 0.01, 2.0, 0.0, 256, seed=1)
    for e in ("clr1", "clr2"):
        if not math.isfinite(est.aggregate(ens, e).estimate):
            print(f"FAIL estimator {e}")
            return EXIT_NUMERICAL
    if not np.all(ens.take(slice(0, 4)).alpha == ens.alpha[:4]):
        return EXIT_NUMERICAL
    print("selftest ok")
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "variance-scan": cmd_variance_scan,
    "oracle": cmd_oracle,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return COMMANDS[ns.command](ns)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (oracle.OracleError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
