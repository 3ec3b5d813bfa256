import csv
import io
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clrsens import estimators as E
from clrsens import harness as H
from clrsens import model as M
from clrsens import oracle as O


def _rows(hs, errs, ses):
    return [H.SweepRow("p", "em", "clr1", "empirical", h, 1.0, 1, 10, e, s, 0.0, 0.0, e)
            for h, e, s in zip(hs, errs, ses)]


@pytest.mark.parametrize("order", [1, 2])
def test_fit_rate_recovers_power_law(order):
    hs = [0.08, 0.04, 0.02, 0.01, 0.005]
    fit = H.fit_rate(_rows(hs, [3.0 * h**order for h in hs], [0.0] * 5))
    assert fit.conclusive and abs(fit.slope - order) <= 1e-12
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(p=st.floats(0.3, 3.0), c=st.floats(1e-3, 1e3))
def test_fit_rate_property(p, c):
    hs = [0.1, 0.05, 0.025, 0.0125]
    fit = H.fit_rate(_rows(hs, [c * h**p for h in hs], [0.0] * 4))
    assert fit.slope == pytest.approx(p, abs=1e-9)


def test_fit_rate_excludes_noise_dominated_rows():
    hs = [0.08, 0.04, 0.02, 0.01, 0.005]
    errs = [h for h in hs[:3]] + [0.002, 0.001]
    fit = H.fit_rate(_rows(hs, errs, [0.001] * 5))
    assert fit.used == [0.08, 0.04, 0.02] and fit.excluded == [0.01, 0.005]
    assert fit.slope == pytest.approx(1.0, abs=1e-12)


def test_fit_rate_inconclusive():
    hs = [0.08, 0.04, 0.02]
    fit = H.fit_rate(_rows(hs, [0.01, 0.001, 0.0001], [0.001] * 3))
    assert not fit.conclusive and math.isnan(fit.slope)
    with pytest.raises(H.InconclusiveFit):
        fit.check()


def test_fit_rate_skips_failed_rows():
    rows = _rows([0.08, 0.04, 0.02, 0.01], [0.08, 0.04, 0.02, 0.01], [0.0] * 4)
    rows[1].error = "ValueError: boom"
    fit = H.fit_rate(rows)
    assert 0.04 in fit.excluded and fit.slope == pytest.approx(1.0, abs=1e-12)


def test_plan_validation():
    H.ExperimentPlan().validate()
    bad = [
        {"replicas": 0}, {"replicas": 1}, {"h_grid": (0.01, 0.02)}, {"h_grid": (0.02, 0.02)},
        {"h_grid": ()}, {"h_grid": (0.1, -0.1)}, {"scheme": "rk4"}, {"estimator": "lr2"},
        {"centering": "median"}, {"T": 0.0}, {"burn_in": -1.0}, {"workers": 0},
        {"T_grid": (10.0, 5.0)},
    ]
    for kw in bad:
        with pytest.raises(ValueError):
            H.ExperimentPlan(**kw).validate()
    with pytest.raises(KeyError):
        H.ExperimentPlan(problem="nope").validate()


def test_parse_config_and_overrides():
    text = """
    # sweep settings
    problem = mult1d
    scheme = it2      # second order
    estimator = clr2
    h_grid = 0.04, 0.02,0.01
    replicas = 5000
    burn-in = 2.5
    """
    cfg = H.parse_config(text)
    assert cfg == {"problem": "mult1d", "scheme": "it2", "estimator": "clr2",
                   "h_grid": (0.04, 0.02, 0.01), "replicas": 5000, "burn_in": 2.5}
    plan = H.plan_from(cfg, replicas=100, seed=None)
    assert plan.replicas == 100 and plan.seed == 0 and plan.h_grid == (0.04, 0.02, 0.01)
    for text in ("nonsense", "colour = red", "replicas = many"):
        with pytest.raises(ValueError):
            H.parse_config(text)


SMALL = H.ExperimentPlan(problem="cosine1d", scheme="it2", estimator="clr2", h_grid=(0.04, 0.02),
                         T=2.0, burn_in=1.0, replicas=2000, seed=17)


def test_sweep_rows_consistent():
    rows = H.run_sweep(SMALL)
    rho, _ = H.oracle_values("cosine1d")
    assert [r.h for r in rows] == [0.04, 0.02]
    for r in rows:
        assert r.N == E.n_steps(2.0, r.h) and r.T == r.N * r.h
        assert r.oracle_ref == rho and r.abs_error == abs(r.estimate - rho)
        assert r.std_error == pytest.approx(math.sqrt(r.variance / r.replicas), rel=1e-12)
        assert not r.error


def test_csv_deterministic_and_parseable():
    a = H.rows_to_csv(H.run_sweep(SMALL))
    b = H.rows_to_csv(H.run_sweep(SMALL))
    assert a == b
    recs = list(csv.DictReader(io.StringIO(a)))
    assert "wall_time_s" not in recs[0]
    for r in recs:
        assert float(r["abs_error"]) == abs(float(r["estimate"]) - float(r["oracle_ref"]))
    assert "wall_time_s" in H.rows_to_csv(H.run_sweep(SMALL), timing=True)


def test_csv_meta_and_plot_data():
    rows = H.run_sweep(SMALL)
    text = H.rows_to_csv(rows, plot_data=True, meta={"seed": 17})
    lines = text.splitlines()
    assert lines[0] == "# seed=17" and lines[1] == "x,y,yerr"
    x, y, e = map(float, lines[2].split(","))
    assert (x, y, e) == (rows[0].h, rows[0].abs_error, rows[0].std_error)


def test_shared_ensembles_in_multi_sweep():
    res = H.run_sweep_multi(SMALL, ("clr2", "clr2-raw", "clr1"))
    single = H.run_sweep(SMALL)
    assert [r.estimate for r in res["clr2"]] == [r.estimate for r in single]
    ens = E.run_ensemble(M.cosine1d(), "it2", E.WEIGHT_Y, 0.04, 2.0, 1.0, 2000, seed=17)
    assert res["clr2-raw"][0].estimate == E.aggregate(ens, "clr2-raw").estimate
    # clr1 uses the plain weight, hence its own ensemble on the same keys
    ez = E.run_ensemble(M.cosine1d(), "it2", E.WEIGHT_Z, 0.04, 2.0, 1.0, 2000, seed=17)
    assert res["clr1"][0].estimate == E.aggregate(ez, "clr1").estimate


def test_failed_cell_recorded(monkeypatch):
    real = E.run_ensemble

    def flaky(p, scheme, weight, h, *a, **k):
        if h == 0.02:
            raise FloatingPointError("overflow in step")
        return real(p, scheme, weight, h, *a, **k)

    monkeypatch.setattr(E, "run_ensemble", flaky)
    rows = H.run_sweep(SMALL)
    assert not rows[0].error and "FloatingPointError" in rows[1].error
    assert math.isnan(rows[1].estimate)


def test_first_order_sweep_errors_decrease():
    plan = H.ExperimentPlan(problem="cosine1d", scheme="em", estimator="clr1",
                            h_grid=(0.08, 0.04, 0.02, 0.01), T=20.0, burn_in=20.0, replicas=50_000, seed=3)
    rows = H.run_sweep(plan)
    inversions = [(a, b) for a, b in zip(rows, rows[1:]) if b.abs_error > a.abs_error]
    assert len(inversions) <= 1
    for a, b in inversions:
        assert b.abs_error - a.abs_error <= 2 * math.hypot(a.std_error, b.std_error)


def test_variance_scan_zero_forcing(monkeypatch):
    monkeypatch.setitem(M.REGISTRY, "zeroforce", lambda: M.variant(M.cosine1d(), "zeroforce",
                                                                   forcing=M.zero_field))
    plan = H.ExperimentPlan(problem="zeroforce", scheme="it2", estimator="clr2", replicas=200,
                            burn_in=0.5, T_grid=(1.0, 2.0))
    rows = H.variance_scan(plan, h=0.02)
    assert [r.T for r in rows] == [1.0, 2.0]
    for r in rows:
        assert r.variance_clr == 0.0 and r.variance_lr == 0.0


def test_variance_scan_rows():
    plan = H.ExperimentPlan(problem="mult1d", scheme="em", estimator="clr1", replicas=500,
                            burn_in=1.0, T_grid=(1.0, 3.0), seed=2)
    rows = H.variance_scan(plan, h=0.02)
    assert [r.N for r in rows] == [50, 150]
    assert all(r.variance_clr > 0 and r.variance_lr > 0 for r in rows)
    assert H.plot_triple(rows[0]) == (rows[0].T, rows[0].variance_clr, rows[0].variance_lr)


def test_weak_error_sweep_rows():
    p = M.variant(M.cosine1d(), observable=M.cos_observable, observable_grad=M.cos_observable_grad)
    rows = H.weak_error_sweep(p, "it2", (0.05,), T=0.5, replicas=20_000, seed=1)
    r = rows[0]
    assert r.N == 10 and r.oracle_ref == pytest.approx(O.time_evolved_expectation(p, T=0.5), abs=1e-14)
    assert r.abs_error == abs(r.estimate - r.oracle_ref)
    assert r.std_error == pytest.approx(math.sqrt(r.variance / 20_000))


def test_worker_count_does_not_change_csv():
    texts = {H.rows_to_csv(H.run_sweep(H.replace(SMALL, workers=w))) for w in (1, 3)}
    assert len(texts) == 1
