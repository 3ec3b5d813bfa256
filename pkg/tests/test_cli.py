import csv
import io

import pytest

from clrsens import cli
from clrsens import harness as H

TINY = ["--problem", "cosine1d", "--T", "1", "--burn-in", "0.5", "--replicas", "200", "--seed", "4"]


def test_oracle_command(capsys):
    assert cli.main(["oracle", "--problem", "cosine1d", "--grid", "64"]) == cli.EXIT_OK
    rec = next(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(rec["rho"]) == pytest.approx(-0.11582426280561994, abs=1e-10)


def test_oracle_plot_data(capsys):
    assert cli.main(["oracle", "--problem", "const1d", "--grid", "8", "--plot-data"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x,y,yerr" and len(lines) == 9


def test_estimate_command_writes_csv(tmp_path):
    out = tmp_path / "est.csv"
    code = cli.main(["estimate", *TINY, "--scheme", "em", "--estimator", "clr1", "--h", "0.05",
                     "--out", str(out)])
    assert code == cli.EXIT_OK
    text = out.read_text()
    assert text.startswith("# problem=cosine1d")
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    assert len(rows) == 1 and float(rows[0]["h"]) == 0.05


def test_sweep_output_reproducible(capsys):
    args = ["sweep", *TINY, "--scheme", "it2", "--estimator", "clr2", "--h-grid", "0.05,0.025"]
    assert cli.main(args) == cli.EXIT_OK
    first = capsys.readouterr().out
    assert cli.main(args + ["--workers", "2"]) == cli.EXIT_OK
    assert capsys.readouterr().out == first


def test_sweep_inconclusive_fit(capsys):
    args = ["sweep", *TINY, "--scheme", "em", "--h-grid", "0.05,0.025", "--fit"]
    assert cli.main(args) == cli.EXIT_INCONCLUSIVE
    assert "slope=" in capsys.readouterr().err


def test_validation_errors(capsys):
    assert cli.main(["sweep", *TINY, "--h-grid", "0.01,0.02"]) == cli.EXIT_VALIDATION
    assert cli.main(["estimate", *TINY, "--replicas", "0"]) == cli.EXIT_VALIDATION
    assert cli.main(["estimate", "--config", "/nonexistent/plan.cfg"]) == cli.EXIT_VALIDATION
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["estimate", "--scheme", "rk4"])


def test_config_file_with_override(tmp_path, capsys):
    cfg = tmp_path / "plan.cfg"
    cfg.write_text("scheme = em\nestimator = lr\nreplicas = 50\nT = 1\nburn_in = 0\n")
    assert cli.main(["estimate", "--config", str(cfg), "--replicas", "60", "--h", "0.1"]) == cli.EXIT_OK
    rec = next(csv.DictReader(l for l in capsys.readouterr().out.splitlines() if not l.startswith("#")))
    assert rec["estimator"] == "lr" and rec["replicas"] == "60"


def test_numerical_failure_exit_code(monkeypatch, capsys):
    def boom(*a, **k):
        raise H.oracle.OracleError("singular")

    monkeypatch.setattr(H.oracle, "oracle_report", boom)
    assert cli.main(["oracle"]) == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_variance_scan_command(capsys):
    args = ["variance-scan", *TINY, "--h", "0.05", "--T-grid", "1,2", "--plot-data"]
    assert cli.main(args) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x,y,yerr" and [float(l.split(",")[0]) for l in lines[1:]] == [1.0, 2.0]


def test_selftest(capsys):
    assert cli.main(["selftest"]) == cli.EXIT_OK
    assert "selftest ok" in capsys.readouterr().out
