"""Command-line contract: exit codes, config resolution, artifact stability."""
import json
import os

import numpy as np
import pytest

from mfclt.cli import (
    EXIT_ASSERTION,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_PASS,
    ConfigError,
    dumps_json,
    main,
    parse_config,
    parse_law,
)
from mfclt.laws import Law, SamplerSpec


def run_cli(tmp_path, *args):
    return main([*args, "--out-dir", str(tmp_path)])


# ---------------------------------------------------------------------------
# config parsing


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        parse_config(["clt", "run", "--functional", "linear-mean"])


def test_unknown_functional_lists_registry():
    with pytest.raises(ConfigError, match="linear-square"):
        parse_config(["clt", "run", "--functional", "zzz", "--seed", "1"])


def test_unknown_model_lists_registry():
    with pytest.raises(ConfigError, match="mean-revert"):
        parse_config(["meanfield", "run", "--model", "zzz", "--seed", "1"])


def test_unsorted_n_grid_rejected():
    with pytest.raises(ConfigError, match="increasing"):
        parse_config(["clt", "scaling", "--functional", "mean-square",
                      "--n-grid", "1000,100", "--seed", "1"])


def test_quantile_functional_parses():
    cfg = parse_config(["clt", "run", "--functional", "quantile:0.5",
                        "--seed", "3"])
    assert cfg.functional == "quantile:0.5"


def test_ini_file_with_flag_override(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(
        "[experiment]\nkind = clt\nseed = 5\nn = 400\nreps = 50\n"
        "functional = linear-mean\n\n[law]\nspec = uniform:0,1\n")
    cfg = parse_config(["clt", "run", "--config", str(ini)])
    assert cfg.seed == 5 and cfg.n == 400 and cfg.law == "uniform:0,1"
    over = parse_config(["clt", "run", "--config", str(ini), "--n", "999"])
    assert over.n == 999 and over.reps == 50


def test_parse_law_variants(tmp_path):
    assert isinstance(parse_law("normal:1,2"), SamplerSpec)
    assert isinstance(parse_law("uniform:-1,1"), SamplerSpec)
    atoms = tmp_path / "atoms.txt"
    from mfclt.measures import DiscreteMeasure
    mu = DiscreteMeasure(np.array([[0.0], [2.0]]), np.array([0.5, 0.5]))
    atoms.write_text(mu.to_text())
    spec = parse_law(f"atoms:{atoms}")
    assert spec.kind == "atoms"
    with pytest.raises(ConfigError):
        parse_law("gamma:1,2")
    with pytest.raises(ConfigError):
        parse_law("normal:a,b")
    with pytest.raises(ConfigError):
        parse_law("atoms:/no/such/file")


# ---------------------------------------------------------------------------
# JSON serialization


def test_dumps_json_17_digits_and_nonfinite_null():
    text = dumps_json({"x": 1.0 / 3.0, "bad": float("nan"),
                       "inf": float("inf"), "arr": np.array([1.5, 2.5])})
    assert "0.33333333333333331" in text
    assert text.count("null") == 2
    parsed = json.loads(text)
    assert parsed["x"] == 1.0 / 3.0
    assert parsed["bad"] is None and parsed["inf"] is None
    assert parsed["arr"] == [1.5, 2.5]


def test_dumps_json_escapes_strings():
    text = dumps_json({"s": 'a"b\\c'})
    assert json.loads(text)["s"] == 'a"b\\c'


# ---------------------------------------------------------------------------
# end-to-end runs and exit codes


def test_clt_run_passes_and_writes_artifacts(tmp_path):
    code = run_cli(tmp_path, "clt", "run", "--functional", "linear-square",
                   "--law", "normal:0,1", "--n", "1000", "--reps", "300",
                   "--seed", "7", "--out", "r.json")
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["ks_pvalue"] > 0.01
    assert report["sigma2_theory"] == pytest.approx(2.0, rel=1e-3)
    csv = (tmp_path / "r.csv").read_text().splitlines()
    assert csv[0] == "sqrtN_deltaU"
    assert len(csv) == 301
    manifest = json.loads((tmp_path / "r.manifest.json").read_text())
    assert manifest["status"] == "done"
    assert manifest["checks"]["ks_pvalue_gt_0.01"] is True
    assert manifest["artifact_version"]
    assert manifest["wall_time_s"] is not None
    assert manifest["config"]["seed"] == 7


def test_repeat_runs_byte_identical(tmp_path):
    args = ("clt", "run", "--functional", "linear-mean", "--law",
            "uniform:0,1", "--n", "500", "--reps", "100", "--seed", "9")
    assert run_cli(tmp_path, *args, "--out", "a.json") == EXIT_PASS
    assert run_cli(tmp_path, *args, "--out", "b.json") == EXIT_PASS
    a = (tmp_path / "a.json").read_text().replace("a.csv", "x.csv")
    b = (tmp_path / "b.json").read_text().replace("b.csv", "x.csv")
    assert a == b
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_config_error_exit_code(tmp_path):
    assert run_cli(tmp_path, "clt", "run", "--functional", "zzz",
                   "--seed", "1") == EXIT_CONFIG
    assert run_cli(tmp_path, "clt", "run", "--functional", "linear-mean",
                   "--law", "normal:0,oops", "--seed", "1") == EXIT_CONFIG


def test_assertion_failure_exit_code(tmp_path):
    # one-point Gauss-Legendre cannot integrate a quartic s-profile
    code = run_cli(tmp_path, "clt", "decompose", "--functional",
                   "cube-of-second-moment", "--law", "normal:0,1",
                   "--n", "150", "--reps", "10", "--quad-points", "1",
                   "--seed", "1", "--out", "d.json")
    assert code == EXIT_ASSERTION
    manifest = json.loads((tmp_path / "d.manifest.json").read_text())
    assert manifest["status"] == "assertion-failure"
    assert manifest["checks"]["identity_residual_lt_1e-8"] is False


def test_numeric_failure_exit_code(tmp_path):
    # ou claims no hypothesis flags, so the strict gate refuses to run
    code = run_cli(tmp_path, "meanfield", "run", "--model", "ou",
                   "--phi", "linear-mean", "--no-force", "--n", "50",
                   "--reps", "10", "--seed", "1", "--out", "m.json")
    assert code == EXIT_NUMERIC
    manifest = json.loads((tmp_path / "m.manifest.json").read_text())
    assert manifest["status"] == "numeric-failure"
    assert "error" in manifest["checks"]


def test_scaling_run(tmp_path):
    code = run_cli(tmp_path, "clt", "scaling", "--functional", "mean-square",
                   "--law", "normal:0,1", "--n-grid", "100,316,1000",
                   "--reps", "60", "--seed", "2", "--out", "s.json")
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "s.json").read_text())
    assert report["slope"] <= -0.5
    assert report["r2"] > 0.9


def test_derivcheck_run(tmp_path):
    code = run_cli(tmp_path, "derivcheck", "--seed", "3", "--probes", "10",
                   "--out", "dc.json")
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "dc.json").read_text())
    assert report["max_rel_gap"] < 1e-6
    assert "quantile:0.5" in report["per_functional"]


def test_metrics_check_run(tmp_path):
    code = run_cli(tmp_path, "metrics", "check", "--seed", "3",
                   "--out", "met.json")
    assert code == EXIT_PASS


def test_meanfield_run_small(tmp_path):
    code = run_cli(tmp_path, "meanfield", "run", "--model", "ou",
                   "--phi", "linear-mean", "--n", "200", "--reps", "150",
                   "--times", "0.5", "--seed", "7", "--out", "mf.json")
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "mf.json").read_text())
    assert report["hypothesis_gate"].startswith("forced")
    assert len(report["cramer_wold"]) >= 1
    csv = (tmp_path / "mf.csv").read_text().splitlines()
    assert csv[0] == "F_t0.5"
    assert len(csv) == 151


def test_env_var_out_dir(tmp_path, monkeypatch):
    target = tmp_path / "redirected"
    monkeypatch.setenv("MFCLT_OUT_DIR", str(target))
    code = main(["clt", "run", "--functional", "linear-mean", "--law",
                 "normal:0,1", "--n", "200", "--reps", "30", "--seed", "1",
                 "--out", "e.json"])
    assert code == EXIT_PASS
    assert (target / "e.json").exists()
