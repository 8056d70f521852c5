#!/usr/bin/env python3
"""
Tests for config loading, the experiment pipeline, report writing, the CLI and the report reviewer
"""

import json
import os
import sys
import tempfile
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from unittest import mock

import pandas as pd
import pytest

from conftest import CANONICAL_CONFIG, W_HAT, run_script_tests
from experiment_pipeline import CheckRow, ExperimentPipeline, ExperimentReport, run, unique_path
from jumpex.errors import ConfigError, InputError
from jumpex.levy_model import CosineUField, MarketModel, ProportionalCoefficients
from jumpex.model_config import OUT_DIR_ENV, load_experiment_config
from jumpex.optimal_control import value_function
from main import EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, main
from report_reviewer import ReportReviewer


def canonical_raw():
    with open(CANONICAL_CONFIG, "rb") as f:
        return tomllib.load(f)


def write_json_config(directory, raw, name="config.json"):
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(raw, f)
    return path


def test_canonical_config_loads():
    config = load_experiment_config(CANONICAL_CONFIG, "hjb")
    assert config.model.dimension == 1
    assert config.problem.lam == 0.1 and config.problem.zhat == 1.4
    assert config.paths is None and config.steps is None
    assert config.n_grid == [16, 32, 64, 128, 256, 512, 1024]
    assert len(config.digest) == 16
    assert load_experiment_config(CANONICAL_CONFIG, "hjb").digest == config.digest
    assert load_experiment_config(CANONICAL_CONFIG, "hjb", seed=5).digest != config.digest
    header = config.header()
    assert header["experiment"] == "hjb" and header["config_digest"] == config.digest


def test_json_config_matches_toml():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_json_config(tmp, canonical_raw())
        config = load_experiment_config(path, "hjb", paths=100, steps=8)
        assert config.paths == 100 and config.steps == 8
        assert config.model.jumps.law == "atoms"


def test_config_errors_name_the_field():
    with tempfile.TemporaryDirectory() as tmp:
        raw = canonical_raw()
        raw["model"]["jumps"]["shape"] = 2.0
        with pytest.raises(ConfigError) as info:
            load_experiment_config(write_json_config(tmp, raw, "unknown.json"), "hjb")
        assert info.value.field == "model.jumps.shape"

        raw = canonical_raw()
        raw["problem"]["lambda"] = -1.0
        with pytest.raises(ConfigError) as info:
            load_experiment_config(write_json_config(tmp, raw, "lambda.json"), "hjb")
        assert info.value.field == "problem.lambda"

        raw = canonical_raw()
        raw["experiment"]["times"] = [0.5, 2.0]
        with pytest.raises(ConfigError) as info:
            load_experiment_config(write_json_config(tmp, raw, "times.json"), "hjb")
        assert info.value.field == "experiment.times"

        # Sigma = 0 without jumps and volatility
        raw = canonical_raw()
        raw["model"]["coefficients"]["a"] = [[0.0]]
        raw["model"]["jumps"] = {"law": "none", "intensity": 0.0}
        with pytest.raises(ConfigError) as info:
            load_experiment_config(write_json_config(tmp, raw, "singular.json"), "hjb")
        assert info.value.field == "model"

        yaml_path = os.path.join(tmp, "config.yaml")
        Path(yaml_path).write_text("model: {}\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_experiment_config(yaml_path, "hjb")
        with pytest.raises(ConfigError):
            load_experiment_config(os.path.join(tmp, "missing.toml"), "hjb")


def test_out_dir_precedence():
    with mock.patch.dict(os.environ, {OUT_DIR_ENV: "from-env"}):
        assert load_experiment_config(CANONICAL_CONFIG, "hjb").out_dir == "from-env"
        assert load_experiment_config(CANONICAL_CONFIG, "hjb", out_dir="from-cli").out_dir == "from-cli"
    with mock.patch.dict(os.environ, {}, clear=False):
        os.environ.pop(OUT_DIR_ENV, None)
        assert load_experiment_config(CANONICAL_CONFIG, "hjb").out_dir == "results"


def test_check_row_relations():
    assert CheckRow("a", 1.05, 1.0, 0.1).status
    assert not CheckRow("a", 1.2, 1.0, 0.1).status
    assert CheckRow("ge", 0.95, 1.0, 0.1, relation="ge").status
    assert not CheckRow("ge", 0.85, 1.0, 0.1, relation="ge").status
    assert CheckRow("le", 1.05, 1.0, 0.1, relation="le").status
    within = CheckRow.within("w", 1.3, 1.0, 0.1, 3.0)
    assert within.tolerance == pytest.approx(0.3) and within.se == 0.1 and within.status
    band = CheckRow.band("b", 1.5, 1.25, 1.65)
    assert band.exact and band.status
    assert not CheckRow.band("b", 1.7, 1.25, 1.65).status
    assert band.to_dict()["status"] == "PASS"
    with pytest.raises(InputError):
        CheckRow("x", 0.0, 0.0, 1.0, relation="gt")


def test_report_status():
    assert not ExperimentReport("empty", "d", {}).passed
    report = ExperimentReport("x", "d", {}, [CheckRow("a", 0.0, 0.0, 1.0), CheckRow("b", 5.0, 0.0, 1.0)])
    assert not report.passed
    assert [row.name for row in report.failing_rows] == ["b"]
    assert "wall_clock_seconds" in report.to_dict() and "wall_clock_seconds" not in report.body()


def test_unique_path_never_overwrites():
    with tempfile.TemporaryDirectory() as tmp:
        first = unique_path(tmp, "report", ".csv")
        assert first.name == "report.csv"
        first.write_text("x", encoding="utf-8")
        second = unique_path(tmp, "report", ".csv")
        assert second.name == "report_1.csv"
        second.write_text("y", encoding="utf-8")
        assert unique_path(tmp, "report", ".csv").name == "report_2.csv"


def test_hjb_suite_passes():
    config = load_experiment_config(CANONICAL_CONFIG, "hjb")
    report = run(config, quiet=True, write=False)
    assert report.passed
    assert len(report.rows) == 2
    table = report.artifacts["hjb_residual"]
    assert len(table) == 27 and table["residual"].abs().max() <= 1e-8


def test_value_check_uses_closed_form_multiplier():
    config = load_experiment_config(CANONICAL_CONFIG, "value-check", paths=2000, steps=16)
    pipeline = ExperimentPipeline(config, quiet=True)
    ab = pipeline._alpha_beta()
    assert ab.w_hat == pytest.approx(W_HAT, rel=1e-12)
    report = pipeline.run()
    first = report.rows[0]
    assert first.name == "v_opt(0, x0) vs quadrature of beta" and first.exact and first.status
    assert first.estimate == pytest.approx(-0.098932, rel=1e-4)
    assert first.target == pytest.approx(-0.098932, rel=1e-4)
    perturbed = [row for row in report.rows if row.name.startswith("cost(perturbed")]
    assert len(perturbed) == 3
    for row in perturbed:
        assert row.relation == "ge" and row.status, row.name
        assert row.estimate - row.target >= -config.thresholds["perturbed_se"] * row.se
    assert len(report.artifacts["value_table"]) == 121
    curve = report.artifacts["beta_curve"]
    assert len(curve) == 11 and (curve["se"] == 0.0).all()
    assert curve["beta"].iloc[0] == pytest.approx(ab.beta(0.0), rel=1e-12)


def test_value_target_for_state_dependent_volatility():
    config = load_experiment_config(CANONICAL_CONFIG, "value-check")
    pipeline = ExperimentPipeline(config, quiet=True)
    pipeline.model = MarketModel(ProportionalCoefficients([0.3], [[0.2]], [[1.0]], CosineUField(1.0, 0.5, 2.0)),
                                 pipeline.model.jumps, pipeline.model.damping,
                                 horizon=pipeline.model.horizon)
    ab = pipeline._alpha_beta()
    y0 = pipeline.problem.y0
    v_opt = float(value_function(ab, 0.0, pipeline.problem.x0, y0))
    row = pipeline._value_target_row(ab, v_opt, ab.beta_se(0.0, y0))
    assert row.name == "v_opt(0, x0) vs independent Feynman-Kac replicate"
    assert not row.exact and row.se > 0
    assert row.target != row.estimate
    assert row.status


def test_equivalence_suite_matches_discrete_and_continuous_wealth():
    config = load_experiment_config(CANONICAL_CONFIG, "equivalence", paths=4000, steps=256)
    report = run(config, quiet=True, write=False)
    cf_rows = [row for row in report.rows if row.name.startswith("|CF gap")]
    assert len(cf_rows) == 8
    th = config.thresholds
    for row in cf_rows:
        assert row.tolerance == pytest.approx(th["cf_abs"] + th["cf_se"] * row.se)
        assert row.status, row.name
    assert report.passed
    assert len(report.artifacts["terminal_cf"]) == 8


def test_report_body_is_deterministic():
    bodies = []
    for _ in range(2):
        config = load_experiment_config(CANONICAL_CONFIG, "demo-sample-state", paths=2000, steps=16)
        bodies.append(run(config, quiet=True, write=False).body())
    assert bodies[0] == bodies[1]


def test_unknown_experiment_rejected():
    config = load_experiment_config(CANONICAL_CONFIG, "hjb")
    config.name = "bogus"
    with pytest.raises(InputError):
        ExperimentPipeline(config, quiet=True)


def test_cli_writes_reports():
    with tempfile.TemporaryDirectory() as tmp:
        code = main(["hjb", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet"])
        assert code == EXIT_PASS
        names = sorted(p.name for p in Path(tmp).iterdir())
        assert names == ["hjb_hjb_residual.csv", "hjb_report.csv", "hjb_report.json"]
        with open(os.path.join(tmp, "hjb_report.csv"), encoding="utf-8") as f:
            assert f.readline().startswith("# experiment:")
        frame = pd.read_csv(os.path.join(tmp, "hjb_report.csv"), comment="#")
        assert list(frame["status"]) == ["PASS", "PASS"]
        with open(os.path.join(tmp, "hjb_report.json"), encoding="utf-8") as f:
            payload = json.load(f)
        assert payload["status"] == "PASS" and payload["header"]["experiment"] == "hjb"

        assert main(["hjb", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet", "--json"]) == EXIT_PASS
        assert (Path(tmp) / "hjb_report_1.json").exists()
        assert not (Path(tmp) / "hjb_report_1.csv").exists()


def test_cli_dumps_scenarios_per_path():
    with tempfile.TemporaryDirectory() as tmp:
        main(["decomposition", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet", "--paths", "500",
              "--steps", "8", "--dump-scenarios", "per-path"])
        dumps = sorted(Path(tmp).glob("decomposition_scenarios_path*.csv"))
        assert len(dumps) == 10
        frame = pd.read_csv(dumps[0], comment="#")
        assert len(frame) == 9 and frame["path"].nunique() == 1


def test_cli_review_writes_quality_report():
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["hjb", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet", "--review"]) == EXIT_PASS
        text = Path(tmp, "hjb_quality.txt").read_text(encoding="utf-8")
        assert "EXPERIMENT QUALITY REPORT: hjb" in text
        frame = pd.read_csv(Path(tmp, "hjb_review.csv"))
        assert list(frame["status"]) == ["PASS", "PASS"] and "quality_score" in frame.columns
        main(["hjb", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet", "--review"])
        assert Path(tmp, "hjb_quality_1.txt").exists()


def test_cli_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(SystemExit) as info:
            main(["bogus", "--config", CANONICAL_CONFIG])
        assert info.value.code == 2
        assert main(["hjb", "--config", os.path.join(tmp, "missing.toml"), "--quiet"]) == EXIT_CONFIG
        raw = canonical_raw()
        raw["problem"]["colour"] = "red"
        assert main(["hjb", "--config", write_json_config(tmp, raw), "--quiet"]) == EXIT_CONFIG
        # four Euler steps leave a drift bias of b^2 T / 4 in Var(X_T - x0)
        code = main(["demo-sample-state", "--config", CANONICAL_CONFIG, "--out", tmp, "--quiet",
                     "--paths", "20000", "--steps", "4"])
        assert code == EXIT_FAIL


def test_reviewer_flags_failures():
    rows = [CheckRow("exact", 0.0, 0.0, 1e-8, exact=True), CheckRow.within("mc", 1.02, 1.0, 0.01, 3.0),
            CheckRow.within("tight", 1.028, 1.0, 0.01, 3.0), CheckRow("loose", 5.0, 0.0, 1.0, se=0.5)]
    report = ExperimentReport("demo", "abc", {"experiment": "demo"}, rows, wall_clock=1.5)
    reviewer = ReportReviewer()
    analysis = reviewer.analyze_report(report)
    assert analysis["passed"] == 3 and analysis["failed"] == 1
    assert analysis["exact_rows"] == 1 and analysis["se_rows"] == 3
    assert analysis["status_consistent"]
    assert analysis["detailed_stats"]["tight_count"] == 1
    assert any("'loose' failed" in rec for rec in analysis["recommendations"])
    with tempfile.TemporaryDirectory() as tmp:
        text = reviewer.generate_quality_report(report, os.path.join(tmp, "quality.txt"))
        assert "EXPERIMENT QUALITY REPORT: demo" in text
        assert Path(tmp, "quality.txt").read_text(encoding="utf-8") == text
        frame = reviewer.export_detailed_csv(report, os.path.join(tmp, "detail.csv"))
        assert list(frame["status"]) == ["PASS", "PASS", "PASS", "FAIL"]
        assert frame["margin_used"].iloc[3] == pytest.approx(5.0)


def test_reviewer_on_clean_report():
    report = ExperimentReport("clean", "abc", {}, [CheckRow("exact", 0.0, 0.0, 1e-8, exact=True)])
    analysis = ReportReviewer().analyze_report(report)
    assert analysis["recommendations"] == ["All checks passed with margin. Report is ready to archive."]
    empty = ReportReviewer().analyze_report(ExperimentReport("empty", "abc", {}))
    assert "Report has no checks." in empty["recommendations"]


def main_tests():
    tests = [obj for name, obj in sorted(globals().items()) if name.startswith("test_") and callable(obj)]
    sys.exit(0 if run_script_tests("Experiment pipeline tests", tests) else 1)


if __name__ == "__main__":
    main_tests()
