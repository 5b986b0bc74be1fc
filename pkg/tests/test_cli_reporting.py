"""Command-line driver, exit codes, and report regeneration."""

import json

import pytest
import yaml

from kppo.cli import main
from kppo.engine import OptimizationEngine, RunPaths
from kppo.reporting import build_report, write_reports
from kppo.testing import build_fact_fixture


@pytest.fixture
def fixture(tmp_path):
    # five facts, one gained per step: five steps reach full coverage
    return build_fact_fixture(tmp_path / "fx", iterations=5)


def test_cmd_run_scripted_fixture(fixture, capsys):
    assert main(["run", "--config", str(fixture.config_path)]) == 0
    out = capsys.readouterr().out
    assert "learning gain" in out
    paths = RunPaths(fixture.workdir)
    report = json.loads(paths.report_json.read_text())
    assert report["learning_gain"] > 0
    assert report["final"]["validation_accuracy"] == 1.0
    assert paths.optimized_prompt.exists()


def test_cmd_run_dry_run_makes_no_calls(fixture, capsys):
    assert main(["run", "--config", str(fixture.config_path), "--dry-run"]) == 0
    assert "dry run ok" in capsys.readouterr().out
    paths = RunPaths(fixture.workdir)
    assert not paths.responses.exists()
    assert not paths.checkpoint.exists()


def test_cmd_run_missing_api_key_fails_fast(tmp_path, fixture, monkeypatch, capsys):
    monkeypatch.delenv("KPPO_API_KEY", raising=False)
    raw = yaml.safe_load(fixture.config_path.read_text())
    raw["models"]["target"] = {"adapter": "http", "endpoint": "http://h/v1", "model": "m"}
    config_path = fixture.workdir / "http_config.yaml"
    config_path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    assert main(["run", "--config", str(config_path)]) == 2
    assert "KPPO_API_KEY" in capsys.readouterr().err
    assert not RunPaths(fixture.workdir).checkpoint.exists()


def test_cmd_run_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mystery_option: true\n", encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cmd_seed_flag_overrides_config(fixture):
    assert main(["run", "--config", str(fixture.config_path), "--seed", "99"]) == 0
    checkpoint = json.loads(RunPaths(fixture.workdir).checkpoint.read_text())
    assert checkpoint["config"]["seed"] == 99


def test_cmd_resume_finishes_a_partial_run(fixture, capsys):
    engine = OptimizationEngine.fresh(fixture.config)
    engine.run(until_step=2)
    assert main(["resume", "--checkpoint", str(engine.paths.checkpoint)]) == 0
    report = json.loads(engine.paths.report_json.read_text())
    assert len(report["steps"]) == 5
    assert report["final"]["validation_accuracy"] == 1.0


def test_cmd_resume_at_final_step_only_selects(fixture):
    engine = OptimizationEngine.fresh(fixture.config)
    engine.run()
    log_lines_before = engine.paths.responses.read_text().splitlines()
    assert main(["resume", "--checkpoint", str(engine.paths.checkpoint)]) == 0
    report = json.loads(engine.paths.report_json.read_text())
    assert len(report["steps"]) == 5
    # resuming at T re-runs no steps; only final selection happens, and the
    # validation evaluations it needs are fresh (no finish ran before)
    log_lines_after = engine.paths.responses.read_text().splitlines()
    assert len(log_lines_after) >= len(log_lines_before)
    new_records = [json.loads(line) for line in log_lines_after[len(log_lines_before):]]
    assert all(record["role"] == "target" for record in new_records)
    assert all(record["step"] == 6 for record in new_records)


def test_cmd_resume_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "checkpoint.json"
    bad.write_text("{” mangled", encoding="utf-8")
    assert main(["resume", "--checkpoint", str(bad)]) == 1
    assert "offset" in capsys.readouterr().err


def test_cmd_report_regeneration_idempotent_and_offline(fixture, capsys):
    assert main(["run", "--config", str(fixture.config_path)]) == 0
    paths = RunPaths(fixture.workdir)
    first_json = paths.report_json.read_text()
    first_text = paths.report_text.read_text()
    assert main(["report", str(fixture.workdir)]) == 0
    assert paths.report_json.read_text() == first_json
    assert paths.report_text.read_text() == first_text
    capsys.readouterr()
    assert main(["report", str(fixture.workdir), "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads(first_json)


def test_report_totals_match_gateway_accounting(fixture):
    engine = OptimizationEngine.fresh(fixture.config)
    engine.run()
    engine.finish()
    report = build_report(engine.paths.trajectory, engine.paths.responses)
    optimizer_total, target_total = engine.gateway.token_totals()
    assert report.token_totals == {"optimizer": optimizer_total, "target": target_total}


def test_cmd_inspect_clean_and_violating(tmp_path, capsys):
    clean = tmp_path / "clean.txt"
    clean.write_text("# Topic\n- a note\n", encoding="utf-8")
    assert main(["inspect", str(clean)]) == 0
    assert "no violations" in capsys.readouterr().out

    crowded = tmp_path / "crowded.txt"
    crowded.write_text(
        "# Crowded\n" + "".join(f"- item {k}\n" for k in range(17)), encoding="utf-8"
    )
    assert main(["inspect", str(crowded), "--max-children", "16"]) == 0
    out = capsys.readouterr().out
    assert "DEGREE" in out and "outdeg=17" in out

    assert main(["inspect", str(crowded), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["local_violations"][0]["outdeg"] == 17
    assert payload["local_violations"][0]["path"] == "Crowded"


def test_cmd_inspect_missing_file(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "gone.txt")]) == 2


def test_write_reports_without_logs(tmp_path):
    report = write_reports(tmp_path)
    assert report.steps == []
    assert report.learning_gain is None
    assert report.token_totals == {"optimizer": 0, "target": 0}


def test_cmd_report_missing_workdir(tmp_path, capsys):
    assert main(["report", str(tmp_path / "never-ran")]) == 2
    assert "not found" in capsys.readouterr().err
