import json
import math

import pytest

from heedlab.exceptions import ConfigHashMismatch, ReportError
from heedlab.report import (
    compare_conditions,
    dumps,
    metadata,
    now,
    paired_delta,
    read_report,
    strip_timestamps,
    validate_report,
    write_report,
)

HASH = "ab" * 32


def run_report(condition, seed, dense, status="ok", config_hash=HASH):
    report = {
        "schema_version": 1,
        "kind": "run",
        "condition": condition,
        "seed": seed,
        "status": status,
        "arm": None,
        "config_hash": config_hash,
        "config": {},
        "metadata": metadata(now()),
    }
    if status == "ok":
        report.update(
            {
                "error": None,
                "accuracy": {"dense": dense, "smooth": 50.0, "all": (dense + 50.0) / 2},
                "stage_tokens": {"1": 10, "2": 30, "3": 60},
            }
        )
    else:
        report["error"] = {"error": "competence", "message": "teacher below the gate"}
    return report


def test_paired_delta():
    delta = paired_delta({0: 1.0, 1: 2.0, 2: 3.0})
    assert delta["mean"] == 2.0
    assert delta["se"] == pytest.approx(1.0 / math.sqrt(3.0))
    assert delta["n"] == 3
    assert delta["per_seed"] == {"0": 1.0, "1": 2.0, "2": 3.0}


def test_paired_delta_with_absent_seeds():
    delta = paired_delta({0: 4.0, 1: None})
    assert delta["mean"] == 4.0
    assert delta["se"] is None
    assert delta["n"] == 1
    assert delta["per_seed"]["1"] is None
    assert paired_delta({0: None})["mean"] is None


def test_compare_conditions():
    reports = [run_report("C3", seed, 60.0 + seed) for seed in range(3)]
    reports += [run_report("C4", seed, 62.0 + 2 * seed) for seed in range(3)]
    comparison = compare_conditions(reports)

    assert comparison.seeds == [0, 1, 2]
    assert comparison.conditions == ["C3", "C4"]
    assert list(comparison.deltas) == ["C4-C3"]
    dense = comparison.deltas["C4-C3"]["dense"]
    assert dense["mean"] == pytest.approx(3.0)
    assert dense["se"] == pytest.approx(1.0 / math.sqrt(3.0))
    assert comparison.deltas["C4-C3"]["smooth"]["mean"] == 0.0

    table = comparison.table()
    assert "C4-C3" in table and "+3.00" in table
    assert json.loads(dumps(comparison.to_dict()))["config_hash"] == HASH


def test_identical_conditions_have_zero_delta():
    reports = [run_report(condition, seed, 70.0) for condition in ("C3", "C4") for seed in range(2)]
    dense = compare_conditions(reports).deltas["C4-C3"]["dense"]
    assert dense["mean"] == 0.0
    assert dense["se"] == 0.0


def test_failed_runs_are_absent():
    reports = [
        run_report("C3", 0, 60.0),
        run_report("C4", 0, 65.0),
        run_report("C3", 1, 60.0),
        run_report("C4", 1, None, status="failed"),
    ]
    comparison = compare_conditions(reports)
    dense = comparison.deltas["C4-C3"]["dense"]
    assert dense["n"] == 1
    assert dense["per_seed"] == {"0": 5.0, "1": None}
    assert "absent" in comparison.table()


def test_comparison_guards():
    with pytest.raises(ReportError):
        compare_conditions([run_report("C3", 0, 60.0)])
    with pytest.raises(ConfigHashMismatch):
        compare_conditions([run_report("C3", 0, 60.0), run_report("C4", 0, 61.0, config_hash="cd" * 32)])


def test_schema_validation():
    validate_report(run_report("C4", 0, 61.0))
    validate_report(run_report("C4", 0, None, status="failed"))

    broken = run_report("C4", 0, 61.0)
    del broken["stage_tokens"]
    with pytest.raises(ReportError):
        validate_report(broken)

    wrong = run_report("C4", 0, 61.0)
    wrong["accuracy"]["dense"] = 140.0
    with pytest.raises(ReportError, match="accuracy/dense"):
        validate_report(wrong)

    with pytest.raises(ReportError):
        validate_report({**run_report("C4", 0, 61.0), "condition": "C7"})


def test_invalid_reports_are_never_written(tmp_path):
    path = tmp_path / "run.json"
    broken = run_report("C4", 0, 61.0)
    broken["config_hash"] = "nope"
    with pytest.raises(ReportError):
        write_report(path, broken)
    assert not path.exists()


def test_write_and_read(tmp_path):
    report = run_report("C4", 0, 61.0)
    report["final_loss"] = math.inf
    path = write_report(tmp_path / "runs" / "C4-seed0.json", report)

    text = path.read_text()
    assert '"final_loss": "inf"' in text
    assert text == dumps(report)
    assert read_report(path)["final_loss"] == "inf"


def test_read_report_errors(tmp_path):
    with pytest.raises(ReportError, match="cannot read"):
        read_report(tmp_path / "missing.json")
    path = tmp_path / "garbage.json"
    path.write_text("{not json")
    with pytest.raises(ReportError, match="invalid JSON"):
        read_report(path)


def test_strip_timestamps():
    report = run_report("C4", 0, 61.0)
    stripped = strip_timestamps(report)
    assert "started_at" not in stripped["metadata"]
    assert "finished_at" not in stripped["metadata"]
    assert stripped["metadata"]["version"] == report["metadata"]["version"]
    assert "started_at" in report["metadata"]
