"""
Density-weighted residual alignment laboratory.

Machine-readable reports: building, schema validation, writing, and the
paired comparison of conditions across seeds.

Report bodies are canonical JSON (sorted keys, fixed indentation) so that an
identical rerun gives identical bytes, timestamps aside.
"""
import json
import logging
import math
import subprocess
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from jsonschema import Draft7Validator
from jsonschema.exceptions import ValidationError

from . import __version__
from .constants import REPORT_SCHEMA_VERSION, TIMESTAMP_FIELDS
from .exceptions import ConfigHashMismatch, ReportError
from .utils import machine, to_builtin

__all__ = (
    "Comparison",
    "compare_conditions",
    "metadata",
    "paired_delta",
    "read_report",
    "strip_timestamps",
    "validate_report",
    "write_report",
)

log = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).parent / "schema" / "report.schema.json"

# (minuend, subtrahend) condition pairs of the aggregate, headline pairs first
DELTA_PAIRS = (("C4", "C3"), ("C4", "C1"), ("C4", "C2"), ("C5", "C4"))
METRICS = ("dense", "smooth", "all")


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def git_commit() -> Optional[str]:
    """Commit of the working tree, when there is one."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def metadata(started_at: str) -> Dict[str, Any]:
    return {
        "version": __version__,
        "commit": git_commit(),
        "machine": machine(),
        "started_at": started_at,
        "finished_at": now(),
    }


#
# Schema
#


_validator: Optional[Draft7Validator] = None


def _schema_validator() -> Draft7Validator:
    global _validator
    if _validator is None:
        schema = json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
        Draft7Validator.check_schema(schema)
        _validator = Draft7Validator(schema)
    return _validator


def validate_report(report: Dict[str, Any]) -> None:
    try:
        _schema_validator().validate(to_builtin(report))
    except ValidationError as exc:
        path = "/".join(str(part) for part in exc.absolute_path) or "<root>"
        raise ReportError(f"report does not match schema v{REPORT_SCHEMA_VERSION} at {path}: {exc.message}") from exc


def dumps(report: Dict[str, Any]) -> str:
    return json.dumps(to_builtin(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(path: Union[str, Path], report: Dict[str, Any]) -> Path:
    """Validate then write; a report that does not match the schema is never written."""
    validate_report(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(report), encoding="utf-8")
    log.debug("wrote %s", path)
    return path


def read_report(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: invalid JSON: {exc}") from exc
    validate_report(report)
    return report


def strip_timestamps(report: Any) -> Any:
    """Copy of a report without its timestamp fields, for byte comparisons."""
    if isinstance(report, dict):
        return {key: strip_timestamps(value) for key, value in report.items() if key not in TIMESTAMP_FIELDS}
    if isinstance(report, list):
        return [strip_timestamps(value) for value in report]
    return report


#
# Paired comparison
#


def paired_delta(per_seed: Dict[Any, Optional[float]]) -> Dict[str, Any]:
    """
    Mean and standard error (sample std with ddof=1 over √n) of the paired
    differences. Absent seeds (None) are reported but never imputed.
    """
    values = [value for value in per_seed.values() if value is not None]
    n = len(values)
    mean = float(np.mean(values)) if n else None
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n >= 2 else None
    return {"mean": mean, "se": se, "n": n, "per_seed": {str(seed): value for seed, value in per_seed.items()}}


def _metric(report: Dict[str, Any], metric: str) -> Optional[float]:
    if report.get("status") != "ok":
        return None
    value = report.get("accuracy", {}).get(metric)
    return None if value is None else float(value)


class Comparison:
    """Paired deltas between conditions, keyed ``"C4-C3"`` then by metric."""

    def __init__(self, config_hash: str, seeds: List[int], conditions: List[str], deltas: Dict[str, Any]):
        self.config_hash = config_hash
        self.seeds = seeds
        self.conditions = conditions
        self.deltas = deltas

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "conditions": self.conditions,
            "deltas": self.deltas,
        }

    def table(self) -> str:
        lines = [f"{'pair':<8} {'metric':<8} {'delta':>9} {'se':>8} {'n':>3}  per seed"]
        for pair, block in self.deltas.items():
            for metric, stats in block.items():
                mean = "absent" if stats["mean"] is None else f"{stats['mean']:+.2f}"
                se = "-" if stats["se"] is None else f"{stats['se']:.2f}"
                seeds = " ".join(
                    f"{seed}:{'absent' if value is None else format(value, '+.2f')}"
                    for seed, value in stats["per_seed"].items()
                )
                lines.append(f"{pair:<8} {metric:<8} {mean:>9} {se:>8} {stats['n']:>3}  {seeds}")
        return "\n".join(lines)


def compare_conditions(
    reports: Sequence[Dict[str, Any]],
    pairs: Sequence[Tuple[str, str]] = DELTA_PAIRS,
    metrics: Sequence[str] = METRICS,
) -> Comparison:
    """
    Per-seed paired differences between conditions of run reports sharing one
    configuration. A pair missing on a seed (absent or failed run) leaves
    that cell absent.
    """
    runs = [report for report in reports if report.get("kind") == "run" and not report.get("arm")]
    if len(runs) < 2:
        raise ReportError(f"comparison needs at least 2 run reports, got {len(runs)}")
    hashes = sorted({report["config_hash"] for report in runs})
    if len(hashes) > 1:
        raise ConfigHashMismatch(f"reports come from {len(hashes)} different configurations: {hashes}")

    cells: Dict[Tuple[str, int], Dict[str, Any]] = {}
    for report in runs:
        cells[(report["condition"], int(report["seed"]))] = report
    seeds = sorted({seed for _, seed in cells})
    conditions = sorted({condition for condition, _ in cells})

    deltas: Dict[str, Any] = {}
    for left, right in pairs:
        if left not in conditions or right not in conditions:
            continue
        block = {}
        for metric in metrics:
            per_seed: Dict[int, Optional[float]] = {}
            for seed in seeds:
                a = _metric(cells[(left, seed)], metric) if (left, seed) in cells else None
                b = _metric(cells[(right, seed)], metric) if (right, seed) in cells else None
                per_seed[seed] = None if a is None or b is None else a - b
            block[metric] = paired_delta(per_seed)
        deltas[f"{left}-{right}"] = block
    return Comparison(config_hash=hashes[0], seeds=seeds, conditions=conditions, deltas=deltas)
