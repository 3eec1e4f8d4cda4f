"""
Density-weighted residual alignment laboratory.

Experiment harness.

A run happens in two phases. Phase 1 trains (or reloads) one teacher per
seed and saves its checkpoint. Phase 2 runs independent cells, one per
(condition, seed) or per control arm, each in its own process when
``workers > 1``; every cell is deterministic, so scheduling never changes a
result. Failed cells are recorded, never fatal, and aggregates mark them
absent.

Output folder layout::

    teachers/teacher-seed<N>.ckpt
    runs/<condition>-seed<N>.json
    control/<arm>-k<k>-seed<N>.json
    aggregate.json
    control.json
"""
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cache import read_cache
from .config import ExperimentConfig
from .constants import REPORT_SCHEMA_VERSION
from .diagnostics import build_token_records, run_diagnostics
from .exceptions import HeedError, NothingToRun
from .fisher import proxy_validation
from .losses import topk_mask_weights
from .report import compare_conditions, metadata, now, paired_delta, write_report
from .toy.data import SynthSample, synth_dataset, visual_density
from .toy.model import ToyModel, hybridize, load_checkpoint, save_checkpoint
from .toy.train import accuracy, distill, prepare_teacher

__all__ = ("Cell", "build_teachers", "run_cell", "run_cells", "run_control", "run_experiment")

log = logging.getLogger(__name__)

Output = Callable[[str], None]

# Data splits, mixed into the dataset seed
SPLIT_TRAIN = 1
SPLIT_EVAL = 2
SPLIT_DIAG = 3


def data_seed(seed: int, split: int) -> int:
    return (seed << 4) | split


def splits(config: ExperimentConfig, seed: int) -> Tuple[List[SynthSample], List[SynthSample], List[SynthSample]]:
    toy = config.toy_for(seed)
    return (
        synth_dataset(toy, config.data.n_train, data_seed(seed, SPLIT_TRAIN)),
        synth_dataset(toy, config.data.n_eval, data_seed(seed, SPLIT_EVAL)),
        synth_dataset(toy, config.data.n_diag, data_seed(seed, SPLIT_DIAG)),
    )


def percent(score: Dict[str, float]) -> Dict[str, float]:
    return {task: 100.0 * value for task, value in score.items()}


@dataclass(frozen=True)
class Cell:
    """
    One independent training run. ``arm`` is set for the control experiment:
    {"mode": "density"|"random", "k": k, "random_seed": s}.
    """

    condition: str
    seed: int
    teacher_path: str
    report_path: str
    arm: Optional[Dict[str, Any]] = None
    with_diagnostics: bool = True
    student_path: Optional[str] = None

    @property
    def name(self) -> str:
        if self.arm is None:
            return f"{self.condition}-seed{self.seed}"
        suffix = f"-r{self.arm['random_seed']}" if self.arm["mode"] == "random" else ""
        return f"{self.arm['mode']}{suffix}-k{self.arm['k']}-seed{self.seed}"


#
# Phase 1
#


def teacher_path(config: ExperimentConfig, seed: int) -> Path:
    return config.output_path / "teachers" / f"teacher-seed{seed}.ckpt"


def build_teachers(config: ExperimentConfig, output: Optional[Output] = None) -> Dict[int, Dict[str, Any]]:
    """Train or reload every seed's teacher; returns per-seed held-out accuracy and proxy statistics."""
    summary = {}
    for seed in config.seeds:
        path = teacher_path(config, seed)
        if path.is_file():
            teacher = load_checkpoint(path)
            log.info("reusing teacher %s", path)
        else:
            teacher, _ = prepare_teacher(config.toy_for(seed), config.train, config.data.teacher_train, seed=seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(teacher, path)
        _, held_out, diag = splits(config, seed)
        summary[seed] = {
            "accuracy": percent(accuracy(teacher, held_out)),
            "proxy": proxy_validation(teacher, diag).to_dict(),
        }
        if output:
            output(f"teacher seed {seed}: {summary[seed]['accuracy']['all']:.1f}% held-out accuracy")
    return summary


#
# Phase 2
#


def _arm_weight_fn(arm: Dict[str, Any], boost: float):
    def weight_fn(sample: SynthSample):
        seed = [int(arm["random_seed"]), sample.sample_id] if arm["mode"] == "random" else None
        return topk_mask_weights(
            visual_density(sample),
            arm["k"],
            boost=boost,
            mode=arm["mode"],
            seed=seed,
            text_count=sample.text_count,
        )

    return weight_fn


def _run_cell(config: ExperimentConfig, cell: Cell) -> Dict[str, Any]:
    teacher: ToyModel = load_checkpoint(cell.teacher_path)
    student = hybridize(teacher, config.toy_for(cell.seed))
    train, held_out, diag = splits(config, cell.seed)

    weight_fn = _arm_weight_fn(cell.arm, config.control.boost) if cell.arm is not None else None
    cache = read_cache(config.cache) if config.cache and cell.condition in ("C4", "C5") and not cell.arm else None
    result = distill(
        teacher,
        student,
        train,
        cell.condition,
        config.budget,
        config.train,
        seed=cell.seed,
        cache=cache,
        weight_fn=weight_fn,
        tau=config.density.tau,
        beta=config.density.beta,
    )
    if cell.student_path:
        Path(cell.student_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.student, cell.student_path)

    diagnostics = None
    if cell.with_diagnostics:
        records = build_token_records(
            teacher, result.student, diag, with_mask=config.diagnostics.with_mask, beta=config.density.beta
        )
        diagnostics = run_diagnostics(
            records,
            n_resamples=config.diagnostics.n_resamples,
            alpha=config.diagnostics.alpha,
            seed=cell.seed,
            workers=config.diagnostics.bootstrap_workers,
        ).to_dict()

    return {
        "status": "ok",
        "error": None,
        "accuracy": percent(accuracy(result.student, held_out)),
        "teacher_accuracy": percent(accuracy(teacher, held_out)),
        "stage_tokens": {str(stage): tokens for stage, tokens in result.stage_tokens.items()},
        "final_loss": result.logs[-1].loss if result.logs else None,
        "frozen_digest": result.frozen_digest,
        "diagnostics": diagnostics,
    }


def run_cell(config_data: Dict[str, Any], cell: Cell) -> Dict[str, Any]:
    """Worker entry point: one cell, one report file. Never raises."""
    config = ExperimentConfig.from_dict(config_data)
    started_at = now()
    report: Dict[str, Any] = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "run",
        "condition": cell.condition,
        "seed": cell.seed,
        "arm": cell.arm,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
    }
    try:
        report.update(_run_cell(config, cell))
    except HeedError as exc:
        log.error("cell %s failed: %s", cell.name, exc)
        report.update({"status": "failed", "error": exc.as_dict()})
    except Exception as exc:
        log.error("cell %s crashed:\n%s", cell.name, traceback.format_exc())
        report.update({"status": "failed", "error": {"error": type(exc).__name__, "message": str(exc)}})
    report["metadata"] = metadata(started_at)
    write_report(cell.report_path, report)
    return report


def run_cells(
    config: ExperimentConfig,
    cells: Sequence[Cell],
    output: Optional[Output] = None,
    should_continue: Optional[Callable[[], bool]] = None,
) -> Dict[str, Dict[str, Any]]:
    """Run cells sequentially or in a process pool; results keyed by cell name."""
    config_data = config.to_dict()
    results: Dict[str, Dict[str, Any]] = {}

    def done(cell: Cell, report: Dict[str, Any]) -> None:
        results[cell.name] = report
        if output:
            output(f"[{len(results)}/{len(cells)}] {cell.name}: {report['status']}")

    if config.workers == 1:
        for cell in cells:
            if should_continue and not should_continue():
                break
            done(cell, run_cell(config_data, cell))
        return results

    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        futures = [(cell, pool.submit(run_cell, config_data, cell)) for cell in cells]
        for cell, future in futures:
            if should_continue and not should_continue():
                for _, pending in futures:
                    pending.cancel()
                break
            done(cell, future.result())
    return results


#
# Experiments
#


def run_experiment(
    config: ExperimentConfig,
    output: Optional[Output] = None,
    should_continue: Optional[Callable[[], bool]] = None,
) -> Dict[str, Any]:
    """The C-ladder: one report per (condition, seed) and one aggregate with paired deltas."""
    if not config.conditions or not config.seeds:
        raise NothingToRun("nothing to run: the configuration lists no condition or no seed")
    started_at = now()
    teachers = build_teachers(config, output)

    cells = [
        Cell(
            condition=condition,
            seed=seed,
            teacher_path=str(teacher_path(config, seed)),
            report_path=str(config.output_path / "runs" / f"{condition}-seed{seed}.json"),
            student_path=str(config.output_path / "runs" / f"{condition}-seed{seed}.ckpt"),
        )
        for condition in config.conditions
        for seed in config.seeds
    ]
    results = run_cells(config, cells, output, should_continue)

    grid: Dict[str, Dict[str, Any]] = {condition: {} for condition in config.conditions}
    missing = []
    reports = []
    for cell in cells:
        report = results.get(cell.name)
        if report is None or report["status"] != "ok":
            missing.append([cell.condition, cell.seed])
            grid[cell.condition][str(cell.seed)] = {
                "status": "absent" if report is None else "failed",
                "error": None if report is None else report.get("error"),
            }
            continue
        reports.append(report)
        grid[cell.condition][str(cell.seed)] = {
            "status": "ok",
            "accuracy": report["accuracy"],
            "drift_ratio": (report["diagnostics"] or {}).get("drift_deciles", {}).get("ratio"),
        }

    deltas: Dict[str, Any] = {}
    if len(reports) >= 2:
        deltas = compare_conditions(reports).deltas

    aggregate = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "aggregate",
        "config_hash": config.config_hash(),
        "conditions": list(config.conditions),
        "seeds": list(config.seeds),
        "cells": grid,
        "missing": missing,
        "deltas": deltas,
        "proxy": {str(seed): summary["proxy"] for seed, summary in teachers.items()},
        "teacher_accuracy": {str(seed): summary["accuracy"] for seed, summary in teachers.items()},
        "metadata": metadata(started_at),
    }
    write_report(config.output_path / "aggregate.json", aggregate)
    return aggregate


def _dense(report: Optional[Dict[str, Any]]) -> Optional[float]:
    if report is None or report.get("status") != "ok":
        return None
    return float(report["accuracy"]["dense"])


def control_arm(mode: str, k: float, random_seed: Optional[int] = None) -> Dict[str, Any]:
    return {"mode": mode, "k": k, "random_seed": random_seed}


def run_control(
    config: ExperimentConfig,
    output: Optional[Output] = None,
    should_continue: Optional[Callable[[], bool]] = None,
) -> Dict[str, Any]:
    """
    Density-targeted against random binary-mask weights of equal cardinality,
    for every k, on the dense-task accuracy. The k = 0 arms coincide and run
    once per seed.
    """
    if not config.seeds:
        raise NothingToRun("nothing to run: the configuration lists no seed")
    started_at = now()
    build_teachers(config, output)
    folder = config.output_path / "control"

    def cell(seed: int, arm: Optional[Dict[str, Any]], condition: str = "C3") -> Cell:
        name = Cell(condition, seed, "", "", arm).name
        return Cell(
            condition=condition,
            seed=seed,
            teacher_path=str(teacher_path(config, seed)),
            report_path=str(folder / f"{name}.json"),
            arm=arm,
            with_diagnostics=False,
        )

    cells = []
    for seed in config.seeds:
        for k in config.control.k_list:
            cells.append(cell(seed, control_arm("density", k)))
            if k == 0:
                continue
            for random_seed in config.control.random_seeds:
                cells.append(cell(seed, control_arm("random", k, random_seed)))
        if config.control.with_reference:
            cells.append(cell(seed, None, "C4"))

    results = run_cells(config, cells, output, should_continue)
    missing: List[str] = []

    def score(seed: int, arm: Optional[Dict[str, Any]], condition: str = "C3") -> Optional[float]:
        name = cell(seed, arm, condition).name
        value = _dense(results.get(name))
        if value is None:
            missing.append(name)
        return value

    curve = []
    for k in config.control.k_list:
        density_scores: Dict[int, Optional[float]] = {}
        random_scores: Dict[int, List[Optional[float]]] = {}
        paired: Dict[int, Optional[float]] = {}
        for seed in config.seeds:
            density_scores[seed] = score(seed, control_arm("density", k))
            if k == 0:
                random_scores[seed] = [density_scores[seed]] * len(config.control.random_seeds)
            else:
                random_scores[seed] = [score(seed, control_arm("random", k, r)) for r in config.control.random_seeds]
            arms = [s for s in random_scores[seed] if s is not None]
            paired[seed] = None if density_scores[seed] is None or not arms else density_scores[seed] - np.mean(arms)

        present = {seed: [s for s in scores if s is not None] for seed, scores in random_scores.items()}
        pooled = [s for scores in present.values() for s in scores]
        # Dispersion across random arms, averaged over seeds
        stds = [float(np.std(scores, ddof=1)) for scores in present.values() if len(scores) >= 2]
        density_values = [v for v in density_scores.values() if v is not None]
        curve.append(
            {
                "k": k,
                "density": {
                    "mean": float(np.mean(density_values)) if density_values else None,
                    "per_seed": {str(seed): value for seed, value in density_scores.items()},
                },
                "random": {
                    "mean": float(np.mean(pooled)) if pooled else None,
                    "std": float(np.mean(stds)) if stds else None,
                    "per_seed": {str(seed): scores for seed, scores in random_scores.items()},
                },
                "paired": paired_delta({seed: None if d is None else float(d) for seed, d in paired.items()}),
            }
        )

    reference = None
    if config.control.with_reference:
        per_seed = {str(seed): score(seed, None, "C4") for seed in config.seeds}
        values = [v for v in per_seed.values() if v is not None]
        reference = {"condition": "C4", "mean": float(np.mean(values)) if values else None, "per_seed": per_seed}

    control = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "control",
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "curve": curve,
        "reference": reference,
        "missing": missing,
        "metadata": metadata(started_at),
    }
    write_report(config.output_path / "control.json", control)
    return control
