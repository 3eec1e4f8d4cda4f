"""
Density-weighted residual alignment laboratory.

Command line interface:

    heedlab run      --config <path> [--out <dir>] [--workers <n>]
    heedlab train    --config <path> --condition <C1..C5> --seed <n> --out <dir>
    heedlab diagnose --checkpoint <path> --teacher <path> --out <path> [--config <path>]
    heedlab control  --config <path> --out <dir>
    heedlab cache encode  --in <config> --out <path> [--seed <n>] [--teacher <path>]
    heedlab cache inspect --in <path> [--out <path>]
    heedlab compare <report> <report> ... [--out <path>]

Errors are printed on stderr as one JSON object {"error": code, "message": text}.
The exit code is 0 on success, 1 on a lab error and 2 on anything unexpected.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional

from tendo.singleton import SingleInstance, SingleInstanceException

from . import __version__
from .constants import (
    APP_NAME,
    REFERENCE_DRIFT_DECILES,
    REFERENCE_MASK_DECILES,
    REFERENCE_SPEARMAN,
    REPORT_SCHEMA_VERSION,
)

log = logging.getLogger(__name__)


def lock(folder: Path) -> SingleInstance:
    """Allow only one process per output folder."""
    from .exceptions import OutputLocked

    folder.mkdir(parents=True, exist_ok=True)
    try:
        return SingleInstance(flavor_id=folder.resolve().name, lockfile=str(folder / f"{APP_NAME}.lock"))
    except SingleInstanceException:
        raise OutputLocked(f"another {APP_NAME} process is writing to {folder}")


def load_config(path: Optional[str], out: Optional[str] = None, **changes):
    from .config import ExperimentConfig

    config = ExperimentConfig.from_yaml(path) if path else ExperimentConfig()
    if out:
        changes["output"] = str(out)
    return replace(config, **changes) if changes else config


def in_console(title: str, task: Callable) -> int:
    from .console import Application

    app = Application(title, task)
    return app.exec_()


#
# Commands
#


def cmd_run(args: argparse.Namespace) -> int:
    from .harness import run_experiment

    config = load_config(args.config, args.out, **({"workers": args.workers} if args.workers else {}))
    me = lock(config.output_path)  # noqa
    return in_console(
        f"C-ladder {', '.join(config.conditions)} over seeds {list(config.seeds)}",
        lambda output, should_continue: run_experiment(config, output, should_continue),
    )


def cmd_control(args: argparse.Namespace) -> int:
    from .harness import run_control

    config = load_config(args.config, args.out)
    me = lock(config.output_path)  # noqa
    return in_console(
        f"density vs random control, k = {list(config.control.k_list)}",
        lambda output, should_continue: run_control(config, output, should_continue),
    )


def cmd_train(args: argparse.Namespace) -> int:
    from .harness import Cell, build_teachers, run_cell, teacher_path

    config = load_config(args.config, args.out, conditions=(args.condition,), seeds=(args.seed,))
    me = lock(config.output_path)  # noqa
    out = config.output_path
    name = f"{args.condition}-seed{args.seed}"

    def task(output, should_continue):
        build_teachers(config, output)
        cell = Cell(
            condition=args.condition,
            seed=args.seed,
            teacher_path=str(teacher_path(config, args.seed)),
            report_path=str(out / f"{name}.json"),
            student_path=str(out / f"student-{name}.ckpt"),
        )
        report = run_cell(config.to_dict(), cell)
        output(f"{name}: {report['status']} {report.get('accuracy') or report.get('error')}")
        return report

    code = in_console(f"train {name}", task)
    return code


def cmd_diagnose(args: argparse.Namespace) -> int:
    from .diagnostics import build_token_records, run_diagnostics, write_token_table
    from .fisher import proxy_validation
    from .harness import SPLIT_DIAG, SPLIT_EVAL, data_seed, percent
    from .report import metadata, now, write_report
    from .toy.data import synth_dataset
    from .toy.model import load_checkpoint
    from .toy.train import accuracy

    started_at = now()
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.checkpoint)
    toy = teacher.config
    config = load_config(args.config, toy=toy)
    seed = toy.seed

    diag = synth_dataset(toy, config.data.n_diag, data_seed(seed, SPLIT_DIAG))
    held_out = synth_dataset(toy, config.data.n_eval, data_seed(seed, SPLIT_EVAL))
    records = build_token_records(
        teacher, student, diag, with_mask=config.diagnostics.with_mask, beta=config.density.beta
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_token_table(records, out.with_suffix(".tsv"))

    diagnostics = run_diagnostics(
        records,
        n_resamples=config.diagnostics.n_resamples,
        alpha=config.diagnostics.alpha,
        seed=seed,
        workers=config.diagnostics.bootstrap_workers,
    )
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "diagnostic",
        "config_hash": config.config_hash(),
        "seed": seed,
        "accuracy": percent(accuracy(student, held_out)),
        "diagnostics": diagnostics.to_dict(),
        "proxy": proxy_validation(teacher, diag).to_dict(),
        "metadata": metadata(started_at),
    }
    write_report(out, report)

    proxy = report["proxy"]["density_vs_gradient"]
    rows = [("drift top/bottom", diagnostics.drift_deciles.ratio, REFERENCE_DRIFT_DECILES)]
    if diagnostics.mask_deciles is not None:
        rows.append(("masking top/bottom", diagnostics.mask_deciles.ratio, REFERENCE_MASK_DECILES))
    for what, value, (bottom, top) in rows:
        print(f"{what:<20} {value:6.2f}   full scale {top / bottom:.1f}")
    print(f"{'density~gradient':<20} {proxy['mean']} (tail {proxy['tail_mean']})   full scale {REFERENCE_SPEARMAN}")
    return 0


def cmd_cache_encode(args: argparse.Namespace) -> int:
    from .cache import CacheEntry, grad_entry, write_cache
    from .fisher import grad_weight, position_sensitivity
    from .harness import SPLIT_TRAIN, data_seed
    from .toy.data import synth_dataset, visual_density
    from .toy.model import load_checkpoint
    from .utils import sizeof_fmt

    config = load_config(args.input)
    seed = args.seed if args.seed is not None else config.seeds[0]
    toy = config.toy_for(seed)
    samples = synth_dataset(toy, config.data.n_train, data_seed(seed, SPLIT_TRAIN))

    entries = [CacheEntry.from_rho_tilde(s.sample_id, visual_density(s).flat_rho_tilde()) for s in samples]
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
        for sample in samples:
            field = position_sensitivity(teacher, sample)
            entries.append(grad_entry(sample.sample_id, grad_weight(field, visual_count=sample.grid.n_patches).weights))

    size = write_cache(args.out, entries)
    print(f"{args.out}: {len(samples)} samples, {sizeof_fmt(size)}")
    return 0


def cmd_cache_inspect(args: argparse.Namespace) -> int:
    from .cache import read_cache, summarize

    path = Path(args.input)
    summary = summarize(read_cache(path), path.stat().st_size)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    from .report import compare_conditions, dumps, read_report

    comparison = compare_conditions([read_report(path) for path in args.reports])
    print(comparison.table())
    if args.out:
        Path(args.out).write_text(dumps(comparison.to_dict()), encoding="utf-8")
    return 0


#
# Parser
#


def parser() -> argparse.ArgumentParser:
    from .constants import CONDITIONS

    root = argparse.ArgumentParser(prog=APP_NAME, description="Density-weighted residual alignment laboratory.")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    root.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = root.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the C1-C5 ladder and write the aggregate report")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    run.set_defaults(func=cmd_run)

    train = commands.add_parser("train", help="distil one (condition, seed) cell")
    train.add_argument("--config", required=True)
    train.add_argument("--condition", required=True, choices=CONDITIONS)
    train.add_argument("--seed", required=True, type=int)
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    diagnose = commands.add_parser("diagnose", help="measure drift and masking importance of a student")
    diagnose.add_argument("--checkpoint", required=True)
    diagnose.add_argument("--teacher", required=True)
    diagnose.add_argument("--out", required=True)
    diagnose.add_argument("--config")
    diagnose.set_defaults(func=cmd_diagnose)

    control = commands.add_parser("control", help="density-targeted vs random binary-mask weights")
    control.add_argument("--config", required=True)
    control.add_argument("--out", required=True)
    control.set_defaults(func=cmd_control)

    cache = commands.add_parser("cache", help="density cache files")
    actions = cache.add_subparsers(dest="action", required=True)
    encode = actions.add_parser("encode", help="encode the training split densities of a configuration")
    encode.add_argument("--in", dest="input", required=True)
    encode.add_argument("--out", required=True)
    encode.add_argument("--seed", type=int)
    encode.add_argument("--teacher", help="also store the gradient reference weights of this teacher")
    encode.set_defaults(func=cmd_cache_encode)
    inspect = actions.add_parser("inspect", help="summarize a cache file")
    inspect.add_argument("--in", dest="input", required=True)
    inspect.add_argument("--out")
    inspect.set_defaults(func=cmd_cache_inspect)

    compare = commands.add_parser("compare", help="paired deltas between run reports")
    compare.add_argument("reports", nargs="+")
    compare.add_argument("--out")
    compare.set_defaults(func=cmd_compare)

    return root


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point."""

    if sys.version_info < (3, 9):
        raise RuntimeError(f"{APP_NAME} requires Python 3.9+")

    args = parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )

    from .exceptions import HeedError

    try:
        return args.func(args)
    except HeedError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("unexpected error", exc_info=True)
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
