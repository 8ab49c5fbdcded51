"""Command-line surface: train, eval, verify, diagnose, plot.

Exit codes: 0 success (for ``verify``: matching), 1 operational failure
(for ``verify``: non-matching), 2 usage errors such as unknown flags, bad
paths, or invalid configuration. Verbosity comes from BMN_LOG_LEVEL
(error|info|debug).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, plots
from .config import load_run_config
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    InsufficientBatchError,
    NumericError,
)
from .targets import TargetSpec
from .trainer import train

log = logging.getLogger(__name__)

USAGE_ERROR = 2


class _Usage(Exception):
    """Raised for path/flag problems that map to exit 2."""


def _existing(path_str: str, kind: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise _Usage(f"{kind} not found: {path}")
    return path


def _load_checkpoint_arg(path_str: str) -> dataio.CheckpointData:
    return dataio.load_checkpoint(_existing(path_str, "checkpoint"))


def _cmd_train(args) -> int:
    config = load_run_config(_existing(args.config, "config file"))
    dataset = dataio.read_dataset(_existing(config.dataset_path, "dataset"))
    resume_params = None
    if args.resume is not None:
        ckpt = _load_checkpoint_arg(args.resume)
        if ckpt.model != config.model:
            raise ConfigError(
                "checkpoint architecture does not match the run configuration; "
                f"stored {ckpt.model}, requested {config.model}"
            )
        resume_params = ckpt.params
        log.info("warm start from %s (optimizer state starts fresh)", args.resume)
    result = train(
        dataset,
        config.model,
        config.targets,
        config.train,
        config.output_dir,
        resume_params=resume_params,
    )
    last = result.rows[-1].loss.total if result.rows else float("nan")
    print(
        f"trained {result.steps} step(s) over {result.epochs} epoch(s); "
        f"stop: {result.stop_reason}; final loss {last:.6g}"
    )
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"log: {result.log_path}")
    return 0 if result.stop_reason == "completed" else 1


def _cmd_eval(args) -> int:
    ckpt = _load_checkpoint_arg(args.ckpt)
    dataset = dataio.read_dataset(_existing(args.dataset, "dataset"))
    pairs = evaluation.read_pairs_file(_existing(args.pairs, "pairs file"), dataset)
    report = evaluation.evaluate_pairs(ckpt.params, dataset, pairs, ckpt.targets)
    files = evaluation.write_report(report, args.out)
    print(f"accuracy: {report.accuracy:.6f}")
    for alpha in sorted(report.gar_at_far, reverse=True):
        print(f"GAR@FAR={alpha:g}: {report.gar_at_far[alpha]:.6f}")
    for name, path in files.items():
        print(f"{name}: {path}")
    return 0


def _cmd_verify(args) -> int:
    ckpt = _load_checkpoint_arg(args.ckpt)
    dataset = dataio.read_dataset(_existing(args.dataset, "dataset"))
    for idx in (args.a, args.b):
        if not 0 <= idx < dataset.n_items:
            raise _Usage(
                f"item index {idx} out of range 0..{dataset.n_items - 1}"
            )
    matching, margin, agg = evaluation.verify(
        ckpt.params,
        dataset,
        dataset.features[args.a].astype(np.float64),
        dataset.features[args.b].astype(np.float64),
        ckpt.targets,
    )
    print(f"label: {'matching' if matching else 'non-matching'}")
    print(f"margin: {margin:.10g}")
    print("z_bar: " + " ".join(f"{v:.10g}" for v in agg.z_bar))
    return 0 if matching else 1


def _cmd_diagnose(args) -> int:
    config = load_run_config(_existing(args.config, "config file"))
    dataset = dataio.read_dataset(_existing(config.dataset_path, "dataset"))
    try:
        grid = [float(v) for v in args.w_grid.split(",") if v.strip()]
    except ValueError:
        raise _Usage(f"--w-grid must be a comma-separated float list, got {args.w_grid!r}")
    if not grid:
        raise _Usage("--w-grid is empty")
    out_dir = Path(config.output_dir)
    rows = evaluation.diagnose_sweep(
        dataset,
        config.model,
        config.targets,
        config.train,
        grid,
        out_dir / "sweep_runs",
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / "sweep.csv"
    evaluation.write_sweep(rows, sweep_path)
    for row in rows:
        marker = "ok" if row.ok else f"FAILED ({row.status})"
        print(f"w={row.w:g}: accuracy={row.accuracy:.4f} [{marker}]")
    print(f"sweep: {sweep_path}")
    return 0


def _cmd_plot(args) -> int:
    produced = plots.plot_report_dir(
        _existing(args.report, "report directory"), args.out
    )
    for path in produced:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaussmetric",
        description="Train and evaluate distribution-regularized pair metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the optimization loop")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--resume", help="checkpoint to warm-start parameters from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a labeled pairs file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", required=True, help="text file: 'idx1 idx2 label' lines")
    p.add_argument("--out", default="eval_report", help="report directory")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("verify", help="label one pair of dataset items")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--a", type=int, required=True, help="first item index")
    p.add_argument("--b", type=int, required=True, help="second item index")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("diagnose", help="sweep the non-matching target mean")
    p.add_argument("--config", required=True)
    p.add_argument("--w-grid", required=True, help="comma-separated means")
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("plot", help="render report CSVs to SVG")
    p.add_argument("--report", required=True, help="directory with report CSVs")
    p.add_argument("--out", help="output directory (default: next to the CSVs)")
    p.set_defaults(fn=_cmd_plot)
    return parser


def run(argv=None) -> int:
    try:
        dataio.configure_logging()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (_Usage, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetError, InsufficientBatchError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
