"""Console entry for ``stacknmn``.

::

    stacknmn gen --seed 1
    stacknmn train --config configs/gridworld.cfg
    stacknmn eval --mode both
    stacknmn trace --ids 0,1
    stacknmn gradcheck

Every failure prints exactly one machine-parsable line on stderr,
``stacknmn: error=<kind> code=<n> message=<text>``, and exits with the
code listed in :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .config import DEFAULT_OUT_DIR, LOG_LEVEL, RunConfig, dump_config_text, load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetParseError,
    GenerationError,
    LayoutError,
    ShapeError,
    StackBoundsError,
    TrainingError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_PARSE = 5
EXIT_TRAINING = 6
EXIT_UNWRITABLE = 7

EXIT_CODES: Dict[str, int] = {
    "check_failed": EXIT_CHECK_FAILED,
    "usage": EXIT_USAGE,
    "missing_file": EXIT_MISSING_FILE,
    "config": EXIT_CONFIG,
    "parse": EXIT_PARSE,
    "training": EXIT_TRAINING,
    "unwritable": EXIT_UNWRITABLE,
}

DATA_DIR = "data"
TRAIN_DIR = "train"
TRACE_DIR = "traces"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _fail(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    text = " ".join(str(message).split())
    print(f"stacknmn: error={kind} code={code} message={text}", file=sys.stderr)
    return code


# ----------------------------------------------------------------------
# Config and paths
# ----------------------------------------------------------------------

def _on_off(value: str) -> bool:
    lowered = value.lower()
    if lowered not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return lowered == "on"


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    seed = getattr(args, "seed", None)
    return {
        "data.seed": seed,
        "train.seed": seed,
        "train.task_mix": getattr(args, "task", None),
        "train.layout_supervision": getattr(args, "layout_supervision", None),
        "model.steps": getattr(args, "steps", None),
        "model.stack_depth": getattr(args, "stack_depth", None),
        "model.hidden": getattr(args, "hidden", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.lr": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "data.grid": getattr(args, "grid", None),
        "data.train_size": getattr(args, "train_size", None),
        "data.val_size": getattr(args, "val_size", None),
        "data.test_size": getattr(args, "test_size", None),
    }


def _run_config(args: argparse.Namespace) -> RunConfig:
    path = Path(args.config) if getattr(args, "config", None) else None
    if path is not None and not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return load_run_config(path, _overrides(args))


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(getattr(args, "out_dir", None) or DEFAULT_OUT_DIR)


def _data_dir(args: argparse.Namespace) -> Path:
    return Path(args.data_dir) if getattr(args, "data_dir", None) else _out_dir(args) / DATA_DIR


def _checkpoint(args: argparse.Namespace) -> Path:
    if getattr(args, "checkpoint", None):
        path = Path(args.checkpoint)
    else:
        path = _out_dir(args) / TRAIN_DIR / "best.ckpt"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _split_path(data_dir: Path, split: str) -> Path:
    path = data_dir / f"{split}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"dataset split not found: {path} (run 'stacknmn gen' first)")
    return path


def _tasks(config: RunConfig) -> Tuple[str, ...]:
    mix = config.train.task_mix
    return ("vqa", "ref") if mix == "both" else (mix,)


# ----------------------------------------------------------------------
# Sub-commands
# ----------------------------------------------------------------------

def gen_cmd(args: argparse.Namespace) -> int:
    from .dataset import generate_dataset

    config = _run_config(args)
    out = _data_dir(args)
    stats = generate_dataset(out, config.data, steps=config.model.steps, tasks=_tasks(config))
    if getattr(args, "json", False):
        _print_json({"data_dir": str(out), **stats})
    else:
        for split, info in stats["splits"].items():  # type: ignore[union-attr]
            print(f"{split}: {info['records']} records -> {out / (split + '.jsonl')}")
    return EXIT_OK


def train_cmd(args: argparse.Namespace) -> int:
    from .dataset import ANSWERS_FILE, VOCAB_FILE, load_split, read_words
    from .training import train

    config = _run_config(args)
    data_dir = _data_dir(args)
    train_records = load_split(_split_path(data_dir, "train"))
    val_records = load_split(_split_path(data_dir, "val"))
    vocab = read_words(data_dir / VOCAB_FILE)
    answers = read_words(data_dir / ANSWERS_FILE)
    run_dir = _out_dir(args) / TRAIN_DIR
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(dump_config_text(config), encoding="utf-8")
    result = train(config, train_records, val_records, vocab, answers, run_dir)
    summary = {
        "best_epoch": result.best_epoch,
        "checkpoint": str(run_dir / "best.ckpt"),
        "metrics": result.best_metrics.model_dump() if result.best_metrics else None,
    }
    if getattr(args, "json", False):
        _print_json(summary)
    else:
        print(f"best epoch {result.best_epoch}; checkpoint {summary['checkpoint']}")
    return EXIT_OK


def _render_metrics(rows: List[Dict[str, Any]]) -> None:
    columns = ["mode", "vqa_accuracy", "ref_grid_accuracy", "ref_iou_at_0_5", "mean_module_weight_entropy"]

    def cell(value: Any) -> str:
        if value is None:
            return "-"
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    try:
        from rich.console import Console
        from rich.table import Table
    except ImportError:
        Console = None  # type: ignore[assignment]
    if Console is not None and sys.stdout.isatty():
        table = Table(title="stacknmn eval")
        for col in columns:
            table.add_column(col)
        for row in rows:
            table.add_row(*(cell(row.get(c)) for c in columns))
        Console().print(table)
        return
    print("  ".join(columns))
    for row in rows:
        print("  ".join(cell(row.get(c)) for c in columns))


def eval_cmd(args: argparse.Namespace) -> int:
    from .dataset import load_split
    from .model import StackNMN
    from .training import evaluate, majority_baseline, select_tasks

    config = _run_config(args)
    data_dir = _data_dir(args)
    model = StackNMN.from_checkpoint(_checkpoint(args))
    records = select_tasks(load_split(_split_path(data_dir, args.split)), config.train.task_mix)
    modes = ["soft", "discretized"] if args.mode == "both" else [args.mode]
    results = {mode: evaluate(model, records, mode, train=config.train) for mode in modes}

    rows = [m.model_dump() for m in results.values()]
    report: Dict[str, Any] = {"split": args.split, "results": rows}
    train_path = data_dir / "train.jsonl"
    if train_path.is_file():
        report["majority_baseline"] = majority_baseline(load_split(train_path), records)
    if len(results) == 2:
        soft, hard = results["soft"], results["discretized"]
        report["discretization_gap"] = {
            key: (getattr(soft, key) - getattr(hard, key))
            for key in ("vqa_accuracy", "ref_grid_accuracy")
            if getattr(soft, key) is not None and getattr(hard, key) is not None
        }
    if getattr(args, "json", False):
        _print_json(report)
    else:
        _render_metrics(rows)
        if report.get("majority_baseline") is not None:
            print(f"majority baseline (vqa): {report['majority_baseline']:.4f}")
        for key, gap in report.get("discretization_gap", {}).items():
            print(f"discretization gap ({key}): {gap:+.4f}")
    return EXIT_OK


def _parse_ids(text: str) -> List[str]:
    ids = [part.strip() for part in text.split(",") if part.strip()]
    if not ids:
        raise UsageError("--ids needs at least one example index or id")
    return ids


def trace_cmd(args: argparse.Namespace) -> int:
    from .dataset import load_split
    from .model import StackNMN
    from .trace import export_trace

    model = StackNMN.from_checkpoint(_checkpoint(args))
    records = load_split(_split_path(_data_dir(args), args.split))
    by_id = {r.id: r for r in records}
    layout = [m.strip() for m in args.layout.split(",")] if args.layout else None
    out = Path(args.trace_dir) if args.trace_dir else _out_dir(args) / TRACE_DIR
    written: List[str] = []
    for key in _parse_ids(args.ids):
        if key in by_id:
            record = by_id[key]
        elif key.isdigit() and int(key) < len(records):
            record = records[int(key)]
        else:
            raise UsageError(f"no example {key!r} in split {args.split}")
        result = model.run(record, args.mode, forced_layout=layout, record_trace=True)
        paths = export_trace(result.trace, out)  # type: ignore[arg-type]
        written.append(str(paths[0]))
    if getattr(args, "json", False):
        _print_json({"traces": written})
    else:
        for path in written:
            print(path)
    return EXIT_OK


def gradcheck_cmd(args: argparse.Namespace) -> int:
    from .gradcheck import run_suite

    seed = args.seed if getattr(args, "seed", None) is not None else 0
    results = run_suite(seed, include_losses=not args.ops_only)
    failed = [r for r in results if not r.passed]
    if getattr(args, "json", False):
        _print_json([{"name": r.name, "max_rel_error": r.max_rel_error, "checked": r.checked, "passed": r.passed}
                     for r in results])
    else:
        for r in results:
            print(f"{'ok  ' if r.passed else 'FAIL'}  {r.name:<28} max_rel_err={r.max_rel_error:.3e}  n={r.checked}")
    if failed:
        return _fail("check_failed", f"{len(failed)} gradient checks failed: {', '.join(r.name for r in failed)}")
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

_CLI_EPILOG = """\
EXAMPLES
  # Generate the default grid world (2000/500/500 per task)
  stacknmn gen --seed 1

  # Train with layout supervision, reading defaults from a config file
  stacknmn train --config configs/gridworld.cfg --layout-supervision on

  # Soft and discretized accuracy on the test split, plus the gap
  stacknmn eval --mode both --split test

  # Per-step traces (JSON + one PGM heatmap per step)
  stacknmn trace --ids 0,1

ENVIRONMENT
  STACKNMN_LOG_LEVEL   Default for --log-level (INFO)
  STACKNMN_OUT_DIR     Default for --out-dir (runs)
  STACKNMN_SEED        Default seed when neither --seed nor the config sets one

EXIT CODES
  0 ok, 1 check failed, 2 usage, 3 missing file, 4 config,
  5 dataset/checkpoint parse, 6 training or generation, 7 unwritable output
"""


def _add_global_args(parser: argparse.ArgumentParser, *, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="Flat key = value config file.")
    parser.add_argument("--seed", type=int, default=default, help="Seed for data generation and training.")
    parser.add_argument("--out-dir", default=default, help=f"Run directory (default: $STACKNMN_OUT_DIR or {DEFAULT_OUT_DIR}).")
    parser.add_argument("--task", choices=["vqa", "ref", "both"], default=default, help="Task mix.")
    parser.add_argument("--layout-supervision", type=_on_off, default=default, metavar="on|off",
                        help="Supervise module weights with the expert layout.")
    parser.add_argument("--steps", type=int, default=default, help="Controller steps T.")
    parser.add_argument("--stack-depth", type=int, default=default, help="Stack depth L (default: T + 1).")
    parser.add_argument("--hidden", type=int, default=default, help="Hidden size d.")
    parser.add_argument("--log-level", default=default, help="Logging level (default: $STACKNMN_LOG_LEVEL or INFO).")
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="Print machine-readable JSON output.")


def _add_data_dir(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-dir", help="Dataset directory (default: <out-dir>/data).")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="stacknmn",
        description="Stack neural module networks on a synthetic grid world.",
        epilog=_CLI_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"stacknmn {__version__}")
    _add_global_args(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    gen_p = sub.add_parser("gen", help="Generate train/val/test splits and vocabularies.")
    _add_global_args(gen_p, suppress=True)
    _add_data_dir(gen_p)
    gen_p.add_argument("--grid", type=int, help="Grid size K.")
    gen_p.add_argument("--train-size", type=int, help="Records per task in the train split.")
    gen_p.add_argument("--val-size", type=int, help="Records per task in the val split.")
    gen_p.add_argument("--test-size", type=int, help="Records per task in the test split.")
    gen_p.set_defaults(func=gen_cmd)

    train_p = sub.add_parser("train", help="Train a model; writes checkpoints and metrics.jsonl.")
    _add_global_args(train_p, suppress=True)
    _add_data_dir(train_p)
    train_p.add_argument("--epochs", type=int, help="Number of epochs.")
    train_p.add_argument("--lr", type=float, help="Adam learning rate.")
    train_p.add_argument("--batch-size", type=int, help="Examples per optimizer step.")
    train_p.set_defaults(func=train_cmd)

    eval_p = sub.add_parser("eval", help="Evaluate a checkpoint on a split.")
    _add_global_args(eval_p, suppress=True)
    _add_data_dir(eval_p)
    eval_p.add_argument("--mode", choices=["soft", "discretized", "both"], default="soft",
                        help="Soft module weights, their one-hot argmax, or both (reports the gap).")
    eval_p.add_argument("--split", choices=["train", "val", "test"], default="val")
    eval_p.add_argument("--checkpoint", help="Checkpoint file (default: <out-dir>/train/best.ckpt).")
    eval_p.set_defaults(func=eval_cmd)

    trace_p = sub.add_parser("trace", help="Export per-step traces and attention heatmaps.")
    _add_global_args(trace_p, suppress=True)
    _add_data_dir(trace_p)
    trace_p.add_argument("--ids", required=True, help="Comma-separated example indices or record ids.")
    trace_p.add_argument("--split", choices=["train", "val", "test"], default="val")
    trace_p.add_argument("--mode", choices=["soft", "discretized"], default="soft")
    trace_p.add_argument("--layout", help="Force a module layout, e.g. Find,Answer (NoOp-padded).")
    trace_p.add_argument("--checkpoint", help="Checkpoint file (default: <out-dir>/train/best.ckpt).")
    trace_p.add_argument("--trace-dir", help="Output directory (default: <out-dir>/traces).")
    trace_p.set_defaults(func=trace_cmd)

    grad_p = sub.add_parser("gradcheck", help="Finite-difference checks of every op and the full losses.")
    _add_global_args(grad_p, suppress=True)
    grad_p.add_argument("--ops-only", action="store_true", help="Skip the full-model loss checks.")
    grad_p.set_defaults(func=gradcheck_cmd)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        return _fail("usage", str(exc))

    level = (getattr(args, "log_level", None) or LOG_LEVEL).upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "INFO",
        format="[stacknmn] %(message)s",
        stream=sys.stderr,
        force=True,
    )
    logger.debug("stacknmn %s: %s", __version__, args.command)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except (DatasetParseError, CheckpointError, VocabularyError, LayoutError, ShapeError, UnicodeDecodeError) as exc:
        return _fail("parse", str(exc))
    except (TrainingError, GenerationError, StackBoundsError) as exc:
        return _fail("training", str(exc))
    except OSError as exc:
        return _fail("unwritable", str(exc))
    except Exception as exc:
        logger.debug("unhandled failure in %s", args.command, exc_info=True)
        return _fail("training", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    raise SystemExit(main())
