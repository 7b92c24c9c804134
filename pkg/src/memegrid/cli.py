"""Command-line interface.

Exit codes: 0 success, 1 user error (bad arguments, unreadable or invalid
input files), 2 runtime failure (backend or I/O trouble mid-operation).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .backends import BackendError, BackendSpec, Decoding, ResponseCache
from .dataset import DatasetError, load_split, subsample, validate_images, write_split
from .gridrun import (
    GridError,
    best_run,
    load_grid_results,
    load_grid_spec,
    load_predictions,
    render_report,
    run_grid,
)
from .labeling import (
    consistency_filter,
    distill,
    export_training_file,
    load_scaled_file,
    write_scaled_file,
)
from .metrics import evaluate_run
from .parsing import DEFAULT_THRESHOLD
from .promptkit import LabelKind, Modality, PromptKind, compose


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _pct(value: float | None) -> str | None:
    return None if value is None else f"{value * 100:.3f}"


def _backend_spec_from_file(path: str) -> BackendSpec:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    backend_id = obj.pop("id")
    return BackendSpec(id=backend_id, **obj)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="seed for any sampling involved")
    parser.add_argument("--workers", type=int, default=4, help="concurrent backend requests")
    parser.add_argument("--cache-dir", default=None, help="response cache directory")
    parser.add_argument(
        "--threshold", type=int, default=DEFAULT_THRESHOLD,
        help="scale cutoff: ratings >= this count as hateful",
    )
    parser.add_argument(
        "--policy", choices=("pessimistic", "exclude"), default="pessimistic",
        help="how evaluation treats unparseable replies",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="memegrid", description="Hateful-content classification ablation grid")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a split file and report basic stats")
    p.add_argument("data", help="JSONL split file")
    p.add_argument("--split", default=None, help="split name when the filename does not say")
    p.add_argument("--images", default=None, help="image root to check references against")
    p.add_argument("--unlabeled", action="store_true", help="allow records without labels")
    p.add_argument("--sample", type=int, default=None, help="subsample to this many records")
    p.add_argument("--out", default=None, help="write the (possibly subsampled) split here")
    _add_common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("compose", help="print an assembled prompt")
    p.add_argument("--prompt", choices=[k.value for k in PromptKind], required=True)
    p.add_argument("--label", choices=[k.value for k in LabelKind], required=True)
    p.set_defaults(func=_cmd_compose)

    p = sub.add_parser("distill", help="rate records with a teacher backend")
    p.add_argument("data", help="labeled JSONL split file")
    p.add_argument("--split", default=None)
    p.add_argument("--teacher", required=True, help="backend spec JSON file")
    p.add_argument("--prompt", choices=[k.value for k in PromptKind], default="simple")
    p.add_argument("--modality", choices=[m.value for m in Modality], default="multimodal")
    p.add_argument("--images", default=None, help="image root for multimodal requests")
    p.add_argument("--out", required=True, help="output scaled-records JSONL file")
    _add_common(p)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("export-train", help="write a training corpus from a split or scaled file")
    p.add_argument("--data", default=None, help="labeled split (binary targets)")
    p.add_argument("--split", default=None)
    p.add_argument("--scaled", default=None, help="distilled scaled-records file (scale targets)")
    p.add_argument("--prompt", choices=[k.value for k in PromptKind], required=True)
    p.add_argument("--label", choices=[k.value for k in LabelKind], required=True)
    p.add_argument("--modality", choices=[m.value for m in Modality], default="multimodal")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_export_train)

    p = sub.add_parser("run", help="execute every run in a grid file")
    p.add_argument("grid", help="grid spec JSON file")
    p.add_argument("--out", required=True, help="output directory for runs and the report")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="score one finished run directory")
    p.add_argument("run_dir", help="directory holding predictions.jsonl")
    p.add_argument("--data", required=True, help="labeled split the run answered")
    p.add_argument("--split", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render the results table for a grid output directory")
    p.add_argument("--runs", required=True, help="grid output directory")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("best", help="print the winning run config for a grid output directory")
    p.add_argument("--runs", required=True, help="grid output directory")
    p.set_defaults(func=_cmd_best)

    return parser


def _cmd_ingest(args: argparse.Namespace) -> int:
    split = load_split(args.data, require_labels=not args.unlabeled, name=args.split)
    if args.sample is not None:
        split = subsample(split, args.sample, args.seed)
    summary: dict[str, object] = {
        "split": split.name,
        "records": len(split),
        "labeled": sum(1 for r in split if r.label is not None),
        "positive": sum(1 for r in split if r.label == 1),
    }
    if args.images is not None:
        missing = validate_images(split, args.images)
        summary["missing_images"] = len(missing)
        summary["missing_image_ids"] = missing[:10]
    if args.out is not None:
        write_split(split, args.out)
        summary["written"] = args.out
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_compose(args: argparse.Namespace) -> int:
    prompt = compose(PromptKind(args.prompt), LabelKind(args.label))
    print(prompt.text)
    return 0


def _cmd_distill(args: argparse.Namespace) -> int:
    split = load_split(args.data, require_labels=True, name=args.split)
    teacher = _backend_spec_from_file(args.teacher)
    cache = ResponseCache(args.cache_dir if args.cache_dir else Path(args.out).parent / "cache")
    scaled = distill(
        split,
        teacher,
        PromptKind(args.prompt),
        cache=cache,
        threshold=args.threshold,
        modality=Modality(args.modality),
        image_root=args.images,
        workers=args.workers,
    )
    write_scaled_file(scaled, args.out, threshold=args.threshold)
    kept = sum(1 for s in scaled if s.retained)
    failed = sum(1 for s in scaled if s.failed)
    print(json.dumps({"total": len(scaled), "kept": kept, "failed": failed, "out": args.out}))
    return 0


def _cmd_export_train(args: argparse.Namespace) -> int:
    label_kind = LabelKind(args.label)
    if (args.data is None) == (args.scaled is None):
        raise _UsageError("export-train: pass exactly one of --data or --scaled")
    if label_kind is LabelKind.SCALE:
        if args.scaled is None:
            raise _UsageError("export-train: scale targets need --scaled (distill first)")
        scaled = load_scaled_file(args.scaled)
        stats = {
            "total": len(scaled),
            "kept": sum(1 for s in scaled if s.retained),
            "dropped": sum(1 for s in scaled if not s.retained and not s.failed),
            "failed": sum(1 for s in scaled if s.failed),
        }
        items = consistency_filter(scaled, args.threshold)
        written = export_training_file(
            items, PromptKind(args.prompt), label_kind, Modality(args.modality),
            args.out, stats=stats, threshold=args.threshold,
        )
    else:
        if args.data is not None:
            source = load_split(args.data, require_labels=True, name=args.split).records
        else:
            source = [s for s in load_scaled_file(args.scaled)]
        written = export_training_file(
            list(source), PromptKind(args.prompt), label_kind, Modality(args.modality),
            args.out, threshold=args.threshold,
        )
    print(json.dumps({"written": written, "out": args.out}))
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    grid = load_grid_spec(args.grid)
    table, _ = run_grid(
        grid, args.out, workers=args.workers, cache_dir=args.cache_dir, fmt=args.format
    )
    print(table, end="")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    split = load_split(args.data, require_labels=True, name=args.split)
    preds = load_predictions(args.run_dir)
    report = evaluate_run(
        preds, split.records, policy=args.policy, threshold_used=args.threshold
    )
    payload = {
        "accuracy": _pct(report.accuracy),
        "precision": _pct(report.precision),
        "recall": _pct(report.recall),
        "f1": _pct(report.f1),
        "auroc": _pct(report.auroc),
        "parse_failure_rate": _pct(report.parse_failure_rate),
        "n": report.n,
        "policy": report.policy,
        "threshold": report.threshold_used,
    }
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    rows = load_grid_results(args.runs)
    print(render_report(rows, args.format), end="")
    return 0


def _cmd_best(args: argparse.Namespace) -> int:
    rows = load_grid_results(args.runs)
    print(json.dumps(best_run(rows).to_dict(), indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DatasetError, GridError, ValueError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (BackendError, OSError) as exc:
        print(f"backend/runtime error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
