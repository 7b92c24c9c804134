"""Grid enumeration, resumable run execution, and result reporting.

A grid file describes model arms (backend binding, modality, fine-tuned or
not) and the prompt/label axes; enumeration walks arms outermost, prompts
next, labels innermost. Each run appends predictions to a JSONL file, one
line per record in dataset order, which makes interrupted runs resumable
with byte-identical output.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import itertools
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import (
    BackendSpec,
    Decoding,
    ResponseCache,
    cached_query,
    open_backend,
)
from .dataset import Record, Split, load_split, subsample
from .metrics import MetricsReport, evaluate_run, report_from_dict
from .parsing import DEFAULT_THRESHOLD, HateLabel, ParsedOutcome, failed_outcome, parse_outcome
from .promptkit import LabelKind, Modality, PromptKind, compose, render_request

log = logging.getLogger(__name__)

GRID_SCHEMA_VERSION = 1

REPORT_COLUMNS = (
    "Category",
    "Model",
    "Prompt",
    "Label",
    "Accuracy",
    "Precision",
    "Recall",
    "F1-score",
    "AUROC",
)


class GridError(Exception):
    """Raised for invalid grid files or malformed run artifacts."""


@dataclass(frozen=True)
class ModelArm:
    """One model under test: a backend plus its modality and training status."""

    name: str
    backend: str
    modality: Modality
    finetune: bool


@dataclass(frozen=True)
class RunConfig:
    """One grid cell, fully pinned; run_id is a content hash of every field."""

    run_id: str
    arm: str
    modality: Modality
    prompt: PromptKind
    label: LabelKind
    finetune: bool
    backend: str
    eval_split: str
    seed: int
    policy: str
    threshold: int
    decoding: Decoding

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "arm": self.arm,
            "modality": self.modality.value,
            "prompt": self.prompt.value,
            "label": self.label.value,
            "finetune": self.finetune,
            "backend": self.backend,
            "eval_split": self.eval_split,
            "seed": self.seed,
            "policy": self.policy,
            "threshold": self.threshold,
            "decoding": {
                "temperature": self.decoding.temperature,
                "max_tokens": self.decoding.max_tokens,
            },
        }


def make_run_config(
    *,
    arm: str,
    modality: Modality,
    prompt: PromptKind,
    label: LabelKind,
    finetune: bool,
    backend: str,
    eval_split: str,
    seed: int,
    policy: str,
    threshold: int,
    decoding: Decoding,
) -> RunConfig:
    payload = {
        "arm": arm,
        "modality": modality.value,
        "prompt": prompt.value,
        "label": label.value,
        "finetune": finetune,
        "backend": backend,
        "eval_split": eval_split,
        "seed": seed,
        "policy": policy,
        "threshold": threshold,
        "temperature": decoding.temperature,
        "max_tokens": decoding.max_tokens,
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
    return RunConfig(
        run_id=digest[:16],
        arm=arm,
        modality=modality,
        prompt=prompt,
        label=label,
        finetune=finetune,
        backend=backend,
        eval_split=eval_split,
        seed=seed,
        policy=policy,
        threshold=threshold,
        decoding=decoding,
    )


@dataclass(frozen=True)
class Prediction:
    """One scored record within a run."""

    record_id: str
    raw_text: str
    outcome: ParsedOutcome
    run_id: str


@dataclass(frozen=True)
class GridSpec:
    """Parsed grid file: data binding, backend table, and the three axes."""

    arms: tuple[ModelArm, ...]
    prompts: tuple[PromptKind, ...]
    labels: tuple[LabelKind, ...]
    backends: Mapping[str, BackendSpec]
    eval_path: str
    eval_split: str
    image_root: str | None
    eval_limit: int | None
    decoding: Decoding
    seed: int
    policy: str
    threshold: int


def _backend_spec_from_dict(backend_id: str, obj: Mapping) -> BackendSpec:
    known = {
        "kind", "endpoint", "model", "auth_env", "command", "noise_rate",
        "seed", "truth_source", "retries", "timeout", "backoff_base",
    }
    unknown = set(obj) - known
    if unknown:
        raise GridError(f"backend {backend_id!r}: unknown key(s) {sorted(unknown)}")
    try:
        return BackendSpec(id=backend_id, **obj)
    except (TypeError, ValueError) as exc:
        raise GridError(f"backend {backend_id!r}: {exc}") from exc


def load_grid_spec(path: str | Path) -> GridSpec:
    """Parse and validate a grid file (JSON, schema version 1)."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise GridError(f"cannot read grid file {path}: {exc}") from exc
    except ValueError as exc:
        raise GridError(f"grid file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise GridError(f"grid file {path} must hold a JSON object")
    if obj.get("v") != GRID_SCHEMA_VERSION:
        raise GridError(f"unsupported grid schema version {obj.get('v')!r}, expected {GRID_SCHEMA_VERSION}")

    try:
        data = obj["data"]
        backends = {
            bid: _backend_spec_from_dict(bid, bspec) for bid, bspec in obj["backends"].items()
        }
        arms = tuple(
            ModelArm(
                name=arm["name"],
                backend=arm["backend"],
                modality=Modality(arm["modality"]),
                finetune=bool(arm["finetune"]),
            )
            for arm in obj["arms"]
        )
        prompts = tuple(PromptKind(p) for p in obj["prompts"])
        labels = tuple(LabelKind(l) for l in obj["labels"])
        decoding = Decoding(**obj.get("decoding", {}))
        grid = GridSpec(
            arms=arms,
            prompts=prompts,
            labels=labels,
            backends=backends,
            eval_path=data["eval"],
            eval_split=data.get("split", "test"),
            image_root=data.get("images"),
            eval_limit=data.get("limit"),
            decoding=decoding,
            seed=int(obj.get("seed", 0)),
            policy=obj.get("policy", "pessimistic"),
            threshold=int(obj.get("threshold", DEFAULT_THRESHOLD)),
        )
    except GridError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise GridError(f"grid file {path} is malformed: {exc}") from exc

    if not grid.arms or not grid.prompts or not grid.labels:
        raise GridError("grid needs at least one arm, one prompt kind, and one label kind")
    names = [a.name for a in grid.arms]
    if len(set(names)) != len(names):
        raise GridError("arm names must be unique")
    for arm in grid.arms:
        if arm.backend not in grid.backends:
            raise GridError(f"arm {arm.name!r} references unknown backend {arm.backend!r}")
        if arm.finetune and grid.backends[arm.backend].kind == "remote_api":
            raise GridError(
                f"arm {arm.name!r} is fine-tuned but bound to a remote_api backend; "
                "fine-tuned arms answer through external_command or mock backends"
            )
    if grid.policy not in ("pessimistic", "exclude"):
        raise GridError(f"policy must be 'pessimistic' or 'exclude', got {grid.policy!r}")
    return grid


def enumerate_grid(grid: GridSpec) -> list[RunConfig]:
    """Expand the grid into run configs: arms outermost, prompts, then labels."""
    configs = []
    for arm in grid.arms:
        for prompt in grid.prompts:
            for label in grid.labels:
                configs.append(
                    make_run_config(
                        arm=arm.name,
                        modality=arm.modality,
                        prompt=prompt,
                        label=label,
                        finetune=arm.finetune,
                        backend=arm.backend,
                        eval_split=grid.eval_split,
                        seed=grid.seed,
                        policy=grid.policy,
                        threshold=grid.threshold,
                        decoding=grid.decoding,
                    )
                )
    return configs


def _prediction_line(pred: Prediction) -> str:
    obj: dict[str, object] = {
        "record_id": pred.record_id,
        "raw_text": pred.raw_text,
        "kind": pred.outcome.kind.value,
        "binary": None if pred.outcome.binary is None else int(pred.outcome.binary),
        "scale": pred.outcome.scale,
        "score": pred.outcome.score,
        "status": pred.outcome.status,
    }
    return json.dumps(obj, ensure_ascii=False)


def _prediction_from_line(raw: str, run_id: str) -> Prediction:
    obj = json.loads(raw)
    outcome = ParsedOutcome(
        kind=LabelKind(obj["kind"]),
        binary=None if obj["binary"] is None else HateLabel(obj["binary"]),
        scale=obj["scale"],
        score=obj["score"],
        status=obj["status"],
    )
    return Prediction(record_id=obj["record_id"], raw_text=obj["raw_text"], outcome=outcome, run_id=run_id)


def _scan_existing(pred_path: Path) -> tuple[list[str], set[str], bool]:
    """Return the valid JSONL prefix of a predictions file and its record ids.

    A crash can leave a torn final line; everything after the first
    unparseable line is discarded so the resume starts from a clean prefix.
    The last element reports whether such a tail was found.
    """
    if not pred_path.exists():
        return [], set(), False
    lines: list[str] = []
    ids: set[str] = set()
    raw_lines = pred_path.read_text(encoding="utf-8").splitlines()
    for raw in raw_lines:
        try:
            obj = json.loads(raw)
            rid = obj["record_id"]
        except (ValueError, KeyError, TypeError):
            log.warning("discarding torn tail of %s (%d clean line(s) kept)", pred_path, len(lines))
            break
        lines.append(raw)
        ids.add(rid)
    return lines, ids, len(lines) != len(raw_lines)


def execute_run(
    config: RunConfig,
    records: Sequence[Record],
    backend,
    cache: ResponseCache,
    run_dir: str | Path,
    *,
    image_root: str | Path | None = None,
    workers: int = 4,
) -> Path:
    """Answer every record and append predictions to ``run_dir/predictions.jsonl``.

    Records already present in the file are skipped before any backend call,
    so an interrupted run resumes where it stopped and the completed file is
    byte-identical to an uninterrupted one. Per-record backend failures are
    recorded as parse_error predictions; interrupts propagate and abort.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pred_path = run_dir / "predictions.jsonl"
    clean_lines, done, torn = _scan_existing(pred_path)
    if torn:
        pred_path.write_text("".join(line + "\n" for line in clean_lines), encoding="utf-8")

    prompt = compose(config.prompt, config.label)
    todo = [r for r in records if r.id not in done]
    errors_path = run_dir / "errors.log"

    def answer(record: Record) -> tuple[Prediction, str | None]:
        try:
            request = render_request(
                record, prompt, config.modality, image_root=image_root, decoding=config.decoding
            )
            response = cached_query(cache, backend, request)
        except Exception as exc:  # noqa: BLE001 - per-record failures must not kill the run
            outcome = failed_outcome(config.label)
            return (
                Prediction(record_id=record.id, raw_text="", outcome=outcome, run_id=config.run_id),
                f"{type(exc).__name__}: {exc}",
            )
        outcome = parse_outcome(response.text, config.label, threshold=config.threshold)
        return (
            Prediction(record_id=record.id, raw_text=response.text, outcome=outcome, run_id=config.run_id),
            None,
        )

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    failures = 0
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        with pred_path.open("a", encoding="utf-8") as fh, errors_path.open("a", encoding="utf-8") as errfh:
            # Keep at most `workers` requests in flight and write strictly in
            # record order, so on an abort the backend never ran more than
            # `workers - 1` requests past the last written line.
            window: deque = deque()
            pending = iter(todo)
            for record in itertools.islice(pending, workers):
                window.append(pool.submit(answer, record))
            while window:
                pred, error = window.popleft().result()
                nxt = next(pending, None)
                if nxt is not None:
                    window.append(pool.submit(answer, nxt))
                fh.write(_prediction_line(pred) + "\n")
                fh.flush()
                if pred.outcome.status != "ok":
                    failures += 1
                    errfh.write(
                        json.dumps(
                            {"record_id": pred.record_id, "raw_text": pred.raw_text, "error": error},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
                    errfh.flush()
    except BaseException:
        # Interrupt or crash: drop queued work instead of racing the writer.
        pool.shutdown(wait=True, cancel_futures=True)
        raise
    pool.shutdown(wait=True)

    manifest = {
        "config": config.to_dict(),
        "records_total": len(records),
        "records_resumed": len(done),
        "records_answered": len(todo),
        "parse_failures_new": failures,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return pred_path


def load_predictions(run_dir: str | Path, run_id: str | None = None) -> list[Prediction]:
    """Read back a run's predictions file."""
    run_dir = Path(run_dir)
    pred_path = run_dir / "predictions.jsonl"
    if run_id is None:
        manifest_path = run_dir / "manifest.json"
        if manifest_path.exists():
            run_id = json.loads(manifest_path.read_text(encoding="utf-8"))["config"]["run_id"]
        else:
            run_id = run_dir.name
    preds = []
    try:
        raw_lines = pred_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise GridError(f"cannot read predictions from {run_dir}: {exc}") from exc
    for line_no, raw in enumerate(raw_lines, start=1):
        if not raw.strip():
            continue
        try:
            preds.append(_prediction_from_line(raw, run_id))
        except (ValueError, KeyError, TypeError) as exc:
            raise GridError(f"{pred_path}: line {line_no}: bad prediction: {exc}") from exc
    return preds


def _category_cell(config: RunConfig) -> str:
    mode = "Fine-tuning" if config.finetune else "Prompting"
    flavor = "multimodal" if config.modality is Modality.MULTIMODAL else "unimodal"
    return f"{mode} ({flavor})"


def _pct(value: float) -> str:
    return f"{value * 100:.3f}"


def render_report(
    rows: Sequence[tuple[RunConfig, MetricsReport]], fmt: str = "table"
) -> str:
    """Render run results as a 9-column table (markdown) or CSV.

    Metric cells are percentages with three decimals; the best accuracy and
    best AUROC cells are starred. A null AUROC renders as an empty cell.
    """
    if fmt not in ("table", "csv"):
        raise ValueError(f"format must be 'table' or 'csv', got {fmt!r}")
    if not rows:
        raise ValueError("nothing to report: no runs given")

    best_acc = max(range(len(rows)), key=lambda i: rows[i][1].accuracy)
    with_auroc = [i for i in range(len(rows)) if rows[i][1].auroc is not None]
    best_auc = max(with_auroc, key=lambda i: rows[i][1].auroc) if with_auroc else None

    cells: list[list[str]] = []
    for i, (config, report) in enumerate(rows):
        acc = _pct(report.accuracy) + ("*" if i == best_acc else "")
        auc = "" if report.auroc is None else _pct(report.auroc) + ("*" if i == best_auc else "")
        cells.append(
            [
                _category_cell(config),
                config.arm,
                "Simple" if config.prompt is PromptKind.SIMPLE else "Category",
                "Binary" if config.label is LabelKind.BINARY else "Scale",
                acc,
                _pct(report.precision),
                _pct(report.recall),
                _pct(report.f1),
                auc,
            ]
        )

    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(cells)
        return buf.getvalue()

    widths = [
        max(len(REPORT_COLUMNS[c]), *(len(row[c]) for row in cells))
        for c in range(len(REPORT_COLUMNS))
    ]
    header = "| " + " | ".join(REPORT_COLUMNS[c].ljust(widths[c]) for c in range(len(widths))) + " |"
    rule = "| " + " | ".join("-" * widths[c] for c in range(len(widths))) + " |"
    body = [
        "| " + " | ".join(row[c].ljust(widths[c]) for c in range(len(widths))) + " |"
        for row in cells
    ]
    return "\n".join([header, rule, *body]) + "\n"


def best_run(rows: Sequence[tuple[RunConfig, MetricsReport]]) -> RunConfig:
    """Pick the winning run: accuracy, then AUROC, then enumeration order."""
    best: tuple[RunConfig, MetricsReport] | None = None
    for config, report in rows:
        if report is None:
            continue
        if best is None:
            best = (config, report)
            continue
        b_auc = -1.0 if best[1].auroc is None else best[1].auroc
        r_auc = -1.0 if report.auroc is None else report.auroc
        if report.accuracy > best[1].accuracy or (
            report.accuracy == best[1].accuracy and r_auc > b_auc
        ):
            best = (config, report)
    if best is None:
        raise ValueError("no runs with metrics to choose from")
    return best[0]


def _load_eval_records(grid: GridSpec) -> Split:
    split = load_split(grid.eval_path, require_labels=True, name=grid.eval_split)
    if grid.eval_limit is not None:
        split = subsample(split, grid.eval_limit, grid.seed)
    return split


def run_grid(
    grid: GridSpec,
    out_dir: str | Path,
    *,
    workers: int = 4,
    cache_dir: str | Path | None = None,
    fmt: str = "table",
) -> tuple[str, list[tuple[RunConfig, MetricsReport]]]:
    """Execute every enumerated run, evaluate it, and render the report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = ResponseCache(cache_dir if cache_dir is not None else out_dir / "cache")
    split = _load_eval_records(grid)

    results: list[tuple[RunConfig, MetricsReport]] = []
    for index, config in enumerate(enumerate_grid(grid)):
        run_dir = out_dir / "runs" / config.run_id
        backend = open_backend(grid.backends[config.backend])
        try:
            execute_run(
                config,
                split.records,
                backend,
                cache,
                run_dir,
                image_root=grid.image_root,
                workers=workers,
            )
        finally:
            backend.close()
        preds = load_predictions(run_dir, config.run_id)
        report = evaluate_run(
            preds, split.records, policy=config.policy, threshold_used=config.threshold
        )
        (run_dir / "metrics.json").write_text(
            json.dumps({"index": index, "config": config.to_dict(), "metrics": report.to_dict()}, indent=2),
            encoding="utf-8",
        )
        results.append((config, report))
        log.info("run %s (%s) done: accuracy %.3f", config.run_id, config.arm, report.accuracy)
    return render_report(results, fmt), results


def load_grid_results(out_dir: str | Path) -> list[tuple[RunConfig, MetricsReport]]:
    """Rehydrate (config, metrics) pairs from a finished grid directory."""
    out_dir = Path(out_dir)
    runs_dir = out_dir / "runs"
    if not runs_dir.is_dir():
        raise GridError(f"{out_dir} has no runs/ directory")
    loaded: list[tuple[int, RunConfig, MetricsReport]] = []
    for metrics_path in runs_dir.glob("*/metrics.json"):
        try:
            obj = json.loads(metrics_path.read_text(encoding="utf-8"))
            cfg = obj["config"]
            config = RunConfig(
                run_id=cfg["run_id"],
                arm=cfg["arm"],
                modality=Modality(cfg["modality"]),
                prompt=PromptKind(cfg["prompt"]),
                label=LabelKind(cfg["label"]),
                finetune=cfg["finetune"],
                backend=cfg["backend"],
                eval_split=cfg["eval_split"],
                seed=cfg["seed"],
                policy=cfg["policy"],
                threshold=cfg["threshold"],
                decoding=Decoding(**cfg["decoding"]),
            )
            loaded.append((obj["index"], config, report_from_dict(obj["metrics"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise GridError(f"{metrics_path}: unreadable run metrics: {exc}") from exc
    if not loaded:
        raise GridError(f"{out_dir} contains no evaluated runs")
    loaded.sort(key=lambda item: item[0])
    return [(config, report) for _, config, report in loaded]
