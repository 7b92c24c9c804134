"""Teacher-scored relabeling and training-corpus export.

A teacher backend rates each labeled record on the 0..9 scale; records whose
rating disagrees with their ground-truth label are dropped before training
data is exported. Export targets are the literal reply tokens a model is
supposed to produce (TRUE/FALSE or a single digit).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends import BackendError, BackendSpec, Decoding, ResponseCache, cached_query, open_backend
from .dataset import Record, Split
from .parsing import DEFAULT_THRESHOLD, ParseError, parse_scale, scale_to_binary
from .promptkit import LabelKind, Modality, PromptKind, compose, render_request


@dataclass(frozen=True)
class ScaledRecord:
    """One record plus its teacher rating.

    ``failed`` means no usable rating was obtained (parse failure or backend
    error); ``retained`` means the rating agrees with the ground-truth label.
    """

    record: Record
    teacher_scale: int | None
    teacher_backend_id: str
    retained: bool
    failed: bool


def distill(
    split: Split,
    teacher: BackendSpec,
    prompt_kind: PromptKind = PromptKind.SIMPLE,
    *,
    cache: ResponseCache,
    threshold: int = DEFAULT_THRESHOLD,
    modality: Modality = Modality.MULTIMODAL,
    image_root: str | Path | None = None,
    decoding: Decoding | None = None,
    workers: int = 4,
) -> list[ScaledRecord]:
    """Rate every record with the teacher on the 0..9 scale.

    Records must be labeled. Failures never abort the pass: a record whose
    reply cannot be parsed, or whose query exhausts retries, comes back with
    ``failed=True``. Output order matches input order, and responses are
    cached, so a rerun with the same cache is free.
    """
    unlabeled = [r.id for r in split.records if r.label is None]
    if unlabeled:
        raise ValueError(f"distillation needs labels; {len(unlabeled)} record(s) lack one, e.g. {unlabeled[0]!r}")
    prompt = compose(prompt_kind, LabelKind.SCALE)
    backend = open_backend(teacher)

    def score_one(record: Record) -> ScaledRecord:
        try:
            request = render_request(
                record, prompt, modality, image_root=image_root, decoding=decoding
            )
            response = cached_query(cache, backend, request)
            scale = parse_scale(response.text)
        except (ParseError, BackendError, OSError, ValueError):
            return ScaledRecord(
                record=record,
                teacher_scale=None,
                teacher_backend_id=teacher.id,
                retained=False,
                failed=True,
            )
        keep = scale_to_binary(scale, threshold) == record.label
        return ScaledRecord(
            record=record,
            teacher_scale=scale,
            teacher_backend_id=teacher.id,
            retained=keep,
            failed=False,
        )

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score_one, split.records))
    finally:
        backend.close()


def consistency_filter(
    scaled: Sequence[ScaledRecord], threshold: int = DEFAULT_THRESHOLD
) -> list[ScaledRecord]:
    """Keep records whose binarized teacher rating matches the ground truth.

    Order is preserved; records without a rating are dropped. The rule is
    recomputed from the stored rating so the filter works on reloaded files.
    """
    kept = []
    for item in scaled:
        if item.teacher_scale is None:
            continue
        if scale_to_binary(item.teacher_scale, threshold) == item.record.label:
            kept.append(item)
    return kept


def write_scaled_file(scaled: Sequence[ScaledRecord], path: str | Path, *, threshold: int) -> None:
    """Persist distillation output as JSONL, plus a sidecar manifest with counts."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for item in scaled:
            fh.write(
                json.dumps(
                    {
                        "id": item.record.id,
                        "img": item.record.image_ref,
                        "text": item.record.text,
                        "label": item.record.label,
                        "teacher_scale": item.teacher_scale,
                        "teacher_backend": item.teacher_backend_id,
                        "retained": item.retained,
                        "failed": item.failed,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    manifest = {
        "teacher_backend": scaled[0].teacher_backend_id if scaled else None,
        "threshold": threshold,
        "total": len(scaled),
        "kept": sum(1 for s in scaled if s.retained),
        "dropped": sum(1 for s in scaled if not s.retained and not s.failed),
        "failed": sum(1 for s in scaled if s.failed),
    }
    Path(f"{path}.manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_scaled_file(path: str | Path) -> list[ScaledRecord]:
    path = Path(path)
    items: list[ScaledRecord] = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            record = Record(id=str(obj["id"]), image_ref=obj["img"], text=obj["text"], label=obj["label"])
            items.append(
                ScaledRecord(
                    record=record,
                    teacher_scale=obj["teacher_scale"],
                    teacher_backend_id=obj["teacher_backend"],
                    retained=obj["retained"],
                    failed=obj["failed"],
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {line_no}: bad scaled record: {exc}") from exc
    return items


def export_training_file(
    items: Sequence[Record | ScaledRecord],
    prompt_kind: PromptKind,
    label_kind: LabelKind,
    modality: Modality,
    path: str | Path,
    *,
    stats: dict | None = None,
    threshold: int = DEFAULT_THRESHOLD,
) -> int:
    """Write a training corpus: one ``{prompt, image, target}`` object per line.

    Binary targets come from ground-truth labels; scale targets are the
    teacher's digits, so scale export accepts only retained ScaledRecords.
    Returns the number of examples written and writes a sidecar manifest.
    """
    prompt = compose(prompt_kind, label_kind)
    path = Path(path)
    teacher_id: str | None = None
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            if isinstance(item, ScaledRecord):
                record = item.record
                teacher_id = item.teacher_backend_id
            else:
                record = item
            if label_kind is LabelKind.BINARY:
                if record.label is None:
                    raise ValueError(f"record {record.id!r} has no label; cannot export a binary target")
                target = "TRUE" if record.label == 1 else "FALSE"
            else:
                if not isinstance(item, ScaledRecord) or item.teacher_scale is None:
                    raise ValueError(f"record {record.id!r} has no teacher rating; run distillation first")
                if not item.retained:
                    raise ValueError(f"record {record.id!r} was not retained; filter before exporting")
                target = str(item.teacher_scale)
            fh.write(
                json.dumps(
                    {
                        "prompt": f"{prompt.text}\nCaption: {record.text}",
                        "image": record.image_ref if modality is Modality.MULTIMODAL else None,
                        "target": target,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    manifest = {
        "prompt_kind": prompt_kind.value,
        "label_kind": label_kind.value,
        "modality": modality.value,
        "threshold": threshold,
        "teacher_backend": teacher_id,
        "written": len(items),
    }
    if stats:
        manifest.update(stats)
    Path(f"{path}.manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return len(items)
