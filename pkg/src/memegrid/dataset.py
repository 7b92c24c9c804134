"""Dataset loading, validation, and deterministic subsampling.

The on-disk format is JSON lines: one object per line with keys ``id``,
``img``, ``text`` and (for labeled splits) ``label``. Ids are opaque
strings and are never parsed numerically.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

SPLIT_NAMES = ("train", "dev", "test")


class DatasetError(Exception):
    """Raised for malformed split files or invalid dataset operations.

    ``line_errors`` carries one human-readable message per offending line
    when the failure came from parsing a split file.
    """

    def __init__(self, message: str, line_errors: list[str] | None = None):
        super().__init__(message)
        self.line_errors = line_errors or []


@dataclass(frozen=True)
class Record:
    """One dataset row: an image reference, its caption, and an optional label."""

    id: str
    image_ref: str
    text: str
    label: int | None = None

    def __post_init__(self) -> None:
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0, 1, or None, got {self.label!r}")


@dataclass(frozen=True)
class Split:
    """An ordered, immutable collection of records under a split name."""

    name: str
    records: tuple[Record, ...]

    def __post_init__(self) -> None:
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)


def _is_plain_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _parse_line(raw: str, require_labels: bool) -> Record:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"expected an object, got {type(obj).__name__}")

    rid = obj.get("id")
    if rid is None:
        raise ValueError("missing field 'id'")
    if _is_plain_int(rid):
        rid = str(rid)
    elif not isinstance(rid, str):
        raise ValueError(f"field 'id' must be a string, got {type(rid).__name__}")

    img = obj.get("img")
    if not isinstance(img, str):
        raise ValueError("missing or non-string field 'img'")
    text = obj.get("text")
    if not isinstance(text, str):
        raise ValueError("missing or non-string field 'text'")

    label = obj.get("label")
    if label is None:
        if require_labels:
            raise ValueError("missing field 'label' in a labeled split")
    elif not _is_plain_int(label) or label not in (0, 1):
        raise ValueError(f"field 'label' must be 0 or 1, got {label!r}")

    return Record(id=rid, image_ref=img, text=text, label=label)


def infer_split_name(path: str | Path) -> str | None:
    """Guess the split name from a filename stem like ``dev.jsonl``; None if ambiguous."""
    stem = Path(path).stem.lower()
    for name in SPLIT_NAMES:
        if stem == name or stem.startswith(name + "_") or stem.endswith("_" + name):
            return name
    return None


def load_split(path: str | Path, *, require_labels: bool = True, name: str | None = None) -> Split:
    """Load a JSONL split file.

    Malformed lines, bad fields, and duplicate ids are collected and raised
    together as one DatasetError; messages carry 1-based line numbers.
    """
    path = Path(path)
    if name is None:
        name = infer_split_name(path)
        if name is None:
            raise DatasetError(
                f"cannot infer split name from {path.name!r}; pass name= explicitly"
            )
    if name not in SPLIT_NAMES:
        raise DatasetError(f"split name must be one of {SPLIT_NAMES}, got {name!r}")

    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read split file {path}: {exc}") from exc

    records: list[Record] = []
    errors: list[str] = []
    first_seen: dict[str, int] = {}
    for line_no, raw in enumerate(raw_lines, start=1):
        if not raw.strip():
            continue
        try:
            record = _parse_line(raw, require_labels)
        except ValueError as exc:
            errors.append(f"line {line_no}: {exc}")
            continue
        if record.id in first_seen:
            errors.append(
                f"line {line_no}: duplicate id {record.id!r} (first seen on line {first_seen[record.id]})"
            )
            continue
        first_seen[record.id] = line_no
        records.append(record)

    if errors:
        preview = "; ".join(errors[:5])
        more = "" if len(errors) <= 5 else f" (+{len(errors) - 5} more)"
        raise DatasetError(f"{path}: {len(errors)} bad line(s): {preview}{more}", errors)
    if not records:
        raise DatasetError(f"{path}: split file contains no records")
    return Split(name=name, records=tuple(records))


def write_split(split: Split, path: str | Path) -> None:
    """Serialize a split back to JSONL; load_split(write_split(s)) round-trips."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in split.records:
            obj: dict[str, object] = {"id": record.id, "img": record.image_ref, "text": record.text}
            if record.label is not None:
                obj["label"] = record.label
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def validate_images(split: Split, image_root: str | Path) -> list[str]:
    """Return ids of records whose image file is missing under image_root, in split order."""
    root = Path(image_root)
    if not root.is_dir():
        raise DatasetError(f"image root {root} is not a directory")
    return [r.id for r in split.records if not (root / r.image_ref).is_file()]


def subsample(split: Split, n: int, seed: int) -> Split:
    """Deterministically subsample n records.

    Fully labeled splits are sampled per class so the positive share matches
    the source within one record; unlabeled (or partially labeled) splits are
    sampled uniformly. Original record order is preserved. n >= len(split)
    returns the split unchanged.
    """
    if n < 0:
        raise ValueError(f"subsample size must be non-negative, got {n}")
    total = len(split.records)
    if n >= total:
        return split

    rng = random.Random(seed)
    if n > 0 and all(r.label is not None for r in split.records):
        pos = [i for i, r in enumerate(split.records) if r.label == 1]
        neg = [i for i, r in enumerate(split.records) if r.label == 0]
        n_pos = min(round(n * len(pos) / total), len(pos))
        n_neg = min(n - n_pos, len(neg))
        n_pos = min(n - n_neg, len(pos))
        chosen = sorted(rng.sample(pos, n_pos) + rng.sample(neg, n_neg))
    else:
        chosen = sorted(rng.sample(range(total), n))
    return Split(name=split.name, records=tuple(split.records[i] for i in chosen))
