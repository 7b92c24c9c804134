"""Shared helpers for the adapter test suite."""
from __future__ import annotations

import json
from pathlib import Path

from memegrid_adapter.config import AdapterConfig
from memegrid_adapter.model import train

BINARY_INSTRUCTION = (
    "Decide if the caption is hateful. If it's hateful, return the `TRUE` | `FALSE`."
)

HATEFUL_WORDS = ["awful", "toxic", "slur", "attack", "venom", "abuse"]
BENIGN_WORDS = ["sunny", "flower", "puppy", "picnic", "smile", "garden"]


def prompt_for(caption: str) -> str:
    return f"{BINARY_INSTRUCTION}\nCaption: {caption}"


def write_corpus(path: Path, rows: list[tuple[str, str]]) -> Path:
    """Write (caption, target) rows as exported training lines."""
    with path.open("w", encoding="utf-8") as fh:
        for caption, target in rows:
            fh.write(
                json.dumps(
                    {"prompt": prompt_for(caption), "image": None, "target": target},
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def separable_rows(per_class: int = 60) -> list[tuple[str, str]]:
    """Two disjoint vocabularies, one per class; trivially learnable."""
    rows = []
    for i in range(per_class):
        hateful = " ".join(HATEFUL_WORDS[(i + j) % len(HATEFUL_WORDS)] for j in range(4))
        benign = " ".join(BENIGN_WORDS[(i + j) % len(BENIGN_WORDS)] for j in range(4))
        rows.append((f"{hateful} {i}", "TRUE"))
        rows.append((f"{benign} {i}", "FALSE"))
    return rows


def write_config(path: Path, **overrides) -> Path:
    obj = {
        "base_model": "stub",
        "corpus": str(path.parent / "corpus.jsonl"),
        "output_dir": str(path.parent / "model"),
    }
    obj.update(overrides)
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def stub_model_dir(tmp_path: Path) -> Path:
    """Train a stub model over a one-line corpus; returns the model directory."""
    corpus = write_corpus(tmp_path / "stub_corpus.jsonl", [("anything", "FALSE")])
    config = AdapterConfig(
        base_model="stub", corpus=str(corpus), output_dir=str(tmp_path / "stub_model")
    )
    model_dir, _ = train(config)
    return model_dir
