"""Hashed bag-of-words classifier plus model directory save/load.

The real mode trains a multinomial logistic regression over hashed word
features of the caption portion of each prompt, using minibatch gradient
descent with decoupled weight decay. It is a CPU-sized stand-in for the
parameter-efficient fine-tuning a production deployment would run; the
serving contract is identical either way.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import AdapterConfig, AdapterError, CorpusError, TrainingExample, load_corpus
from .config import STUB_BASE_MODEL

MODEL_FILE = "adapter.json"
WEIGHTS_FILE = "weights.npz"
MODEL_FORMAT = 1

CAPTION_MARKER = "\nCaption: "
_WORD_RE = re.compile(r"[a-z0-9']+")


class ModelError(AdapterError):
    """The model directory is missing pieces or unreadable."""


def caption_of(prompt: str) -> str:
    """Return the caption portion of a composed prompt.

    Prompts arrive as instruction text followed by a caption line; only
    the caption varies per record, so it carries all the signal. Prompts
    without the marker are used whole.
    """
    idx = prompt.rfind(CAPTION_MARKER)
    if idx < 0:
        return prompt
    return prompt[idx + len(CAPTION_MARKER):]


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def hashed_features(text: str, dim: int) -> np.ndarray:
    """Presence vector of hashed lowercase word tokens."""
    vec = np.zeros(dim, dtype=np.float64)
    for token in _WORD_RE.findall(text.lower()):
        vec[_bucket(token, dim)] = 1.0
    return vec


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def train_classifier(
    examples: list[TrainingExample], config: AdapterConfig
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Fit weights over the corpus; returns (classes, W, b)."""
    classes = sorted({ex.target for ex in examples})
    class_index = {c: i for i, c in enumerate(classes)}
    dim, k = config.feature_dim, len(classes)
    features = np.stack([hashed_features(caption_of(ex.prompt), dim) for ex in examples])
    labels = np.array([class_index[ex.target] for ex in examples], dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    weights = 0.01 * rng.standard_normal((dim, k))
    bias = np.zeros(k, dtype=np.float64)
    n = len(examples)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            x, y = features[batch], labels[batch]
            probs = _softmax(x @ weights + bias)
            probs[np.arange(len(batch)), y] -= 1.0
            probs /= len(batch)
            weights -= config.learning_rate * (x.T @ probs)
            weights -= config.learning_rate * config.weight_decay * weights
            bias -= config.learning_rate * probs.sum(axis=0)
    return classes, weights, bias


class StubPredictor:
    """Fixed answer for every request; exists so protocol tests need no training."""

    mode = "stub"

    def predict(self, prompt: str, image_b64: str | None = None) -> str:
        return "FALSE"


class BowPredictor:
    """Argmax over the trained class vocabulary."""

    mode = "bow"

    def __init__(self, classes: list[str], weights: np.ndarray, bias: np.ndarray):
        self.classes = classes
        self.weights = weights
        self.bias = bias

    def predict(self, prompt: str, image_b64: str | None = None) -> str:
        vec = hashed_features(caption_of(prompt), self.weights.shape[0])
        logits = vec @ self.weights + self.bias
        return self.classes[int(np.argmax(logits))]


def train(config: AdapterConfig) -> tuple[Path, dict]:
    """Train per the config and write a loadable model directory.

    Returns the directory and a small summary. The stub base model skips
    fitting but still requires a readable, non-empty corpus so a broken
    export pipeline cannot hide behind it.
    """
    examples = load_corpus(config.corpus)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MODEL_FORMAT,
        "base_model": config.base_model,
        "examples": len(examples),
        "config": asdict(config),
    }
    if config.base_model == STUB_BASE_MODEL:
        manifest["mode"] = "stub"
    else:
        classes, weights, bias = train_classifier(examples, config)
        manifest["mode"] = "bow"
        manifest["classes"] = classes
        np.savez(out_dir / WEIGHTS_FILE, weights=weights, bias=bias)
    (out_dir / MODEL_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    summary = {
        "model_dir": str(out_dir),
        "mode": manifest["mode"],
        "examples": len(examples),
        "classes": manifest.get("classes", []),
    }
    return out_dir, summary


def load_model(model_dir: str | Path) -> StubPredictor | BowPredictor:
    """Load a model directory written by train()."""
    model_dir = Path(model_dir)
    manifest_path = model_dir / MODEL_FILE
    if not manifest_path.is_file():
        raise ModelError(f"not a model directory (missing {MODEL_FILE}): {model_dir}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"unreadable model manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelError(f"unsupported model format {manifest.get('format')!r}")
    mode = manifest.get("mode")
    if mode == "stub":
        return StubPredictor()
    if mode == "bow":
        weights_path = model_dir / WEIGHTS_FILE
        if not weights_path.is_file():
            raise ModelError(f"model directory missing {WEIGHTS_FILE}: {model_dir}")
        classes = manifest.get("classes")
        if not isinstance(classes, list) or not classes:
            raise ModelError("model manifest has no class vocabulary")
        with np.load(weights_path) as data:
            weights, bias = data["weights"], data["bias"]
        if weights.shape[1] != len(classes) or bias.shape != (len(classes),):
            raise ModelError("weight shapes do not match the class vocabulary")
        return BowPredictor([str(c) for c in classes], weights, bias)
    raise ModelError(f"unknown model mode {mode!r}")


__all__ = [
    "BowPredictor",
    "CAPTION_MARKER",
    "CorpusError",
    "MODEL_FILE",
    "ModelError",
    "StubPredictor",
    "WEIGHTS_FILE",
    "caption_of",
    "hashed_features",
    "load_model",
    "train",
    "train_classifier",
]
