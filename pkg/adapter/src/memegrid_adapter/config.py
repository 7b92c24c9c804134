"""Training configuration and corpus loading."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


class AdapterError(Exception):
    """Base class for everything this package raises on purpose."""


class ConfigError(AdapterError):
    """The configuration file is missing, malformed, or inconsistent."""


class CorpusError(AdapterError):
    """The training corpus is missing, empty, or contains bad lines."""

    def __init__(self, message: str, line_errors: list[str] | None = None):
        super().__init__(message)
        self.line_errors = list(line_errors or [])


STUB_BASE_MODEL = "stub"
DEFAULT_EPOCHS = 12
DEFAULT_BATCH_SIZE = 12
DEFAULT_LEARNING_RATE = 2e-5
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_FEATURE_DIM = 1024

VALID_TARGETS = frozenset({"TRUE", "FALSE"} | {str(d) for d in range(10)})

_CONFIG_KEYS = frozenset(
    {
        "base_model",
        "corpus",
        "output_dir",
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "seed",
        "feature_dim",
    }
)


@dataclass(frozen=True)
class AdapterConfig:
    """Everything a training run needs, with published defaults."""

    base_model: str
    corpus: str
    output_dir: str
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    seed: int = 0
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        if not self.base_model or not isinstance(self.base_model, str):
            raise ConfigError("base_model must be a non-empty string")
        for field_name in ("corpus", "output_dir"):
            if not isinstance(getattr(self, field_name), str) or not getattr(self, field_name):
                raise ConfigError(f"{field_name} must be a non-empty path string")
        for field_name in ("epochs", "batch_size", "feature_dim"):
            value = getattr(self, field_name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{field_name} must be a positive integer, got {value!r}")
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        # Zero is allowed so regularization can be switched off outright.
        if not isinstance(self.weight_decay, (int, float)) or self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")


def load_config(path: str | Path) -> AdapterConfig:
    """Parse a JSON config file into an AdapterConfig.

    Unknown keys are rejected so typos fail loudly instead of silently
    falling back to defaults.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(k for k in ("base_model", "corpus", "output_dir") if k not in raw)
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    return AdapterConfig(**raw)


@dataclass(frozen=True)
class TrainingExample:
    """One exported training line: prompt text, optional image ref, reply token."""

    prompt: str
    image: str | None
    target: str


def _parse_example(obj: object) -> TrainingExample:
    if not isinstance(obj, dict):
        raise ValueError("line must be a JSON object")
    prompt = obj.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise ValueError("'prompt' must be a non-empty string")
    image = obj.get("image")
    if image is not None and not isinstance(image, str):
        raise ValueError("'image' must be a string or null")
    target = obj.get("target")
    if not isinstance(target, str) or target not in VALID_TARGETS:
        raise ValueError(
            f"'target' must be TRUE, FALSE, or a digit 0-9, got {target!r}"
        )
    return TrainingExample(prompt=prompt, image=image, target=target)


def load_corpus(path: str | Path) -> list[TrainingExample]:
    """Read an exported training file, validating every line.

    Raises CorpusError listing the first few bad lines, or when the file
    yields no examples at all.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    examples: list[TrainingExample] = []
    errors: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc})")
                continue
            try:
                examples.append(_parse_example(obj))
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        preview = "; ".join(errors[:5])
        if len(errors) > 5:
            preview += f"; +{len(errors) - 5} more"
        raise CorpusError(f"corpus {path} has {len(errors)} bad line(s): {preview}", errors)
    if not examples:
        raise CorpusError(f"corpus {path} contains no training examples")
    return examples
