"""Parsers for model replies and the scale/binary label mappings."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum

from .promptkit import LabelKind

DEFAULT_THRESHOLD = 5
SCALE_MAX = 9

# Standalone means not embedded in a longer alphabetic or alphanumeric run:
# "TRUE." and "(false)" count, "untrue" and "x7y" do not.
_TRUE_RE = re.compile(r"(?<![A-Za-z])true(?![A-Za-z])", re.IGNORECASE)
_FALSE_RE = re.compile(r"(?<![A-Za-z])false(?![A-Za-z])", re.IGNORECASE)
_INT_RE = re.compile(r"(?<![0-9A-Za-z])[0-9]+(?![0-9A-Za-z])")


class HateLabel(IntEnum):
    NOT_HATEFUL = 0
    HATEFUL = 1


class ParseError(ValueError):
    """Raised when a reply does not contain a usable answer."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class ParsedOutcome:
    """Normalized result of parsing one model reply.

    ``score`` is always populated: the ranking score for parseable replies
    and a neutral 0.5 placeholder when ``status`` is ``parse_error``.
    """

    kind: LabelKind
    binary: HateLabel | None
    scale: int | None
    score: float
    status: str  # "ok" | "parse_error"


def parse_binary(text: str) -> HateLabel:
    """Extract a TRUE/FALSE verdict; exactly one kind must be present."""
    has_true = _TRUE_RE.search(text) is not None
    has_false = _FALSE_RE.search(text) is not None
    if has_true and not has_false:
        return HateLabel.HATEFUL
    if has_false and not has_true:
        return HateLabel.NOT_HATEFUL
    if has_true and has_false:
        raise ParseError("reply contains both TRUE and FALSE", text)
    raise ParseError("reply contains neither TRUE nor FALSE", text)


def parse_scale(text: str) -> int:
    """Extract the first standalone integer in 0..9; larger integers are skipped."""
    for match in _INT_RE.finditer(text):
        value = int(match.group())
        if 0 <= value <= SCALE_MAX:
            return value
    raise ParseError(f"reply contains no standalone integer in 0..{SCALE_MAX}", text)


def scale_to_score(scale: int) -> float:
    """Map a 0..9 rating onto [0, 1] for ranking."""
    if not 0 <= scale <= SCALE_MAX:
        raise ValueError(f"scale must be in 0..{SCALE_MAX}, got {scale}")
    return scale / SCALE_MAX


def scale_to_binary(scale: int, threshold: int = DEFAULT_THRESHOLD) -> HateLabel:
    """Binarize a 0..9 rating: hateful iff scale >= threshold."""
    if not 0 <= scale <= SCALE_MAX:
        raise ValueError(f"scale must be in 0..{SCALE_MAX}, got {scale}")
    if not 1 <= threshold <= SCALE_MAX:
        raise ValueError(f"threshold must be in 1..{SCALE_MAX}, got {threshold}")
    return HateLabel.HATEFUL if scale >= threshold else HateLabel.NOT_HATEFUL


def binary_to_score(label: HateLabel) -> float:
    return 1.0 if label is HateLabel.HATEFUL else 0.0


def failed_outcome(kind: LabelKind) -> ParsedOutcome:
    """The placeholder outcome recorded for an unparseable reply."""
    return ParsedOutcome(kind=kind, binary=None, scale=None, score=0.5, status="parse_error")


def parse_outcome(text: str, kind: LabelKind, threshold: int = DEFAULT_THRESHOLD) -> ParsedOutcome:
    """Parse a reply under the given answer format; never raises on bad replies."""
    try:
        if kind is LabelKind.BINARY:
            label = parse_binary(text)
            return ParsedOutcome(
                kind=kind, binary=label, scale=None, score=binary_to_score(label), status="ok"
            )
        scale = parse_scale(text)
        return ParsedOutcome(
            kind=kind,
            binary=scale_to_binary(scale, threshold),
            scale=scale,
            score=scale_to_score(scale),
            status="ok",
        )
    except ParseError:
        return failed_outcome(kind)
