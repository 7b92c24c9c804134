"""Prompt composition from fixed instruction components.

Four component texts ship as package resources. A composed prompt is the
single-space join of the simple task statement, optionally the category
taxonomy, and exactly one answer-format instruction (binary or scale).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

from .dataset import Record

if TYPE_CHECKING:
    from .backends import BackendRequest, Decoding


class PromptKind(Enum):
    SIMPLE = "simple"
    CATEGORY = "category"


class LabelKind(Enum):
    BINARY = "binary"
    SCALE = "scale"


class Modality(Enum):
    MULTIMODAL = "multimodal"
    TEXT_ONLY = "text_only"


class Component(Enum):
    SIMPLE = "simple"
    CATEGORY = "category"
    BINARY_INSTR = "binary"
    SCALE_INSTR = "scale"


_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
}


@dataclass(frozen=True)
class ComposedPrompt:
    """A fully assembled prompt plus the choices that produced it."""

    prompt_kind: PromptKind
    label_kind: LabelKind
    text: str


@lru_cache(maxsize=None)
def component_text(component: Component) -> str:
    """Return the verbatim text of one instruction component."""
    ref = resources.files("memegrid").joinpath("resources", f"{component.value}.txt")
    return ref.read_text(encoding="utf-8")


def compose(prompt_kind: PromptKind, label_kind: LabelKind) -> ComposedPrompt:
    """Assemble a prompt for one grid cell.

    The simple statement always leads; the category taxonomy is inserted for
    CATEGORY prompts; the answer-format instruction always closes. Parts are
    joined with single spaces and the components are never altered.
    """
    parts = [component_text(Component.SIMPLE)]
    if prompt_kind is PromptKind.CATEGORY:
        parts.append(component_text(Component.CATEGORY))
    if label_kind is LabelKind.BINARY:
        parts.append(component_text(Component.BINARY_INSTR))
    else:
        parts.append(component_text(Component.SCALE_INSTR))
    return ComposedPrompt(prompt_kind=prompt_kind, label_kind=label_kind, text=" ".join(parts))


def render_request(
    record: Record,
    prompt: ComposedPrompt,
    modality: Modality,
    *,
    image_root: str | Path | None = None,
    decoding: "Decoding | None" = None,
) -> "BackendRequest":
    """Turn one record into a backend request.

    The caption is appended to the prompt as a trailing ``Caption: <text>``
    line. Multimodal requests attach the image bytes; text-only requests send
    the same text without an image.
    """
    # Imported here: backends depends on this module for LabelKind.
    from .backends import BackendRequest, Decoding, ImagePayload

    if not record.text.strip():
        raise ValueError(f"record {record.id!r} has an empty caption")
    text = f"{prompt.text}\nCaption: {record.text}"
    if decoding is None:
        decoding = Decoding()

    if modality is Modality.TEXT_ONLY:
        return BackendRequest(prompt_text=text, image=None, decoding=decoding, record_id=record.id)

    path = Path(image_root) / record.image_ref if image_root is not None else Path(record.image_ref)
    if not path.is_file():
        raise FileNotFoundError(f"image for record {record.id!r} not found: {path}")
    media_type = _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
    payload = ImagePayload(data=path.read_bytes(), media_type=media_type)
    return BackendRequest(prompt_text=text, image=payload, decoding=decoding, record_id=record.id)
