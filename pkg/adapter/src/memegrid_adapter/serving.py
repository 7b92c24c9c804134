"""Line-protocol prediction server.

Each stdin line is a JSON object {"request_key", "prompt", "image_b64"?};
each stdout line answers {"request_key", "text"}. A malformed request
produces an error object carrying whatever request_key could be extracted
(null otherwise) and the loop keeps going, so one bad line never kills a
batch. End of input ends the process cleanly.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import IO

from .model import load_model


def _parse_request(line: str) -> tuple[str, str, str | None]:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("request must be a JSON object")
    key = obj.get("request_key")
    if not isinstance(key, str) or not key:
        raise ValueError("request_key must be a non-empty string")
    prompt = obj.get("prompt")
    if not isinstance(prompt, str):
        raise ValueError("prompt must be a string")
    image_b64 = obj.get("image_b64")
    if image_b64 is not None and not isinstance(image_b64, str):
        raise ValueError("image_b64 must be a string when present")
    return key, prompt, image_b64


def _extract_key(line: str) -> str | None:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if isinstance(obj, dict) and isinstance(obj.get("request_key"), str):
        return obj["request_key"]
    return None


def serve(model_dir: str | Path, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    """Answer requests until EOF; returns the process exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    predictor = load_model(model_dir)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            key, prompt, image_b64 = _parse_request(line)
            reply = {"request_key": key, "text": predictor.predict(prompt, image_b64)}
        except (ValueError, KeyError) as exc:
            reply = {"request_key": _extract_key(line), "error": str(exc)}
        stdout.write(json.dumps(reply, sort_keys=True) + "\n")
        stdout.flush()
    return 0
