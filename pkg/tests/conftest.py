"""Shared fixtures: synthetic splits, a tiny image, and a scripted HTTP endpoint."""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from memegrid.dataset import Record, Split

# A valid 1x1 transparent PNG.
TINY_PNG = bytes.fromhex(
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d4944415478da63fcffffff7f030007030301e9b2ad1f0000000049454e44ae426082"
)


def make_records(n: int, *, labeled: bool = True, start: int = 0) -> list[Record]:
    """Balanced synthetic records with unique captions (even index: label 0)."""
    records = []
    for i in range(start, start + n):
        records.append(
            Record(
                id=f"r{i:05d}",
                image_ref=f"img/{i:05d}.png",
                text=f"synthetic caption {i:05d}",
                label=(i % 2) if labeled else None,
            )
        )
    return records


def make_split(n: int, *, name: str = "test", labeled: bool = True) -> Split:
    return Split(name=name, records=tuple(make_records(n, labeled=labeled)))


def write_split_file(path: Path, records: list[Record]) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            obj: dict[str, object] = {"id": r.id, "img": r.image_ref, "text": r.text}
            if r.label is not None:
                obj["label"] = r.label
            fh.write(json.dumps(obj) + "\n")
    return path


def truth_map(records) -> dict[str, int]:
    return {r.id: r.label for r in records}


@pytest.fixture
def image_root(tmp_path: Path) -> Path:
    """An image directory that can satisfy make_records references on demand."""
    root = tmp_path / "images"
    (root / "img").mkdir(parents=True)
    return root


def put_images(root: Path, records) -> None:
    for r in records:
        path = root / r.image_ref
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(TINY_PNG)


class _ScriptedHandler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802 - http.server API
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        server: ScriptedServer = self.server  # type: ignore[assignment]
        with server.lock:
            server.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
            step = server.script[min(len(server.requests) - 1, len(server.script) - 1)]
        status, payload = step
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args: object) -> None:
        pass


class ScriptedServer(ThreadingHTTPServer):
    """Replays a fixed script of (status, payload) responses and records requests."""

    def __init__(self) -> None:
        super().__init__(("127.0.0.1", 0), _ScriptedHandler)
        self.script: list[tuple[int, object]] = [(200, completion("FALSE"))]
        self.requests: list[dict] = []
        self.lock = threading.Lock()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"


def completion(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


@pytest.fixture
def scripted_server():
    server = ScriptedServer()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


ECHO_BACKEND_SRC = r"""
import json, sys
replies = []
for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    obj = json.loads(line)
    key = obj["request_key"]
    prompt = obj.get("prompt", "")
    if "scale from 0 to 9" in prompt:
        text = "7"
    else:
        text = "TRUE" if "hateful caption" in prompt else "FALSE"
    out = {"request_key": key, "text": text}
    sys.stdout.write(json.dumps(out) + "\n")
    sys.stdout.flush()
"""


def echo_command() -> str:
    import shlex
    import sys

    return f"{shlex.quote(sys.executable)} -c {shlex.quote(ECHO_BACKEND_SRC)}"
