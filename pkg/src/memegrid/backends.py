"""Pluggable answer backends and the response cache.

Three backend kinds share one query interface:

* ``remote_api``: an OpenAI-style chat-completion endpoint over HTTP.
* ``external_command``: a spawned subprocess speaking newline-delimited JSON,
  with responses matched to requests by ``request_key``.
* ``mock``: a deterministic offline oracle that answers from ground truth
  with a configurable noise rate.

All caching is keyed by a content hash of the request, so identical requests
converge on one cache entry regardless of backend latency or retries.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import shlex
import subprocess
import threading
import time
import uuid
from collections import deque
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import requests as _requests

from .promptkit import LabelKind

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 16
DEFAULT_RETRIES = 5
DEFAULT_BACKOFF_BASE = 0.5  # seconds; doubles per attempt
BACKOFF_JITTER = 0.2  # +/- 20%
DEFAULT_TIMEOUT = 60.0

BACKEND_KINDS = ("remote_api", "external_command", "mock")

# The scale instruction is the only component mentioning this phrase, and the
# binary instruction is the only one mentioning TRUE; the mock uses them to
# tell which answer format a prompt asks for.
_SCALE_MARKER = "scale from 0 to 9"
_BINARY_MARKER = "`TRUE`"


class BackendError(Exception):
    """Base class for backend failures."""


class AuthError(BackendError):
    """Missing or rejected credentials; never retried."""


class ProtocolError(BackendError):
    """The backend replied with something structurally unusable."""


class ExhaustedRetries(BackendError):
    """All retry attempts failed."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class MissingResponse(BackendError):
    """An external command never answered one or more request keys."""

    def __init__(self, request_keys: Sequence[str]):
        keys = ", ".join(request_keys)
        super().__init__(f"no response for request key(s): {keys}")
        self.request_keys = tuple(request_keys)


@dataclass(frozen=True)
class Decoding:
    """Decoding parameters sent with every request."""

    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str

    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class BackendRequest:
    """One prompt to answer.

    ``record_id`` is routing metadata (the mock backend resolves ground truth
    with it); it is deliberately not part of the request's content hash.
    """

    prompt_text: str
    image: ImagePayload | None = None
    decoding: Decoding = Decoding()
    record_id: str | None = None


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency_ms: int = 0
    attempt_count: int = 1


def request_key(backend_id: str, request: BackendRequest) -> str:
    """Content hash identifying a request for caching and response matching."""
    payload = {
        "backend": backend_id,
        "prompt": request.prompt_text,
        "image": request.image.digest() if request.image is not None else "none",
        "temperature": request.decoding.temperature,
        "max_tokens": request.decoding.max_tokens,
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendSpec:
    """Declarative description of a backend; credentials stay in env vars."""

    id: str
    kind: str
    endpoint: str | None = None
    model: str | None = None
    auth_env: str | None = None
    command: str | None = None
    noise_rate: float = 0.0
    seed: int = 0
    truth_source: str | Mapping[str, int] | None = None
    retries: int = DEFAULT_RETRIES
    timeout: float = DEFAULT_TIMEOUT
    backoff_base: float = DEFAULT_BACKOFF_BASE

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "remote_api" and (not self.endpoint or not self.auth_env):
            raise ValueError(f"remote_api backend {self.id!r} needs endpoint and auth_env")
        if self.kind == "external_command" and not self.command:
            raise ValueError(f"external_command backend {self.id!r} needs a command")
        if self.kind == "mock":
            if not 0.0 <= self.noise_rate <= 1.0:
                raise ValueError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
            if self.truth_source is None:
                raise ValueError(f"mock backend {self.id!r} needs a truth_source")
        if self.retries < 1:
            raise ValueError(f"retries must be >= 1, got {self.retries}")


def mock_oracle(record_id: str, truth: int, noise_rate: float, seed: int, label_kind: LabelKind) -> str:
    """Deterministic fake reply for one record.

    A hash of (seed, record_id) decides whether the answer is flipped and
    which digit a scale reply uses, so repeated calls always agree and the
    flip decision is independent of the answer format.
    """
    digest = hashlib.sha256(f"{seed}:{record_id}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    flipped = u < noise_rate
    says_hateful = bool(truth) != flipped
    if label_kind is LabelKind.BINARY:
        return "TRUE" if says_hateful else "FALSE"
    v = int.from_bytes(digest[8:16], "big") % 5
    return str(5 + v) if says_hateful else str(v)


def _load_truth_table(source: str | Mapping[str, int]) -> dict[str, int]:
    if isinstance(source, Mapping):
        return dict(source)
    from .dataset import load_split

    split = load_split(source, require_labels=True, name="test")
    return {r.id: r.label for r in split.records if r.label is not None}


class MockBackend:
    """Offline oracle; answers from a truth table with planted noise."""

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        self._truth = _load_truth_table(spec.truth_source)  # type: ignore[arg-type]

    def query(self, request: BackendRequest) -> BackendResponse:
        if request.record_id is None:
            raise BackendError("mock backend needs record_id routing metadata on the request")
        truth = self._truth.get(request.record_id)
        if truth is None:
            raise BackendError(f"mock backend has no ground truth for record {request.record_id!r}")
        if _SCALE_MARKER in request.prompt_text:
            kind = LabelKind.SCALE
        elif _BINARY_MARKER in request.prompt_text:
            kind = LabelKind.BINARY
        else:
            raise BackendError("mock backend cannot tell the answer format from the prompt")
        text = mock_oracle(request.record_id, truth, self.spec.noise_rate, self.spec.seed, kind)
        return BackendResponse(text=text, latency_ms=0, attempt_count=1)

    def close(self) -> None:
        pass


class RemoteBackend:
    """Chat-completion client with bounded retries and exponential backoff."""

    def __init__(
        self,
        spec: BackendSpec,
        *,
        session: "_requests.Session | None" = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.spec = spec
        self._session = session or _requests.Session()
        self._sleep = sleep
        self._rng = rng or random.Random()

    def _auth_token(self) -> str:
        token = os.environ.get(self.spec.auth_env or "", "")
        if not token:
            raise AuthError(
                f"backend {self.spec.id!r}: auth token env var {self.spec.auth_env!r} is not set"
            )
        return token

    def _body(self, request: BackendRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt_text}]
        if request.image is not None:
            b64 = base64.b64encode(request.image.data).decode("ascii")
            url = f"data:{request.image.media_type};base64,{b64}"
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {
            "model": self.spec.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }

    def _backoff(self, attempt: int) -> float:
        base = self.spec.backoff_base * (2 ** (attempt - 1))
        return base * (1.0 + BACKOFF_JITTER * (2 * self._rng.random() - 1))

    def query(self, request: BackendRequest) -> BackendResponse:
        token = self._auth_token()
        body = self._body(request)
        headers = {"Authorization": f"Bearer {token}"}
        last_error = "no attempt made"
        for attempt in range(1, self.spec.retries + 1):
            started = time.monotonic()
            try:
                resp = self._session.post(
                    self.spec.endpoint, json=body, headers=headers, timeout=self.spec.timeout
                )
            except (_requests.Timeout, _requests.ConnectionError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"backend {self.spec.id!r}: credentials rejected (HTTP {resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                elif resp.status_code != 200:
                    raise ProtocolError(f"backend {self.spec.id!r}: unexpected HTTP {resp.status_code}")
                else:
                    text = self._extract_text(resp)
                    latency = int((time.monotonic() - started) * 1000)
                    return BackendResponse(text=text, latency_ms=latency, attempt_count=attempt)
            if attempt < self.spec.retries:
                self._sleep(self._backoff(attempt))
        raise ExhaustedRetries(
            f"backend {self.spec.id!r}: giving up after {self.spec.retries} attempts ({last_error})",
            attempts=self.spec.retries,
        )

    def _extract_text(self, resp: "_requests.Response") -> str:
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"backend {self.spec.id!r}: malformed completion payload: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError(f"backend {self.spec.id!r}: completion content is not a string")
        return text

    def close(self) -> None:
        self._session.close()


class ExternalCommandBackend:
    """Line-protocol client for a spawned answerer process.

    Requests are JSON objects ``{request_key, prompt, image_b64?}``; the
    process replies ``{request_key, text}`` in any order. A reader thread
    resolves pending futures by key, so duplicate keys are answered in
    submission order.
    """

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        argv = shlex.split(spec.command or "")
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"backend {spec.id!r}: cannot spawn {spec.command!r}: {exc}") from exc
        self._lock = threading.Lock()
        self._pending: dict[str, deque[Future]] = {}
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def submit(self, request: BackendRequest) -> "Future[BackendResponse]":
        key = request_key(self.spec.id, request)
        message: dict[str, object] = {"request_key": key, "prompt": request.prompt_text}
        if request.image is not None:
            message["image_b64"] = base64.b64encode(request.image.data).decode("ascii")
        fut: Future = Future()
        with self._lock:
            if self._closed or self._proc.poll() is not None:
                raise MissingResponse([key])
            self._pending.setdefault(key, deque()).append(fut)
            assert self._proc.stdin is not None
            try:
                self._proc.stdin.write(json.dumps(message, ensure_ascii=False) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                self._pending[key].remove(fut)
                raise MissingResponse([key]) from None
        return fut

    def query(self, request: BackendRequest) -> BackendResponse:
        started = time.monotonic()
        fut = self.submit(request)
        try:
            text = fut.result(timeout=self.spec.timeout)
        except (FutureTimeout, TimeoutError):
            raise MissingResponse([request_key(self.spec.id, request)]) from None
        latency = int((time.monotonic() - started) * 1000)
        return BackendResponse(text=text, latency_ms=latency, attempt_count=1)

    def _read_loop(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                key = obj["request_key"]
            except (ValueError, KeyError, TypeError):
                log.warning("external backend %s: unparseable reply line: %.120s", self.spec.id, line)
                continue
            with self._lock:
                queue = self._pending.get(key)
                fut = queue.popleft() if queue else None
                if queue is not None and not queue:
                    del self._pending[key]
            if fut is None:
                log.warning("external backend %s: reply for unknown key %s", self.spec.id, key)
                continue
            if "text" in obj and isinstance(obj["text"], str):
                fut.set_result(obj["text"])
            else:
                fut.set_exception(
                    ProtocolError(f"backend {self.spec.id!r}: reply for {key} has no text: {obj.get('error')}")
                )
        # EOF: the process is done; everything still pending never got answered.
        with self._lock:
            leftovers = [(k, f) for k, q in self._pending.items() for f in q]
            self._pending.clear()
        for key, fut in leftovers:
            fut.set_exception(MissingResponse([key]))

    def close(self) -> None:
        with self._lock:
            self._closed = True
        if self._proc.stdin is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._reader.join(timeout=10)

    def __enter__(self) -> "ExternalCommandBackend":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def open_backend(spec: BackendSpec):
    """Instantiate the backend a spec describes."""
    if spec.kind == "mock":
        return MockBackend(spec)
    if spec.kind == "remote_api":
        return RemoteBackend(spec)
    return ExternalCommandBackend(spec)


def query(spec: BackendSpec, request: BackendRequest) -> BackendResponse:
    """One-shot convenience: open, query, close."""
    backend = open_backend(spec)
    try:
        return backend.query(request)
    finally:
        backend.close()


def external_predict(
    spec: BackendSpec, requests: Iterable[BackendRequest]
) -> list[BackendResponse]:
    """Send a batch to an external command and return replies in request order."""
    if spec.kind != "external_command":
        raise ValueError(f"external_predict needs an external_command backend, got {spec.kind!r}")
    ordered = list(requests)
    with ExternalCommandBackend(spec) as backend:
        started = time.monotonic()
        futures = [backend.submit(r) for r in ordered]
        responses: list[BackendResponse] = []
        for fut, req in zip(futures, ordered):
            try:
                text = fut.result(timeout=spec.timeout)
            except (FutureTimeout, TimeoutError):
                raise MissingResponse([request_key(spec.id, req)]) from None
            latency = int((time.monotonic() - started) * 1000)
            responses.append(BackendResponse(text=text, latency_ms=latency, attempt_count=1))
        return responses


class ResponseCache:
    """One JSON file per request key; writes are atomic via os.replace."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> BackendResponse | None:
        path = self._path(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            obj = json.loads(raw)
            return BackendResponse(
                text=obj["text"],
                latency_ms=int(obj.get("latency_ms", 0)),
                attempt_count=int(obj.get("attempt_count", 1)),
            )
        except (ValueError, KeyError, TypeError):
            log.warning("cache entry %s is corrupt; refetching", path.name)
            return None

    def put(self, key: str, response: BackendResponse) -> None:
        obj = {
            "text": response.text,
            "latency_ms": response.latency_ms,
            "attempt_count": response.attempt_count,
        }
        tmp = self.root / f".{key}.{os.getpid()}.{uuid.uuid4().hex}.tmp"
        tmp.write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, self._path(key))


def cached_query(cache: ResponseCache, backend, request: BackendRequest) -> BackendResponse:
    """Answer from the cache when possible, otherwise query and store."""
    key = request_key(backend.spec.id, request)
    hit = cache.get(key)
    if hit is not None:
        return hit
    response = backend.query(request)
    cache.put(key, response)
    return response
