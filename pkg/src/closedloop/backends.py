"""Model backends: a chat-completions HTTP client, scripted fixtures, and record/replay cassettes.

Every backend maps an `AgentRequest` to an `AgentResponse` carrying the raw
text; parsing and schema checks happen in the agent layer.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx
import numpy as np
from PIL import Image

from .errors import BackendUnavailable, CassetteMiss, ConfigError, FixtureMiss
from .state import payload_digest_safe

log = logging.getLogger(__name__)

BACKEND_KINDS = ("http", "scripted", "replay", "record", "oracle")
ENV_API_KEY = "CLOSEDLOOP_API_KEY"
ENV_ENDPOINT = "CLOSEDLOOP_ENDPOINT"
COMPLETIONS_PATH = "/chat/completions"


@dataclass(frozen=True)
class AgentRequest:
    role: str
    system_instruction: str
    user_payload: dict
    image: np.ndarray | None = None
    instruction_version: str = "v1"
    episode: int = 0  # routing hint for cassettes; not part of the hash


@dataclass(frozen=True)
class AgentResponse:
    raw_text: str
    parsed: Any = None


class Backend(Protocol):
    kind: str

    def complete(self, req: AgentRequest) -> AgentResponse: ...


# -- hashing --------------------------------------------------------------------------

def image_digest(image: np.ndarray | None) -> str | None:
    if image is None:
        return None
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(f"{arr.dtype.str}:{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def canonical_payload(payload: dict) -> str:
    return json.dumps(payload_digest_safe(payload), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False)


def canonical_request_hash(req: AgentRequest) -> str:
    """Stable digest of (role, instruction version, payload, image digest)."""
    doc = {
        "role": req.role,
        "version": req.instruction_version,
        "payload": json.loads(canonical_payload(req.user_payload)),
        "image": image_digest(req.image),
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(text.encode()).hexdigest()


def request_summary(req: AgentRequest) -> dict:
    return {"role": req.role, "version": req.instruction_version,
            "payload": json.loads(canonical_payload(req.user_payload)),
            "image": image_digest(req.image)}


def encode_png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


# -- config ---------------------------------------------------------------------------

@dataclass
class BackendConfig:
    kind: str = "oracle"
    endpoint_url: str = ""
    model_name: str = "gpt-4.1-mini"
    timeout: float = 30.0
    transport_retries: int = 2
    temperature: float = 0.0
    cassette_path: str | None = None
    fixture_path: str | None = None
    inner: str = "http"  # backend wrapped by `record`

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if not self.timeout > 0:
            raise ConfigError("backend timeout must be positive")
        if self.transport_retries < 0:
            raise ConfigError("transport_retries must be non-negative")
        if self.kind in ("replay", "record") and not self.cassette_path:
            raise ConfigError(f"{self.kind} backend needs a cassette_path")
        if self.kind == "scripted" and not self.fixture_path:
            raise ConfigError("scripted backend needs a fixture_path")
        if self.kind == "record" and self.inner not in ("http", "oracle"):
            raise ConfigError("record can wrap the http or oracle backend only")
        uses_http = self.kind == "http" or (self.kind == "record" and self.inner == "http")
        if uses_http and not self.resolved_endpoint():
            raise ConfigError(f"http backend needs endpoint_url or ${ENV_ENDPOINT}")

    def resolved_endpoint(self) -> str:
        return os.environ.get(ENV_ENDPOINT) or self.endpoint_url

    @classmethod
    def from_dict(cls, d: dict) -> BackendConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown backend option(s): {sorted(extra)}")
        return cls(**d)


# -- http -----------------------------------------------------------------------------

class HttpBackend:
    """Chat-completions client: system + user messages, optional inline PNG."""

    kind = "http"

    def __init__(self, cfg: BackendConfig, client: httpx.Client | None = None):
        self.cfg = cfg
        url = cfg.resolved_endpoint().rstrip("/")
        self.url = url if url.endswith(COMPLETIONS_PATH) else url + COMPLETIONS_PATH
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(ENV_API_KEY)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=cfg.timeout, headers=headers)

    def body(self, req: AgentRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": canonical_payload(req.user_payload)}]
        if req.image is not None:
            content.append({"type": "image_url",
                            "image_url": {"url": "data:image/png;base64," + encode_png_b64(req.image)}})
        return {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": req.system_instruction},
                {"role": "user", "content": content},
            ],
        }

    def complete(self, req: AgentRequest) -> AgentResponse:
        body = self.body(req)
        last: Exception | None = None
        for _ in range(self.cfg.transport_retries + 1):
            try:
                resp = self.client.post(self.url, json=body)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = RuntimeError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"{self.url} answered HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendUnavailable(f"malformed completion document from {self.url}") from exc
            return AgentResponse(text if isinstance(text, str) else json.dumps(text))
        raise BackendUnavailable(f"{self.url} unreachable after "
                                 f"{self.cfg.transport_retries + 1} tries: {last}")

    def close(self) -> None:
        self.client.close()


# -- scripted -------------------------------------------------------------------------

def fixture_key(req: AgentRequest) -> str:
    return f"{req.role}:{canonical_request_hash(req)}"


class ScriptedBackend:
    """Fixed responses keyed by ``role:request-hash``."""

    kind = "scripted"

    def __init__(self, responses: dict[str, str] | str | Path):
        if not isinstance(responses, dict):
            try:
                doc = json.loads(Path(responses).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"unreadable fixture {responses}: {exc}") from None
            responses = doc.get("responses", doc) if isinstance(doc, dict) else None
            if not isinstance(responses, dict):
                raise ConfigError(f"fixture {responses} must map role:hash keys to replies")
        self.responses = dict(responses)

    def complete(self, req: AgentRequest) -> AgentResponse:
        key = fixture_key(req)
        try:
            return AgentResponse(self.responses[key])
        except KeyError:
            raise FixtureMiss(f"no scripted response for {key}") from None


class FixtureRecorder:
    """Wraps a backend and collects a scripted-fixture document."""

    kind = "record"

    def __init__(self, inner: Backend):
        self.inner = inner
        self.responses: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, req: AgentRequest) -> AgentResponse:
        resp = self.inner.complete(req)
        with self._lock:
            self.responses[fixture_key(req)] = resp.raw_text
        return resp

    def save(self, path) -> None:
        doc = {"responses": dict(sorted(self.responses.items()))}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- record / replay ------------------------------------------------------------------

class ReplayBackend:
    """Serves recorded responses in order, per (episode, request hash). Never touches the network."""

    kind = "replay"

    def __init__(self, cassette_path):
        self.path = Path(cassette_path)
        if not self.path.exists():
            raise ConfigError(f"cassette {self.path} does not exist")
        self._queues: dict[tuple, deque] = defaultdict(deque)
        self._lock = threading.Lock()
        for n, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                self._queues[(rec.get("episode"), rec["hash"])].append(rec["response"])
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{self.path}:{n}: corrupt cassette record") from exc

    def complete(self, req: AgentRequest) -> AgentResponse:
        h = canonical_request_hash(req)
        with self._lock:
            q = self._queues.get((req.episode, h)) or self._queues.get((None, h))
            if not q:
                raise CassetteMiss(f"cassette {self.path.name} has no response for "
                                   f"{req.role} request {h[:12]} (episode {req.episode})")
            return AgentResponse(q.popleft())


class RecordBackend:
    """Delegates to an inner backend and appends each exchange to a cassette."""

    kind = "record"

    def __init__(self, inner: Backend, cassette_path):
        self.inner = inner
        self.path = Path(cassette_path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, req: AgentRequest) -> AgentResponse:
        resp = self.inner.complete(req)
        rec = {"episode": req.episode, "hash": canonical_request_hash(req),
               "request": request_summary(req), "response": resp.raw_text}
        line = json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"
        with self._lock, self.path.open("a") as fh:
            fh.write(line)
        return resp


# -- factory --------------------------------------------------------------------------

@dataclass
class BackendFactory:
    """Builds the backend for each episode; oracle-backed kinds bind to that episode's simulator."""

    cfg: BackendConfig
    _shared: Any = field(default=None, init=False, repr=False)

    def __call__(self, env=None):
        from .oracle import OracleBackend  # local import: oracle depends on the simulator

        cfg = self.cfg
        if cfg.kind == "oracle":
            return OracleBackend(env)
        if cfg.kind in ("http", "scripted", "replay"):
            if self._shared is None:
                self._shared = {"http": lambda: HttpBackend(cfg),
                                "scripted": lambda: ScriptedBackend(cfg.fixture_path),
                                "replay": lambda: ReplayBackend(cfg.cassette_path)}[cfg.kind]()
            return self._shared
        if cfg.inner == "oracle":
            return RecordBackend(OracleBackend(env), cfg.cassette_path)
        if self._shared is None:
            self._shared = RecordBackend(HttpBackend(cfg), cfg.cassette_path)
        return self._shared


def make_backend(cfg: BackendConfig, env=None):
    return BackendFactory(cfg)(env)


__all__ = [
    "AgentRequest", "AgentResponse", "Backend", "BackendConfig", "BackendFactory",
    "HttpBackend", "ScriptedBackend", "ReplayBackend", "RecordBackend", "FixtureRecorder",
    "canonical_request_hash", "image_digest", "make_backend", "fixture_key",
]
