"""Chat-completion gateway with remote, replay, and scripted backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .task_memory import estimate_tokens

logger = logging.getLogger(__name__)

ENV_API_KEY = "STACKPLANNER_LLM_API_KEY"
ENV_BASE_URL = "STACKPLANNER_LLM_BASE_URL"
ENV_MODEL = "STACKPLANNER_LLM_MODEL"

ROLES = ("system", "user", "assistant", "tool")


class GatewayError(Exception):
    """The backend could not produce a response."""


class ScriptExhausted(GatewayError):
    pass


class ReplayMismatch(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content and self.role != "assistant":
            raise ValueError("only assistant placeholders may be empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model: str = "default"
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 1024
    # which caller produced the request; scripted backends can route on it
    purpose: str = "default"

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def digest(self) -> str:
        return request_digest(self.messages)


def request_digest(messages: Iterable[ChatMessage]) -> str:
    payload = json.dumps([m.to_dict() for m in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def _estimated_completion(req: ChatRequest, text: str) -> Completion:
    prompt = sum(estimate_tokens(m.content) for m in req.messages)
    return Completion(text, prompt, estimate_tokens(text))


# ---------------------------------------------------------------------------
# backends


class ScriptedBackend:
    """Pops canned responses in order.

    ``responses`` is either a flat sequence (shared by every request) or a
    mapping from request purpose to its own queue. A ``"default"`` queue in
    the mapping catches purposes without a dedicated queue.
    """

    def __init__(self, responses: Sequence[str] | Mapping[str, Sequence[str]]):
        self._lock = threading.Lock()
        if isinstance(responses, Mapping):
            self._queues = {k: deque(v) for k, v in responses.items()}
            self._routed = True
        else:
            self._queues = {"default": deque(responses)}
            self._routed = False

    def remaining(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._queues.items()}

    def complete(self, req: ChatRequest) -> Completion:
        with self._lock:
            key = req.purpose if self._routed and req.purpose in self._queues else "default"
            queue = self._queues.get(key)
            if not queue:
                raise ScriptExhausted(f"no scripted response left for purpose {req.purpose!r}")
            text = queue.popleft()
        return _estimated_completion(req, text)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedBackend":
        return cls(load_script(path))


def load_script(path: str | os.PathLike) -> Any:
    """Load a script: a JSON list, a JSON mapping of queues, or JSONL lines.

    A directory is read as ``<dir>/script.json``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "script.json"
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = []
        for line in text.splitlines():
            if line.strip():
                item = json.loads(line)
                doc.append(item["response"] if isinstance(item, dict) else item)
    if isinstance(doc, dict) and "responses" in doc:
        doc = doc["responses"]
    return doc


@dataclass(frozen=True)
class FixtureRecord:
    index: int
    request_digest: str
    response_text: str
    prompt_tokens: int
    completion_tokens: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "request_digest": self.request_digest,
                "response_text": self.response_text,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
            },
            ensure_ascii=False,
        )


def read_fixture(path: str | os.PathLike) -> list[FixtureRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(FixtureRecord(**json.loads(line)))
    records.sort(key=lambda r: r.index)
    return records


class ReplayBackend:
    """Serves recorded responses by request sequence index."""

    def __init__(self, records: Sequence[FixtureRecord], strict: bool = True):
        self._records = list(records)
        self.strict = strict
        self._lock = threading.Lock()
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike, strict: bool = True) -> "ReplayBackend":
        return cls(read_fixture(path), strict=strict)

    def complete(self, req: ChatRequest) -> Completion:
        with self._lock:
            index = self._cursor
            self._cursor += 1
        if index >= len(self._records):
            raise ReplayMismatch(f"fixture has no response for request #{index}")
        rec = self._records[index]
        if self.strict and rec.request_digest != req.digest:
            raise ReplayMismatch(f"request #{index} digest differs from the recorded one")
        return Completion(rec.response_text, rec.prompt_tokens, rec.completion_tokens)


class RemoteBackend:
    """OpenAI-compatible ``POST {base_url}/chat/completions`` client."""

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 4,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def __repr__(self) -> str:
        return f"RemoteBackend(base_url={self.base_url!r}, model={self.model!r})"

    def _body(self, req: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model or req.model,
            "messages": [m.to_dict() for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def complete(self, req: ChatRequest) -> Completion:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = f"{self.base_url}/chat/completions"
        delay = self.backoff_base
        last_error = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            logger.debug("chat request %s attempt %d", req.digest[:12], attempt)
            try:
                resp = self._client.post(url, json=self._body(req), headers=headers)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return _parse_chat_response(resp.json(), req)
                last_error = f"HTTP {resp.status_code}"
                if resp.status_code not in self.RETRY_STATUS:
                    raise GatewayError(f"chat completion failed: {last_error}")
            if attempt < self.max_attempts:
                logger.warning("chat request %s failed (%s); retrying in %.2fs", req.digest[:12], last_error, delay)
                self._sleep(delay)
                delay *= self.backoff_factor
        raise GatewayError(f"chat completion failed after {self.max_attempts} attempts: {last_error}")


def _parse_chat_response(doc: Mapping[str, Any], req: ChatRequest) -> Completion:
    try:
        text = doc["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed chat completion response: {exc}") from exc
    usage = doc.get("usage") or {}
    if "prompt_tokens" in usage:
        return Completion(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
    return _estimated_completion(req, text)


# ---------------------------------------------------------------------------


class Gateway:
    """Front door for every model call made by the coordinator and agents.

    Tracks cumulative token usage and, when ``record_path`` is given, tees
    each request/response pair into a replay fixture.
    """

    def __init__(self, backend, record_path: str | os.PathLike | None = None, model: str = "default"):
        self.backend = backend
        self.model = model
        self._lock = threading.Lock()
        self._index = 0
        self.tokens_used = 0
        self._record_fh = None
        if record_path:
            Path(record_path).parent.mkdir(parents=True, exist_ok=True)
            self._record_fh = open(record_path, "w", encoding="utf-8")

    def complete(self, req: ChatRequest) -> Completion:
        completion = self.backend.complete(req)
        with self._lock:
            index = self._index
            self._index += 1
            self.tokens_used += completion.total_tokens
            if self._record_fh is not None:
                rec = FixtureRecord(index, req.digest, completion.text, completion.prompt_tokens, completion.completion_tokens)
                self._record_fh.write(rec.to_json() + "\n")
                self._record_fh.flush()
        return completion

    def chat(
        self,
        messages: Sequence[ChatMessage] | Sequence[tuple[str, str]],
        purpose: str = "default",
        **kwargs,
    ) -> Completion:
        msgs = tuple(m if isinstance(m, ChatMessage) else ChatMessage(*m) for m in messages)
        return self.complete(ChatRequest(msgs, model=kwargs.pop("model", self.model), purpose=purpose, **kwargs))

    def close(self) -> None:
        if self._record_fh is not None:
            self._record_fh.close()
            self._record_fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_from_env(env: Mapping[str, str] | None = None, **overrides) -> RemoteBackend:
    env = os.environ if env is None else env
    base_url = overrides.pop("base_url", None) or env.get(ENV_BASE_URL)
    if not base_url:
        raise GatewayError(f"{ENV_BASE_URL} is not set")
    return RemoteBackend(
        base_url,
        api_key=overrides.pop("api_key", None) or env.get(ENV_API_KEY),
        model=overrides.pop("model", None) or env.get(ENV_MODEL),
        **overrides,
    )
