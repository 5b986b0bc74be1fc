"""Uniform chat-completion access for the optimizer and target models.

One gateway fronts both model roles. Each role is served by an adapter:
``HttpAdapter`` speaks the OpenAI-compatible chat-completions protocol,
``ScriptedAdapter`` replays canned replies for offline deterministic runs.
Deterministic requests are memoized in a persistent cache, and every served
completion (fresh or cached) is appended to a response log that token
accounting is recomputed from.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx

from .errors import ConfigurationError, KppoError

log = logging.getLogger(__name__)

OPTIMIZER = "optimizer"
TARGET = "target"

DEFAULT_API_KEY_ENV = "KPPO_API_KEY"


class GatewayError(KppoError):
    """The backing model could not produce a completion."""


class ProtocolError(GatewayError):
    """The backend replied with something that is not a chat completion."""


class ScriptedReplyMissing(ProtocolError):
    """A scripted adapter has no reply registered for the request digest."""


class TransientBackendError(GatewayError):
    """Retryable failure: transport error, rate limit, or 5xx status."""


@dataclass(frozen=True)
class ChatRequest:
    role: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    seed: Optional[int] = None
    max_output: int = 1024

    def __post_init__(self) -> None:
        if self.role not in (OPTIMIZER, TARGET):
            raise ValueError(f"unknown model role {self.role!r}")
        if not self.messages:
            raise ValueError("messages must be nonempty")
        for msg_role, _ in self.messages:
            if msg_role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown message role {msg_role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def digest(self) -> str:
        payload = json.dumps(
            [self.role, list(self.messages), self.temperature, self.seed, self.max_output],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @property
    def deterministic(self) -> bool:
        """Cacheable: temperature 0, or any temperature pinned by a seed."""
        return self.temperature == 0 or self.seed is not None


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    adapter: str  # http | scripted | cache

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("usage counts must be >= 0")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


class ScriptedAdapter:
    """Deterministic test double keyed on the request digest.

    Exact replies come from ``replies``; a ``handler`` callable may compute a
    reply from the request instead (it must be a pure function of the request
    to keep runs replayable). Usage is counted with a whitespace tokenizer.
    """

    name = "scripted"

    def __init__(
        self,
        replies: Optional[dict[str, str]] = None,
        handler: Optional[Callable[[ChatRequest], Optional[str]]] = None,
    ) -> None:
        self.replies = dict(replies or {})
        self.handler = handler
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        text = self.replies.get(request.digest)
        if text is None and self.handler is not None:
            text = self.handler(request)
        if text is None:
            raise ScriptedReplyMissing(
                f"no scripted reply for request digest {request.digest}"
            )
        input_tokens = sum(whitespace_tokens(content) for _, content in request.messages)
        return ChatResponse(
            text=text,
            input_tokens=input_tokens,
            output_tokens=whitespace_tokens(text),
            adapter=self.name,
        )


class HttpAdapter:
    """OpenAI-compatible chat completions over HTTP.

    Retries transport failures, 429, and 5xx with exponential backoff; any
    other 4xx fails immediately. The API key is read from the environment,
    never from configuration files.
    """

    name = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff: float = 0.5,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        key = os.environ.get(api_key_env, "")
        if not key:
            raise ConfigurationError(
                f"environment variable {api_key_env} is not set; "
                "the http adapter needs an API key"
            )
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {key}"}

    def _post_once(self, request: ChatRequest) -> ChatResponse:
        body: dict = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        try:
            reply = self._client.post(
                f"{self.base_url}/chat/completions", json=body, headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if reply.status_code == 429 or reply.status_code >= 500:
            raise TransientBackendError(f"backend status {reply.status_code}")
        if reply.status_code >= 400:
            raise GatewayError(f"backend status {reply.status_code}: {reply.text[:200]}")
        try:
            payload = reply.json()
            text = payload["choices"][0]["message"]["content"]
            usage = payload["usage"]
            return ChatResponse(
                text=text,
                input_tokens=int(usage["prompt_tokens"]),
                output_tokens=int(usage["completion_tokens"]),
                adapter=self.name,
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat completion reply: {exc}") from exc

    def complete(self, request: ChatRequest) -> ChatResponse:
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                return self._post_once(request)
            except TransientBackendError as exc:
                last = exc
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff * (2**attempt)
                    log.warning("retrying after transient failure (%s): %s", delay, exc)
                    self._sleep(delay)
        raise GatewayError(
            f"gave up after {self.max_attempts} attempts; last failure: {last}"
        )


class ResponseCache:
    """Persistent digest -> (text, usage) store for deterministic requests.

    Writes go whole-file to a temp path and are renamed into place, so a
    killed run never leaves a torn cache behind.
    """

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path else None
        self._entries: dict[str, tuple[str, int, int]] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                log.warning("dropping torn cache line in %s", self.path)
                continue
            usage = record["usage"]
            self._entries[record["digest"]] = (
                record["text"],
                int(usage["input"]),
                int(usage["output"]),
            )

    def get(self, digest: str) -> Optional[tuple[str, int, int]]:
        with self._lock:
            return self._entries.get(digest)

    def put(self, digest: str, text: str, input_tokens: int, output_tokens: int) -> None:
        with self._lock:
            if digest in self._entries:
                return
            self._entries[digest] = (text, input_tokens, output_tokens)
            if self.path is None:
                return
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with tmp.open("w", encoding="utf-8") as handle:
                for key, (cached_text, inp, out) in self._entries.items():
                    handle.write(
                        json.dumps(
                            {
                                "digest": key,
                                "text": cached_text,
                                "usage": {"input": inp, "output": out},
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
            tmp.replace(self.path)


@dataclass(frozen=True)
class ResponseRecord:
    step: int
    role: str
    adapter: str
    digest: str
    input_tokens: int
    output_tokens: int

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "role": self.role,
            "adapter": self.adapter,
            "digest": self.digest,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }


class ResponseLog:
    """Append-only usage log; one record per served completion."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path else None
        self.records: list[ResponseRecord] = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("dropping torn log line in %s", self.path)
                    continue
                self.records.append(ResponseRecord(**raw))

    def append(self, record: ResponseRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")

    def totals(self) -> dict[str, int]:
        out = {OPTIMIZER: 0, TARGET: 0}
        for record in self.records:
            out[record.role] = (
                out.get(record.role, 0) + record.input_tokens + record.output_tokens
            )
        return out


def read_token_totals(path: Path) -> dict[str, int]:
    """Recompute per-role token totals straight from a response log file."""
    totals = {OPTIMIZER: 0, TARGET: 0}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        totals[record["role"]] = (
            totals.get(record["role"], 0)
            + record["input_tokens"]
            + record["output_tokens"]
        )
    return totals


@dataclass
class LLMGateway:
    """Routes requests to per-role adapters with caching and usage logging.

    ``step`` is advanced by the optimization loop so log records can be
    attributed; in-flight requests per role are bounded by a semaphore.
    """

    adapters: dict[str, object]
    cache: ResponseCache = field(default_factory=ResponseCache)
    response_log: ResponseLog = field(default_factory=ResponseLog)
    parallelism: int = 4
    step: int = 0

    def __post_init__(self) -> None:
        self._semaphores = {
            role: threading.Semaphore(self.parallelism) for role in self.adapters
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        adapter = self.adapters.get(request.role)
        if adapter is None:
            raise ConfigurationError(f"no adapter configured for role {request.role!r}")
        if request.deterministic:
            hit = self.cache.get(request.digest)
            if hit is not None:
                # served from cache: no backend spend, so nothing is logged
                text, inp, out = hit
                return ChatResponse(text, inp, out, adapter="cache")
        with self._semaphores[request.role]:
            response = adapter.complete(request)
        if request.deterministic:
            self.cache.put(
                request.digest, response.text, response.input_tokens, response.output_tokens
            )
        self._log(request, response)
        return response

    def _log(self, request: ChatRequest, response: ChatResponse) -> None:
        self.response_log.append(
            ResponseRecord(
                step=self.step,
                role=request.role,
                adapter=response.adapter,
                digest=request.digest,
                input_tokens=response.input_tokens,
                output_tokens=response.output_tokens,
            )
        )

    def token_totals(self) -> tuple[int, int]:
        totals = self.response_log.totals()
        return totals.get(OPTIMIZER, 0), totals.get(TARGET, 0)
