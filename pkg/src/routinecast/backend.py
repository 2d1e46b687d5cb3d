"""Text-generation backends: OpenAI-compatible HTTP chat client, offline mock, disk cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx

from .baseline import predict_next_argmax
from .errors import ConfigError, NoPriorError, RoutinecastError
from .priors import Priors, slot_index
from .promptkit import extract_query, render_answer

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-4o-mini"
DEFAULT_API_BASE = "https://api.openai.com/v1"


class BackendError(RoutinecastError):
    pass


class BackendTimeout(BackendError):
    pass


class RateLimited(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class ServerError(BackendError):
    pass


class AuthError(BackendError):
    pass


class MockContractError(BackendError):
    pass


TRANSIENT = (BackendTimeout, RateLimited, ServerError)


@dataclass(frozen=True)
class GenerationRequest:
    prompt_text: str
    model_id: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 64
    json_mode: bool = True
    attempt_index: int = 0  # distinguishes regenerations in the cache

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not self.model_id:
            raise ConfigError("model_id must not be empty")


@dataclass(frozen=True)
class GenerationResponse:
    raw_text: str
    latency_ms: float
    cache_hit: bool
    backend_id: str


def cache_key(request: GenerationRequest) -> str:
    payload = json.dumps(
        [request.model_id, repr(float(request.temperature)), request.prompt_text, request.attempt_index],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def prompt_hash(prompt_text: str) -> str:
    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()


class Backend:
    """Interface: ``generate(request) -> GenerationResponse``; safe for concurrent calls."""

    backend_id = "abstract"

    def __init__(self):
        self._counter_lock = threading.Lock()
        self.network_calls = 0

    def _count_network_call(self) -> None:
        with self._counter_lock:
            self.network_calls += 1

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        raise NotImplementedError


class HttpChatBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` client in JSON mode.

    Transient failures (timeouts, 429, 5xx) are retried with exponential
    backoff up to ``max_attempts`` total tries; a shared semaphore caps the
    number of in-flight requests.
    """

    def __init__(
        self,
        model: str = DEFAULT_MODEL,
        base_url: str | None = None,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        timeout_s: float = 60.0,
        concurrency: int = 4,
        max_attempts: int = 5,
        backoff_s: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        if concurrency < 1:
            raise ConfigError("concurrency must be at least 1")
        self.model = model
        self.base_url = (base_url or os.environ.get("ROUTINECAST_API_BASE") or DEFAULT_API_BASE).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("ROUTINECAST_API_KEY", "")
        self.client = client or httpx.Client(timeout=timeout_s)
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.sleep = sleep
        self.backend_id = f"http/{model}"
        self._slots = threading.BoundedSemaphore(concurrency)
        self.transient_retries = 0

    def _payload(self, request: GenerationRequest) -> dict:
        payload = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.json_mode:
            payload["response_format"] = {"type": "json_object"}
        return payload

    def _call_once(self, request: GenerationRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._count_network_call()
        try:
            resp = self.client.post(f"{self.base_url}/chat/completions", json=self._payload(request), headers=headers)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"request timed out: {exc!r}") from exc
        except httpx.HTTPError as exc:
            raise ServerError(f"transport failure: {exc!r}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"credentials rejected ({resp.status_code})")
        if resp.status_code == 429:
            retry_after = resp.headers.get("retry-after")
            try:
                delay = float(retry_after) if retry_after is not None else None
            except ValueError:
                delay = None
            raise RateLimited("rate limited (429)", delay)
        if resp.status_code >= 500:
            raise ServerError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"request rejected ({resp.status_code}): {resp.text[:200]}")
        try:
            choices = resp.json()["choices"]
            return str(choices[0]["message"]["content"] or "")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ServerError(f"unexpected completion payload: {exc!r}") from exc

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._slots:
            for attempt in range(self.max_attempts):
                started = time.perf_counter()
                try:
                    text = self._call_once(request)
                except TRANSIENT as exc:
                    if attempt == self.max_attempts - 1:
                        raise
                    delay = getattr(exc, "retry_after", None) or self.backoff_s * 2**attempt
                    with self._counter_lock:
                        self.transient_retries += 1
                    log.warning("transient backend error (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                    self.sleep(delay)
                    continue
                return GenerationResponse(text, (time.perf_counter() - started) * 1000, False, self.backend_id)
        raise AssertionError("unreachable")


class ScriptedBackend(Backend):
    """Replies looked up by the SHA-256 of the prompt text."""

    backend_id = "scripted"

    def __init__(self, replies: dict[str, str]):
        super().__init__()
        self.replies = dict(replies)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        key = prompt_hash(request.prompt_text)
        if key not in self.replies:
            raise MockContractError(f"no scripted reply for prompt {key[:12]}")
        return GenerationResponse(self.replies[key], 0.0, False, self.backend_id)


class MockBackend(Backend):
    """Offline stand-in that answers with the argmax Markov prediction.

    Reads the query block of the prompt, looks up the most probable successor
    of the last finished activity for that day and slot, and replies with it and
    its median duration as JSON. ``malformed_attempts`` lists attempt indices
    that get a free-text reply instead, to exercise retry handling.
    """

    backend_id = "mock/argmax"

    def __init__(self, priors: Priors, malformed_attempts: frozenset[int] | set[int] = frozenset()):
        super().__init__()
        self.priors = priors
        self.malformed_attempts = frozenset(malformed_attempts)
        self.calls = 0

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._counter_lock:
            self.calls += 1
        if request.attempt_index in self.malformed_attempts:
            return GenerationResponse("I think they will relax next.", 0.0, False, self.backend_id)
        try:
            query = extract_query(request.prompt_text)
        except ValueError as exc:
            raise MockContractError(str(exc)) from exc
        try:
            pred = predict_next_argmax(self.priors, query.last_label, query.day_of_week, slot_index(query.local_minutes))
        except NoPriorError as exc:
            raise MockContractError(f"mock cannot answer: {exc}") from exc
        text = render_answer(self.priors.ontology.index(pred.label), pred.duration_minutes)
        return GenerationResponse(text, 0.0, False, self.backend_id)


class CachedBackend(Backend):
    """Content-addressed read-through cache, one JSON file per request key."""

    def __init__(self, inner: Backend, cache_dir: str | Path):
        super().__init__()
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.backend_id = inner.backend_id
        self.hits = 0
        self.misses = 0
        self.writes = 0

    @property
    def network_calls(self) -> int:
        return self.inner.network_calls

    @network_calls.setter
    def network_calls(self, value: int) -> None:
        pass  # base-class init assigns; the inner backend owns the count

    @property
    def request_count(self) -> int:
        return self.misses

    def path_for(self, request: GenerationRequest) -> Path:
        key = cache_key(request)
        return self.cache_dir / key[:2] / f"{key}.json"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        path = self.path_for(request)
        if path.exists():
            doc = json.loads(path.read_text(encoding="utf-8"))
            with self._counter_lock:
                self.hits += 1
            return GenerationResponse(doc["raw_text"], 0.0, True, doc["backend_id"])
        with self._counter_lock:
            self.misses += 1
        resp = self.inner.generate(request)
        self._write(path, {"raw_text": resp.raw_text, "backend_id": resp.backend_id, "model_id": request.model_id})
        return resp

    def _write(self, path: Path, doc: dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        with self._counter_lock:
            self.writes += 1


def cached(inner: Backend, cache_dir: str | Path) -> CachedBackend:
    return CachedBackend(inner, cache_dir)
