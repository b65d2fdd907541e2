"""Text-completion backends: live chat-completions, scripted mock, replay."""

from __future__ import annotations

import asyncio
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Protocol, Sequence

import httpx

from .errors import ReplayMissError, RequestError, ScriptedMissError, TransportError
from .modes import PromptBundle, ThinkingMode

if TYPE_CHECKING:
    from .probe import ProbeRecord

__all__ = [
    "Completion",
    "BackendConfig",
    "Backend",
    "ChatCompletionsBackend",
    "MockBackend",
    "ReplayBackend",
    "make_mock_backend",
    "make_replay_backend",
    "estimate_tokens",
    "build_request_body",
    "parse_response_body",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Completion:
    text: str
    output_tokens: int
    latency_ms: float = 0.0
    truncated: bool = False
    # True when the provider sent no usage block and the count is a guess
    tokens_estimated: bool = False
    # set only by the replay backend, which may not have the text to regrade
    recorded_correct: bool | None = None

    def __post_init__(self) -> None:
        if self.output_tokens < 1:
            object.__setattr__(self, "output_tokens", 1)


def estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


class Backend(Protocol):
    model_id: str

    async def complete(
        self,
        bundle: PromptBundle,
        *,
        question_id: str | None = None,
        run_index: int | None = None,
    ) -> Completion: ...


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = "http://localhost:8000/v1/chat/completions"
    model_id: str = "default"
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout_ms: float = 120_000
    max_retries: int = 3
    retry_base_delay_ms: float = 500
    max_in_flight: int = 16

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        # the key itself is never serialized, only the variable name
        return {
            "endpoint_url": self.endpoint_url,
            "model_id": self.model_id,
            "api_key_env": self.api_key_env,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "retry_base_delay_ms": self.retry_base_delay_ms,
            "max_in_flight": self.max_in_flight,
        }


def build_request_body(bundle: PromptBundle, model_id: str) -> dict[str, Any]:
    gen = bundle.generation
    return {
        "model": model_id,
        "messages": bundle.messages(),
        "temperature": gen.temperature,
        "top_p": gen.top_p,
        "max_tokens": gen.max_output_tokens,
    }


def parse_response_body(body: Mapping[str, Any]) -> Completion:
    """Turn a chat-completions response body into a :class:`Completion`."""
    try:
        choice = body["choices"][0]
        text = choice["message"].get("content") or ""
    except (KeyError, IndexError, TypeError, AttributeError):
        raise RequestError("response has no choices[0].message") from None
    finish = choice.get("finish_reason")
    usage = body.get("usage") or {}
    tokens = usage.get("completion_tokens")
    estimated = not isinstance(tokens, int) or isinstance(tokens, bool)
    if estimated:
        log.warning("response carries no completion token usage; estimating from text length")
        tokens = estimate_tokens(text)
    return Completion(text=text, output_tokens=tokens, truncated=finish == "length", tokens_estimated=estimated)


class _LoopLocalSemaphore:
    """asyncio.Semaphore that is recreated when the event loop changes."""

    def __init__(self, limit: int):
        self.limit = limit
        self._loop: asyncio.AbstractEventLoop | None = None
        self._sem: asyncio.Semaphore | None = None

    def get(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._sem is None or self._loop is not loop:
            self._loop = loop
            self._sem = asyncio.Semaphore(self.limit)
        return self._sem


class ChatCompletionsBackend:
    """HTTP client for OpenAI-style ``/v1/chat/completions`` endpoints.

    Network errors, timeouts and 5xx responses are retried with exponential
    backoff plus jitter; 4xx responses fail immediately. At most
    ``config.max_in_flight`` requests are outstanding at once.

    Use ``async with backend:`` to share one connection pool across calls.
    """

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.AsyncBaseTransport | None = None,
        rng: random.Random | None = None,
        sleep=asyncio.sleep,
    ):
        self.config = config
        self.model_id = config.model_id
        self._transport = transport
        self._rng = rng or random.Random()
        self._sleep = sleep
        self._sem = _LoopLocalSemaphore(config.max_in_flight)
        self._client: httpx.AsyncClient | None = None
        self.attempts = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _new_client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(
            transport=self._transport,
            timeout=self.config.timeout_ms / 1000.0,
        )

    async def __aenter__(self) -> ChatCompletionsBackend:
        self._client = self._new_client()
        return self

    async def __aexit__(self, *exc_info) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None

    def backoff_delay(self, attempt: int) -> float:
        """Seconds to wait before retry number ``attempt`` (0-based)."""
        base = self.config.retry_base_delay_ms / 1000.0 * (2**attempt)
        return base * (1.0 + 0.5 * self._rng.random())

    async def complete(
        self,
        bundle: PromptBundle,
        *,
        question_id: str | None = None,
        run_index: int | None = None,
    ) -> Completion:
        body = build_request_body(bundle, self.config.model_id)
        async with self._sem.get():
            if self._client is not None:
                return await self._post_with_retries(self._client, body, bundle)
            async with self._new_client() as client:
                return await self._post_with_retries(client, body, bundle)

    async def _post_with_retries(
        self, client: httpx.AsyncClient, body: dict[str, Any], bundle: PromptBundle
    ) -> Completion:
        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                await self._sleep(self.backoff_delay(attempt - 1))
            self.attempts += 1
            started = time.perf_counter()
            try:
                response = await client.post(
                    self.config.endpoint_url, json=body, headers=self._headers()
                )
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.info("attempt %d failed: %s", attempt + 1, last_error)
                continue
            latency = (time.perf_counter() - started) * 1000.0
            if 400 <= response.status_code < 500:
                raise RequestError(
                    f"upstream rejected request with HTTP {response.status_code}: {response.text[:500]}",
                    status_code=response.status_code,
                )
            if response.status_code >= 500:
                last_error = f"HTTP {response.status_code}"
                log.info("attempt %d failed: %s", attempt + 1, last_error)
                continue
            try:
                payload = response.json()
            except ValueError:
                raise RequestError("upstream returned a non-JSON body") from None
            completion = parse_response_body(payload)
            return Completion(
                text=completion.text,
                output_tokens=completion.output_tokens,
                latency_ms=latency,
                truncated=completion.truncated,
                tokens_estimated=completion.tokens_estimated,
            )
        raise TransportError(
            f"{self.config.endpoint_url} failed after {self.config.max_retries + 1} attempts ({last_error})"
        )


ScriptEntry = tuple[str, int]


@dataclass
class MockCall:
    question_id: str | None
    run_index: int | None
    bundle: PromptBundle


class MockBackend:
    """Deterministic scripted backend keyed by ``(question_id, mode)``.

    A script value is either one ``(text, tokens)`` pair or a list of pairs;
    lists are indexed by run index (cycling), or by call count for that key
    when no run index is given. Token counts above the bundle's cap are
    clamped to the cap and the completion is marked truncated. Every request
    is kept in :attr:`calls`.
    """

    def __init__(self, script: Mapping[tuple[str, Any], ScriptEntry | Sequence[ScriptEntry]], model_id: str = "mock"):
        if not script:
            raise ValueError("mock script must not be empty")
        self.model_id = model_id
        self._script: dict[tuple[str, ThinkingMode], list[ScriptEntry]] = {}
        for (qid, mode), value in script.items():
            entries = [value] if _is_entry(value) else list(value)
            if not entries:
                raise ValueError(f"empty script entry for {(qid, mode)}")
            self._script[(str(qid), ThinkingMode.parse(mode))] = [(str(t), int(n)) for t, n in entries]
        self._lock = threading.Lock()
        self._counters: dict[tuple[str, ThinkingMode], int] = {}
        self.calls: list[MockCall] = []

    async def complete(
        self,
        bundle: PromptBundle,
        *,
        question_id: str | None = None,
        run_index: int | None = None,
    ) -> Completion:
        key = (str(question_id), bundle.mode)
        entries = self._script.get(key)
        with self._lock:
            self.calls.append(MockCall(question_id, run_index, bundle))
            if entries is None:
                raise ScriptedMissError(f"no scripted completion for question {question_id!r} in {bundle.mode.value} mode")
            count = self._counters.get(key, 0)
            self._counters[key] = count + 1
        index = run_index if run_index is not None else count
        text, tokens = entries[index % len(entries)]
        cap = bundle.generation.max_output_tokens
        return Completion(text=text, output_tokens=min(tokens, cap), truncated=tokens > cap)

    @property
    def call_count(self) -> int:
        return len(self.calls)


def _is_entry(value: Any) -> bool:
    return isinstance(value, tuple) and len(value) == 2 and isinstance(value[0], str)


def make_mock_backend(script: Mapping[tuple[str, Any], Any], model_id: str = "mock") -> MockBackend:
    return MockBackend(script, model_id=model_id)


class ReplayBackend:
    """Serves the runs stored in a probe log.

    Request ``i`` for a ``(question, mode)`` key gets recorded run ``i mod k``;
    an explicit ``run_index`` takes precedence over the call counter.
    """

    def __init__(self, records: Iterable[ProbeRecord], model_id: str = "replay"):
        self.model_id = model_id
        self._runs: dict[tuple[str, ThinkingMode], list[Any]] = {}
        for record in records:
            self._runs[(record.question_id, record.mode)] = list(record.runs)
        self._lock = threading.Lock()
        self._counters: dict[tuple[str, ThinkingMode], int] = {}

    def __contains__(self, key: tuple[str, ThinkingMode]) -> bool:
        return (key[0], ThinkingMode.parse(key[1])) in self._runs

    async def complete(
        self,
        bundle: PromptBundle,
        *,
        question_id: str | None = None,
        run_index: int | None = None,
    ) -> Completion:
        key = (str(question_id), bundle.mode)
        runs = self._runs.get(key)
        if not runs:
            raise ReplayMissError(f"probe log has no runs for question {question_id!r} in {bundle.mode.value} mode")
        with self._lock:
            count = self._counters.get(key, 0)
            self._counters[key] = count + 1
        run = runs[(run_index if run_index is not None else count) % len(runs)]
        if run.failed:
            raise TransportError(f"recorded run for {question_id!r} in {bundle.mode.value} mode had failed")
        return Completion(
            text=run.text or "",
            output_tokens=run.output_tokens,
            truncated=run.truncated,
            recorded_correct=run.correct,
        )


def make_replay_backend(records: Iterable[ProbeRecord], model_id: str = "replay") -> ReplayBackend:
    return ReplayBackend(records, model_id=model_id)
