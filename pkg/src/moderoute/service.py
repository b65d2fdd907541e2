"""HTTP gateway: routing endpoint plus a chat-completions proxy.

The proxy picks a mode for the last user message, swaps in that mode's
system prompt, caps the output budget at ``min(client cap, mode cap)`` and
forwards to the upstream provider. Routing decisions come back in headers:

* ``X-Thinking-Mode``: fast / normal / slow
* ``X-Router-Probabilities``: JSON list in fast, normal, slow order
* ``X-Original-System-Prompt``: percent-encoded client system text, if any
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import quote

import httpx
import yaml
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .backend import BackendConfig
from .errors import ConfigError
from .modes import DEFAULT_LIMITS, TemplateSet, ThinkingMode, load_template_set
from .router import MindRouter, ModeClassifier

__all__ = ["ServiceConfig", "ServiceState", "create_app", "load_service_config"]

log = logging.getLogger(__name__)

MODE_HEADER = "X-Thinking-Mode"
PROBS_HEADER = "X-Router-Probabilities"
ORIGINAL_SYSTEM_HEADER = "X-Original-System-Prompt"


@dataclass(frozen=True)
class ServiceConfig:
    listen_address: str = "127.0.0.1:8080"
    upstream: BackendConfig = field(default_factory=BackendConfig)
    router_model_path: str | None = None
    templates_path: str | None = None
    request_timeout_ms: float = 120_000
    max_concurrent_requests: int = 16

    def __post_init__(self) -> None:
        if self.max_concurrent_requests < 1:
            raise ConfigError("max_concurrent_requests must be >= 1")

    @property
    def host(self) -> str:
        return self.listen_address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen_address.rsplit(":", 1)[1])


def load_service_config(path: str | Path | None = None, env: dict[str, str] | None = None) -> ServiceConfig:
    """Read a YAML service config; ``MODEROUTE_*`` variables override it."""
    env = dict(os.environ if env is None else env)
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"service config not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"service config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("service config must be a mapping")
    upstream = dict(data.pop("upstream", {}) or {})
    if "api_key" in upstream:
        raise ConfigError("put the API key in an environment variable and name it with api_key_env")
    for key, var in (("endpoint_url", "MODEROUTE_UPSTREAM_URL"), ("model_id", "MODEROUTE_UPSTREAM_MODEL")):
        if var in env:
            upstream[key] = env[var]
    if "MODEROUTE_ROUTER_MODEL" in env:
        data["router_model_path"] = env["MODEROUTE_ROUTER_MODEL"]
    try:
        return ServiceConfig(upstream=BackendConfig(**upstream), **data)
    except TypeError as exc:
        raise ConfigError(f"bad service config: {exc}") from None


class ServiceState:
    def __init__(self, config: ServiceConfig, templates: TemplateSet, transport: httpx.AsyncBaseTransport | None):
        self.config = config
        self.templates = templates
        self.transport = transport
        self.router: ModeClassifier | None = None
        self.model_digest: str | None = None
        self.started = time.monotonic()
        self.in_flight = 0
        self.max_in_flight_seen = 0
        self._sem: asyncio.Semaphore | None = None
        self._client: httpx.AsyncClient | None = None

    @property
    def ready(self) -> bool:
        return self.router is not None

    def install_router(self, router: ModeClassifier) -> None:
        self.router = router
        digest = getattr(router, "model_digest", None)
        self.model_digest = digest() if callable(digest) else None

    def load_router(self) -> None:
        if self.config.router_model_path:
            self.install_router(MindRouter.load(self.config.router_model_path))

    def semaphore(self) -> asyncio.Semaphore:
        if self._sem is None:
            self._sem = asyncio.Semaphore(self.config.max_concurrent_requests)
        return self._sem

    def client(self) -> httpx.AsyncClient:
        if self._client is None:
            self._client = httpx.AsyncClient(
                transport=self.transport, timeout=self.config.request_timeout_ms / 1000.0
            )
        return self._client

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        var = self.config.upstream.api_key_env
        if var and os.environ.get(var):
            headers["Authorization"] = f"Bearer {os.environ[var]}"
        return headers


def _error(status: int, message: str, **extra: Any) -> JSONResponse:
    return JSONResponse({"error": {"message": message, **extra}}, status_code=status)


def _text_of(content: Any) -> str | None:
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = [p.get("text", "") for p in content if isinstance(p, dict) and p.get("type") == "text"]
        return "".join(parts) if parts else None
    return None


def rewrite_request(
    body: dict[str, Any], mode: ThinkingMode, templates: TemplateSet, default_model: str
) -> tuple[dict[str, Any], str | None]:
    """Routed copy of a chat-completions request and the original system text.

    Client system messages are dropped (not merged) and the mode template
    goes first. User and assistant messages pass through untouched.
    """
    messages = body["messages"]
    system_texts = [_text_of(m.get("content")) or "" for m in messages if m.get("role") == "system"]
    kept = [m for m in messages if m.get("role") != "system"]
    out = dict(body)
    out["messages"] = [{"role": "system", "content": templates.for_mode(mode)}] + kept
    cap = DEFAULT_LIMITS[mode].max_output_tokens
    keys = [k for k in ("max_tokens", "max_completion_tokens") if out.get(k) is not None]
    if not keys:
        out["max_tokens"] = cap
    for key in keys:
        out[key] = min(int(out[key]), cap)
    out.setdefault("temperature", DEFAULT_LIMITS[mode].temperature)
    out.setdefault("top_p", DEFAULT_LIMITS[mode].top_p)
    out.setdefault("model", default_model)
    original = "\n\n".join(system_texts) if system_texts else None
    return out, original


def _validate_chat(body: Any) -> str:
    """Question text from the last user message; raises ValueError on bad input."""
    if not isinstance(body, dict):
        raise ValueError("request body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not all(isinstance(m, dict) for m in messages):
        raise ValueError("messages must be a list of objects")
    if body.get("stream"):
        raise ValueError("streaming is not supported")
    for key in ("max_tokens", "max_completion_tokens"):
        value = body.get(key)
        if value is not None and (isinstance(value, bool) or not isinstance(value, int) or value < 1):
            raise ValueError(f"{key} must be a positive integer")
    users = [m for m in messages if m.get("role") == "user"]
    if not users:
        raise ValueError("request has no user message")
    question = _text_of(users[-1].get("content"))
    if not question or not question.strip():
        raise ValueError("last user message is empty")
    return question


def create_app(
    config: ServiceConfig | None = None,
    router: ModeClassifier | None = None,
    *,
    transport: httpx.AsyncBaseTransport | None = None,
    templates: TemplateSet | None = None,
) -> FastAPI:
    """Build the gateway app.

    Pass ``router`` to serve an in-memory model; otherwise the model at
    ``config.router_model_path`` is loaded during startup. ``transport``
    replaces the upstream HTTP transport (tests use a mock).
    """
    config = config or ServiceConfig()
    state = ServiceState(config, templates or load_template_set(config.templates_path), transport)
    if router is not None:
        state.install_router(router)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if not state.ready:
            state.load_router()
        yield
        await state.aclose()

    app = FastAPI(title="moderoute gateway", lifespan=lifespan)
    app.state.service = state

    @app.get("/health")
    async def health():
        body = {
            "status": "ok" if state.ready else "not_ready",
            "model_digest": state.model_digest,
            "uptime_s": round(time.monotonic() - state.started, 3),
        }
        return JSONResponse(body, status_code=200 if state.ready else 503)

    @app.post("/route")
    async def route_endpoint(request: Request):
        try:
            body = await request.json()
        except ValueError:
            return _error(400, "body must be JSON with a 'question' field")
        question = body.get("question") if isinstance(body, dict) else None
        if not isinstance(question, str) or not question.strip():
            return _error(400, "'question' must be a non-empty string")
        if state.router is None:
            return _error(503, "router model not loaded")
        mode, probs = state.router.predict_mode(question)
        return {"mode": mode.value, "probabilities": list(probs)}

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = await request.json()
            question = _validate_chat(body)
        except ValueError as exc:
            return _error(400, str(exc))
        if state.router is None:
            return _error(503, "router model not loaded")
        mode, probs = state.router.predict_mode(question)
        forwarded, original = rewrite_request(body, mode, state.templates, config.upstream.model_id)

        async with state.semaphore():
            state.in_flight += 1
            state.max_in_flight_seen = max(state.max_in_flight_seen, state.in_flight)
            try:
                upstream = await state.client().post(
                    config.upstream.endpoint_url, json=forwarded, headers=state.headers()
                )
            except httpx.HTTPError as exc:
                return _error(502, "upstream request failed", upstream_detail=f"{type(exc).__name__}: {exc}")
            finally:
                state.in_flight -= 1

        if upstream.status_code >= 400:
            return _error(
                502,
                f"upstream returned HTTP {upstream.status_code}",
                upstream_status=upstream.status_code,
                upstream_detail=upstream.text[:2000],
            )
        try:
            payload = upstream.json()
        except ValueError:
            return _error(502, "upstream returned a non-JSON body", upstream_detail=upstream.text[:2000])
        headers = {MODE_HEADER: mode.value, PROBS_HEADER: json.dumps([round(p, 12) for p in probs])}
        if original is not None:
            headers[ORIGINAL_SYSTEM_HEADER] = quote(original, safe="")
        return JSONResponse(payload, headers=headers)

    return app
