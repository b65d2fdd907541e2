import asyncio
import json
from urllib.parse import unquote

import httpx
import pytest

from moderoute.backend import BackendConfig
from moderoute.errors import ConfigError
from moderoute.modes import ThinkingMode, load_template_set
from moderoute.router import FeaturizerConfig, MindRouter
from moderoute.service import ServiceConfig, create_app, load_service_config, rewrite_request

UPSTREAM = "http://upstream.test/v1/chat/completions"
TEMPLATES = load_template_set()


class KeywordRouter:
    """Deterministic stand-in: routes on a keyword in the question."""

    def predict_mode(self, text):
        if "theorem" in text:
            return ThinkingMode.SLOW, (0.1, 0.2, 0.7)
        if "integral" in text:
            return ThinkingMode.NORMAL, (0.2, 0.6, 0.2)
        return ThinkingMode.FAST, (0.8, 0.1, 0.1)


class Upstream:
    """Mock provider that echoes what it received and tracks concurrency."""

    def __init__(self, delay=0.0, status=200):
        self.delay = delay
        self.status = status
        self.active = 0
        self.peak = 0
        self.requests = []

    async def __call__(self, request):
        body = json.loads(request.content)
        self.requests.append(body)
        self.active += 1
        self.peak = max(self.peak, self.active)
        try:
            if self.delay:
                await asyncio.sleep(self.delay)
        finally:
            self.active -= 1
        if self.status != 200:
            return httpx.Response(self.status, text="upstream exploded")
        return httpx.Response(
            200,
            json={
                "choices": [{"message": {"role": "assistant", "content": body["messages"][0]["content"]}, "finish_reason": "stop"}],
                "usage": {"completion_tokens": 3},
                "echo": body,
            },
        )


def make_app(router=KeywordRouter(), upstream=None, cap=16):
    upstream = upstream or Upstream()
    config = ServiceConfig(
        upstream=BackendConfig(endpoint_url=UPSTREAM, model_id="up-model", api_key_env=None),
        max_concurrent_requests=cap,
    )
    app = create_app(config, router, transport=httpx.MockTransport(upstream))
    return app, upstream


def client_for(app):
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://gateway")


def call(app, method, path, **kw):
    async def go():
        async with client_for(app) as client:
            return await client.request(method, path, **kw)

    return asyncio.run(go())


def chat(question, system=None, **extra):
    messages = ([{"role": "system", "content": system}] if system else []) + [{"role": "user", "content": question}]
    return {"messages": messages, **extra}


def test_health_ready_and_not_ready():
    app, _ = make_app()
    r = call(app, "GET", "/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"
    bare = create_app(ServiceConfig(), None, transport=httpx.MockTransport(Upstream()))
    r = call(bare, "GET", "/health")
    assert r.status_code == 503 and r.json()["status"] == "not_ready"


def test_health_digest_matches_model_file(tmp_path):
    model = MindRouter(hash_dimension=256, epochs=2).fit(["a capital", "an integral", "a theorem"], ["fast", "normal", "slow"])
    path = tmp_path / "r.npz"
    digest = model.save(path)
    app = create_app(ServiceConfig(router_model_path=str(path)), transport=httpx.MockTransport(Upstream()))
    app.state.service.load_router()
    assert call(app, "GET", "/health").json()["model_digest"] == digest


def test_route_zero_model():
    app, _ = make_app(router=MindRouter.zero(FeaturizerConfig(hash_dimension=64)))
    r = call(app, "POST", "/route", json={"question": "anything"})
    assert r.status_code == 200
    assert r.json()["mode"] == "fast"
    assert r.json()["probabilities"] == pytest.approx([1 / 3] * 3)
    again = call(app, "POST", "/route", json={"question": "anything"})
    assert again.json() == r.json()


@pytest.mark.parametrize("payload", [{}, {"question": ""}, {"question": "   "}, {"question": 3}])
def test_route_bad_input(payload):
    app, _ = make_app()
    assert call(app, "POST", "/route", json=payload).status_code == 400


def test_route_without_model():
    app = create_app(ServiceConfig(), None, transport=httpx.MockTransport(Upstream()))
    assert call(app, "POST", "/route", json={"question": "x"}).status_code == 503
    assert call(app, "POST", "/v1/chat/completions", json=chat("x")).status_code == 503


@pytest.mark.parametrize("client_cap,expected", [(64, 64), (9999, 128), (None, 128)])
def test_cap_min_rule_fast(client_cap, expected):
    app, upstream = make_app()
    extra = {} if client_cap is None else {"max_tokens": client_cap}
    r = call(app, "POST", "/v1/chat/completions", json=chat("what is the capital of France", **extra))
    assert r.status_code == 200
    assert upstream.requests[0]["max_tokens"] == expected
    assert r.headers["X-Thinking-Mode"] == "fast"


def test_max_completion_tokens_also_capped():
    app, upstream = make_app()
    call(app, "POST", "/v1/chat/completions", json=chat("prove the theorem", max_completion_tokens=10_000))
    assert upstream.requests[0]["max_completion_tokens"] == 4096
    assert "max_tokens" not in upstream.requests[0]


def test_template_injected_verbatim_and_original_preserved():
    app, upstream = make_app()
    r = call(app, "POST", "/v1/chat/completions", json=chat("prove the theorem", system="You are a pirate.\nArr"))
    assert r.status_code == 200
    sent = upstream.requests[0]
    assert sent["messages"][0] == {"role": "system", "content": TEMPLATES.slow_system}
    assert sent["messages"][1] == {"role": "user", "content": "prove the theorem"}
    assert [m["role"] for m in sent["messages"]].count("system") == 1
    assert r.json()["choices"][0]["message"]["content"] == TEMPLATES.slow_system
    assert unquote(r.headers["X-Original-System-Prompt"]) == "You are a pirate.\nArr"
    assert json.loads(r.headers["X-Router-Probabilities"]) == [0.1, 0.2, 0.7]
    assert sent["temperature"] == 0.6 and sent["top_p"] == 0.9 and sent["model"] == "up-model"


def test_client_sampling_params_kept():
    body, _ = rewrite_request(chat("q", temperature=0.1, model="client-model"), ThinkingMode.NORMAL, TEMPLATES, "m")
    assert body["temperature"] == 0.1 and body["model"] == "client-model" and body["max_tokens"] == 2048


@pytest.mark.parametrize(
    "payload",
    [
        {"messages": []},
        {"messages": [{"role": "system", "content": "only system"}]},
        {"messages": "nope"},
        chat("x", max_tokens=0),
        chat("x", stream=True),
        chat(""),
    ],
)
def test_chat_malformed(payload):
    app, upstream = make_app()
    assert call(app, "POST", "/v1/chat/completions", json=payload).status_code == 400
    assert upstream.requests == []


def test_upstream_failure_is_502():
    app, _ = make_app(upstream=Upstream(status=500))
    r = call(app, "POST", "/v1/chat/completions", json=chat("hi"))
    assert r.status_code == 502
    assert "upstream exploded" in r.json()["error"]["upstream_detail"]


def test_upstream_unreachable_is_502():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    config = ServiceConfig(upstream=BackendConfig(endpoint_url=UPSTREAM, api_key_env=None))
    app = create_app(config, KeywordRouter(), transport=httpx.MockTransport(handler))
    assert call(app, "POST", "/v1/chat/completions", json=chat("hi")).status_code == 502


def test_concurrent_requests_respect_cap():
    upstream = Upstream(delay=0.01)
    app, _ = make_app(upstream=upstream, cap=4)
    questions = [("prove the theorem", "slow"), ("an integral", "normal"), ("capital city", "fast")]

    async def go():
        async with client_for(app) as client:
            return await asyncio.gather(
                *(client.post("/v1/chat/completions", json=chat(questions[i % 3][0] + f" #{i}", max_tokens=3000)) for i in range(100))
            )

    responses = asyncio.run(go())
    assert all(r.status_code == 200 for r in responses)
    for i, r in enumerate(responses):
        assert r.headers["X-Thinking-Mode"] == questions[i % 3][1]
    assert upstream.peak <= 4
    assert app.state.service.max_in_flight_seen <= 4
    assert upstream.peak >= 2
    # questions pass through untouched
    sent = sorted(req["messages"][-1]["content"] for req in upstream.requests)
    assert sent == sorted(questions[i % 3][0] + f" #{i}" for i in range(100))


def test_load_service_config(tmp_path):
    path = tmp_path / "svc.yaml"
    path.write_text("listen_address: 0.0.0.0:9000\nmax_concurrent_requests: 3\nupstream:\n  endpoint_url: http://a/v1\n  model_id: m1\n")
    cfg = load_service_config(path, env={"MODEROUTE_UPSTREAM_MODEL": "m2"})
    assert cfg.port == 9000 and cfg.max_concurrent_requests == 3
    assert cfg.upstream.endpoint_url == "http://a/v1" and cfg.upstream.model_id == "m2"


def test_service_config_rejects_inline_key(tmp_path):
    path = tmp_path / "svc.yaml"
    path.write_text("upstream:\n  api_key: sk-123\n")
    with pytest.raises(ConfigError):
        load_service_config(path, env={})
    with pytest.raises(ConfigError):
        load_service_config(tmp_path / "absent.yaml", env={})
