"""HTTP agent gateway: request contract, retry ladder, auth header, and
failure accounting, all against a local scripted stub server."""

from __future__ import annotations

import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from prunepilot import (
    AgentContext,
    AgentEndpointConfig,
    AgentFailureError,
    LayerProfile,
    llm_decide,
)


def mk_profile(name, z_sens=0.0):
    return LayerProfile(
        name=name,
        sensitivity=1.0,
        grad_importance=1.0,
        z_sens=z_sens,
        z_grad=0.0,
        sparsity=0.0,
    )


def mk_context():
    return AgentContext(
        iteration=1,
        current_sparsity=0.1,
        target_sparsity=0.5,
        ppl_baseline=100.0,
        ppl_current=105.0,
        profiles=[mk_profile("block0.q_proj", -1.0), mk_profile("lm_head", 1.0)],
    )


GOOD_DECISION = json.dumps(
    {
        "reasoning": "prune the cheapest layer",
        "stop_pruning": False,
        "layer_decisions": [{"layer": "block0.q_proj", "additional_sparsity": 0.05}],
    }
)


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length).decode("utf-8")
        self.server.requests.append(
            {"body": body, "headers": {k: v for k, v in self.headers.items()}}
        )
        if self.server.script:
            status, payload = self.server.script.popleft()
        else:
            status, payload = self.server.default_response
        data = payload.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):  # keep pytest output clean
        pass


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.requests = []
    server.script = deque()
    server.default_response = (200, GOOD_DECISION)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_address[1]}/decide"
    try:
        yield server, url
    finally:
        server.shutdown()
        server.server_close()


def endpoint(url, **overrides):
    return AgentEndpointConfig(url=url, timeout_s=5.0, **overrides)


def test_valid_response_passes_through(stub_server, monkeypatch):
    server, url = stub_server
    monkeypatch.delenv("PRUNEPILOT_API_KEY", raising=False)
    decision = llm_decide(mk_context(), endpoint(url))
    assert decision.stop_pruning is False
    assert decision.layer_decisions[0].layer == "block0.q_proj"
    assert decision.layer_decisions[0].additional_sparsity == 0.05
    assert len(server.requests) == 1


def test_content_wrapped_response_passes_through(stub_server):
    server, url = stub_server
    server.script.append((200, json.dumps({"content": GOOD_DECISION})))
    decision = llm_decide(mk_context(), endpoint(url))
    assert decision.layer_decisions[0].layer == "block0.q_proj"
    assert len(server.requests) == 1


def test_request_body_carries_the_contract(stub_server):
    server, url = stub_server
    llm_decide(mk_context(), endpoint(url))
    body = json.loads(server.requests[0]["body"])
    assert set(body) == {"model", "temperature", "system", "user", "response_schema"}
    assert body["temperature"] == 0.5
    assert body["response_schema"]["required"] == [
        "reasoning", "stop_pruning", "layer_decisions",
    ]
    bounds = body["response_schema"]["properties"]["layer_decisions"]["items"][
        "properties"]["additional_sparsity"]
    assert bounds == {"type": "number", "minimum": 0.01, "maximum": 0.15}
    assert "Iteration: 1" in body["user"]
    assert server.requests[0]["headers"]["Content-Type"] == "application/json"


def test_malformed_then_valid_consumes_one_retry(stub_server):
    server, url = stub_server
    server.script.append((200, "not json at all {"))
    server.script.append((200, GOOD_DECISION))
    audit_rows = []
    decision = llm_decide(mk_context(), endpoint(url), audit=audit_rows.append)
    assert decision.layer_decisions[0].layer == "block0.q_proj"
    assert len(server.requests) == 2

    retry_user = json.loads(server.requests[1]["body"])["user"]
    first_user = json.loads(server.requests[0]["body"])["user"]
    assert "Your previous response was rejected" in retry_user
    assert retry_user.startswith(first_user)

    assert [r["attempt"] for r in audit_rows] == [0, 1]
    assert "error" in audit_rows[0] and "error" not in audit_rows[1]


def test_unknown_layer_then_valid_retries_with_error_text(stub_server):
    server, url = stub_server
    bad = json.dumps(
        {
            "reasoning": "r",
            "stop_pruning": False,
            "layer_decisions": [{"layer": "block7.huge", "additional_sparsity": 0.05}],
        }
    )
    server.script.append((200, bad))
    server.script.append((200, GOOD_DECISION))
    decision = llm_decide(mk_context(), endpoint(url))
    assert decision.layer_decisions[0].layer == "block0.q_proj"
    retry_user = json.loads(server.requests[1]["body"])["user"]
    assert "block7.huge" in retry_user


def test_persistent_500_exhausts_attempts(stub_server):
    server, url = stub_server
    server.default_response = (500, "backend exploded")
    audit_rows = []
    with pytest.raises(AgentFailureError) as info:
        llm_decide(mk_context(), endpoint(url, max_retries=2), audit=audit_rows.append)
    assert info.value.attempts == 3
    assert "HTTP 500" in info.value.last_error
    assert len(server.requests) == 3
    assert [r["status"] for r in audit_rows] == [500, 500, 500]


def test_zero_retries_means_single_attempt(stub_server):
    server, url = stub_server
    server.default_response = (503, "busy")
    with pytest.raises(AgentFailureError) as info:
        llm_decide(mk_context(), endpoint(url, max_retries=0))
    assert info.value.attempts == 1
    assert len(server.requests) == 1


def test_transport_error_is_a_failure_not_a_crash():
    # Nothing listens here; connection is refused immediately.
    dead = AgentEndpointConfig(url="http://127.0.0.1:9", timeout_s=1.0, max_retries=1)
    with pytest.raises(AgentFailureError) as info:
        llm_decide(mk_context(), dead)
    assert info.value.attempts == 2
    assert "transport error" in info.value.last_error


def test_bearer_header_only_when_key_present(stub_server, monkeypatch):
    server, url = stub_server
    monkeypatch.delenv("PRUNEPILOT_API_KEY", raising=False)
    llm_decide(mk_context(), endpoint(url))
    assert "Authorization" not in server.requests[0]["headers"]

    monkeypatch.setenv("PRUNEPILOT_API_KEY", "sk-local-test")
    llm_decide(mk_context(), endpoint(url))
    assert server.requests[1]["headers"]["Authorization"] == "Bearer sk-local-test"


def test_custom_api_key_env_var(stub_server, monkeypatch):
    server, url = stub_server
    monkeypatch.setenv("OTHER_KEY", "abc123")
    llm_decide(mk_context(), endpoint(url, api_key_env="OTHER_KEY"))
    assert server.requests[0]["headers"]["Authorization"] == "Bearer abc123"


def test_endpoint_validation():
    with pytest.raises(ValueError, match="url"):
        llm_decide(mk_context(), AgentEndpointConfig(url=""))
    with pytest.raises(ValueError, match="temperature"):
        llm_decide(mk_context(), AgentEndpointConfig(url="http://x", temperature=3.0))
    with pytest.raises(ValueError, match="timeout"):
        llm_decide(mk_context(), AgentEndpointConfig(url="http://x", timeout_s=0.0))
    with pytest.raises(ValueError, match="max_retries"):
        llm_decide(mk_context(), AgentEndpointConfig(url="http://x", max_retries=-1))
