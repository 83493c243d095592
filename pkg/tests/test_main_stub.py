# tests/test_main_stub.py
import json

import pytest
import requests
from fastapi.testclient import TestClient

import main
from generator import LLMBackend, LLMStatusError, llm_request
from main import create_stub_app, load_responses

MESSAGES = [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}]


def test_health_ok():
    client = TestClient(main.app)
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"ok": True}


def test_scripted_failures_then_wrapping_replies():
    app = create_stub_app(["first", "second"], fail_statuses=[500])
    client = TestClient(app)

    r = client.post("/v1/chat/completions", json={"model": "m", "messages": MESSAGES})
    assert r.status_code == 500

    texts = []
    for _ in range(3):
        r = client.post("/v1/chat/completions", json={"model": "m", "messages": MESSAGES})
        assert r.status_code == 200
        texts.append(r.json()["choices"][0]["message"]["content"])
    assert texts == ["first", "second", "first"]
    assert r.headers["x-request-id"] == "stub-000003"
    assert r.json()["model"] == "m"

    state = app.state.stub
    assert state.calls == 4 and state.served == 3
    assert state.requests[0]["messages"] == MESSAGES


def test_stub_rejects_bad_payloads():
    client = TestClient(create_stub_app(["x"]))
    r = client.post("/v1/chat/completions", content=b"{not json", headers={"Content-Type": "application/json"})
    assert r.status_code == 400 and r.json()["error"] == "invalid_json"
    r = client.post("/v1/chat/completions", json={"model": "m"})
    assert r.status_code == 400 and r.json()["error"] == "messages_required"
    assert client.app.state.stub.calls == 0


def test_stub_without_responses_is_unavailable():
    client = TestClient(create_stub_app([]))
    r = client.post("/v1/chat/completions", json={"messages": MESSAGES})
    assert r.status_code == 503


def test_load_responses_from_list_and_directory(tmp_path):
    listing = tmp_path / "replies.json"
    listing.write_text(json.dumps(["a", "b"]), encoding="utf-8")
    assert load_responses(listing) == ["a", "b"]

    d = tmp_path / "replies"
    d.mkdir()
    (d / "02.txt").write_text("two", encoding="utf-8")
    (d / "01.txt").write_text("one", encoding="utf-8")
    (d / "notes.md").write_text("ignored", encoding="utf-8")
    assert load_responses(d) == ["one", "two"]

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"a": 1}), encoding="utf-8")
    with pytest.raises(ValueError):
        load_responses(bad)


def _route_requests_to(client, monkeypatch):
    def fake_post(url, headers=None, json=None, timeout=None):
        path = "/" + url.split("://", 1)[-1].split("/", 1)[1]
        return client.post(path, headers=headers, json=json)

    monkeypatch.setattr(requests, "post", fake_post)


def test_llm_backend_round_trip_against_stub(monkeypatch):
    reply = "Here you go.\n```json\n{\"title\": \"lift\"}\n```\n"
    client = TestClient(create_stub_app([reply]))
    _route_requests_to(client, monkeypatch)

    backend = LLMBackend(endpoint="http://stub.local/v1/chat/completions", model="stub-model", api_key="k")
    out = llm_request(backend, MESSAGES)
    assert out.text == reply
    assert out.request_id == "stub-000000"

    sent = client.app.state.stub.requests[0]
    assert sent["model"] == "stub-model" and sent["temperature"] == 0.7
    assert sent["messages"] == MESSAGES


def test_llm_backend_surfaces_stub_status(monkeypatch):
    client = TestClient(create_stub_app(["x"], fail_statuses=[429]))
    _route_requests_to(client, monkeypatch)
    backend = LLMBackend(endpoint="http://stub.local/v1/chat/completions")
    with pytest.raises(LLMStatusError) as exc:
        llm_request(backend, MESSAGES)
    assert exc.value.status == 429
    assert "scripted failure 429" in str(exc.value)
