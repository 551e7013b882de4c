from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from lcagent.backend import (
    AuthError,
    BackendConfig,
    HttpChatBackend,
    InvalidRequest,
    Message,
    ModelRequest,
    RateLimited,
    RecordingBackend,
    ScriptedBackend,
    ScriptExhausted,
    ScriptRule,
    dump_transcript,
    image_part,
    load_backend,
    text_part,
    user_request,
)


class _StubHandler(BaseHTTPRequestHandler):
    # statuses to answer in order; the last one repeats
    plan: list[int] = []
    seen: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).seen.append({"body": body, "auth": self.headers.get("Authorization")})
        status = self.plan.pop(0) if len(self.plan) > 1 else self.plan[0]
        if status == 200:
            payload = {"choices": [{"message": {"content": "stub reply"}}], "usage": {"prompt_tokens": 7, "completion_tokens": 2}}
        else:
            payload = {"error": status}
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()

    def configure(plan):
        _StubHandler.plan = list(plan)
        _StubHandler.seen = []
        return f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"

    yield configure
    server.shutdown()
    server.server_close()


def _request(text="hello", tag="t-stage"):
    return user_request("system prompt", [text_part(text)], tag=tag)


def test_http_retries_rate_limit_then_succeeds(stub_server, caplog):
    url = stub_server([429, 429, 200])
    backend = HttpChatBackend(BackendConfig(url, "stub-model", max_retries=3, backoff_ms=1))
    with caplog.at_level(logging.WARNING, logger="lcagent.backend"):
        response = backend.complete(_request())
    assert response.text == "stub reply"
    assert response.retries == 2
    assert (response.prompt_tokens, response.output_tokens) == (7, 2)
    assert len(_StubHandler.seen) == 3
    assert sum("retry" in r.getMessage() for r in caplog.records) == 2


def test_http_gives_up_after_max_retries(stub_server):
    url = stub_server([429])
    backend = HttpChatBackend(BackendConfig(url, "stub-model", max_retries=1, backoff_ms=1))
    with pytest.raises(RateLimited):
        backend.complete(_request())
    assert len(_StubHandler.seen) == 2


def test_http_auth_failure_is_not_retried(stub_server, monkeypatch):
    url = stub_server([401])
    monkeypatch.setenv("STUB_KEY", "secret")
    backend = HttpChatBackend(BackendConfig(url, "stub-model", api_key_env_var="STUB_KEY", max_retries=3, backoff_ms=1))
    with pytest.raises(AuthError):
        backend.complete(_request())
    assert len(_StubHandler.seen) == 1
    assert _StubHandler.seen[0]["auth"] == "Bearer secret"


def test_http_missing_key_env_var(monkeypatch):
    monkeypatch.delenv("NOT_SET_ANYWHERE", raising=False)
    backend = HttpChatBackend(BackendConfig("http://127.0.0.1:9/x", "m", api_key_env_var="NOT_SET_ANYWHERE"))
    with pytest.raises(AuthError):
        backend.complete(_request())


def test_http_body_carries_images_and_system(stub_server):
    url = stub_server([200])
    backend = HttpChatBackend(BackendConfig(url, "stub-model", backoff_ms=1))
    req = user_request("sys", [text_part("look"), image_part("https://example.org/a.png")], tag="extract")
    backend.complete(req)
    body = _StubHandler.seen[0]["body"]
    assert body["model"] == "stub-model"
    assert body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    content = body["messages"][1]["content"]
    assert content[1] == {"type": "image_url", "image_url": {"url": "https://example.org/a.png"}}


def test_config_validation():
    with pytest.raises(ValueError):
        BackendConfig("u", "m", timeout_ms=0)
    with pytest.raises(ValueError):
        BackendConfig("u", "m", max_retries=-1)


def test_empty_messages_rejected_before_dispatch():
    backend = ScriptedBackend([ScriptRule("*", "*", "x", repeat=True)])
    with pytest.raises(InvalidRequest):
        backend.complete(ModelRequest("sys", ()))
    assert backend.transcript == []


@pytest.mark.parametrize(
    "request_obj",
    [
        ModelRequest("s", (Message("assistant", (text_part("a"),)),)),
        ModelRequest("s", (Message("user", (text_part("a"),)),), temperature=1.5),
        ModelRequest("s", (Message("user", (text_part("a"),)),), max_output_tokens=0),
    ],
)
def test_invalid_requests(request_obj):
    with pytest.raises(InvalidRequest):
        request_obj.validate()


def test_message_part_invariants():
    with pytest.raises(InvalidRequest):
        image_part("")
    with pytest.raises(InvalidRequest):
        from lcagent.backend import MessagePart

        MessagePart("audio", text="x")


def test_scripted_replay_by_tag():
    backend = ScriptedBackend([ScriptRule("t-stage", "*", "canned T"), ScriptRule("n-stage", "*", "canned N")])
    assert backend.complete(_request(tag="n-stage")).text == "canned N"
    assert backend.complete(_request(tag="t-stage")).text == "canned T"
    with pytest.raises(ScriptExhausted):
        backend.complete(_request(tag="m-stage"))
    assert [ex.error for ex in backend.transcript] == [None, None, "ScriptExhausted"]


def test_scripted_rules_consumed_in_order():
    backend = ScriptedBackend([ScriptRule("n-stage", "*", "first"), ScriptRule("n-stage", "*", "second")])
    assert backend.complete(_request(tag="n-stage")).text == "first"
    assert backend.complete(_request(tag="n-stage")).text == "second"
    with pytest.raises(ScriptExhausted):
        backend.complete(_request(tag="n-stage"))


def test_scripted_match_pattern_and_repeat():
    backend = ScriptedBackend([ScriptRule("expert", r"Case ID: a\b", "A", repeat=True), ScriptRule("expert", "*", "other")])
    assert backend.complete(_request("Case ID: a", tag="expert")).text == "A"
    assert backend.complete(_request("Case ID: a", tag="expert")).text == "A"
    assert backend.complete(_request("Case ID: ab", tag="expert")).text == "other"


def test_scripted_needs_rules():
    with pytest.raises(ValueError):
        ScriptedBackend([])


def test_replay_determinism_and_request_not_mutated():
    def run():
        backend = ScriptedBackend([ScriptRule("*", "*", "r1"), ScriptRule("*", "*", "r2")])
        reqs = [_request("one"), _request("two", tag="m-stage")]
        snapshot = [repr(r) for r in reqs]
        for r in reqs:
            backend.complete(r)
        assert [repr(r) for r in reqs] == snapshot
        return [ex.to_dict() for ex in backend.transcript]

    assert run() == run()


def test_scripted_backend_is_thread_safe():
    backend = ScriptedBackend([ScriptRule("*", "*", "x", repeat=True)])
    threads = [threading.Thread(target=lambda: [backend.complete(_request()) for _ in range(50)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(backend.transcript) == 400


def test_recording_backend_keeps_errors(tmp_path):
    inner = ScriptedBackend([ScriptRule("a", "*", "ok")])
    rec = RecordingBackend(inner)
    rec.complete(_request(tag="a"))
    with pytest.raises(ScriptExhausted):
        rec.complete(_request(tag="b"))
    assert rec.exchanges[0].response.text == "ok"
    assert rec.exchanges[1].error.startswith("ScriptExhausted")
    path = tmp_path / "t.jsonl"
    dump_transcript(rec.exchanges, path)
    lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == 2 and lines[0]["request"]["tag"] == "a"


def test_load_backend_kinds(tmp_path):
    script = tmp_path / "s.json"
    script.write_text(json.dumps({"name": "s", "rules": [{"tag": "x", "response": "y"}]}), encoding="utf-8")
    cfg = tmp_path / "b.yaml"
    cfg.write_text("kind: scripted\nscript: s.json\nname: replay\n", encoding="utf-8")
    backend = load_backend(cfg)
    assert backend.name == "replay"
    assert backend.complete(_request(tag="x")).text == "y"
    assert load_backend({"kind": "offline-judge"}).name == "offline-judge"
    http = load_backend({"endpoint_url": "http://h/v1", "model_name": "m", "max_retries": 5})
    assert isinstance(http, HttpChatBackend) and http.config.max_retries == 5
    with pytest.raises(ValueError):
        load_backend({"kind": "carrier-pigeon"})
