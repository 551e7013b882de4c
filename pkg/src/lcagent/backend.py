"""Chat-completion backends: live HTTP, scripted replay, and per-case recording."""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import httpx

log = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class Timeout(BackendError):
    pass


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class RateLimited(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class InvalidRequest(ValueError):
    pass


@dataclass(frozen=True)
class MessagePart:
    kind: str  # "text" | "image"
    text: str | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if self.kind == "text" and self.text is None:
            raise InvalidRequest("text part without text")
        if self.kind == "image" and not self.image_ref:
            raise InvalidRequest("image part without image_ref")
        if self.kind not in ("text", "image"):
            raise InvalidRequest(f"unknown part kind {self.kind!r}")


def text_part(text: str) -> MessagePart:
    return MessagePart("text", text=text)


def image_part(ref: str) -> MessagePart:
    return MessagePart("image", image_ref=ref)


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[MessagePart, ...]


@dataclass(frozen=True)
class ModelRequest:
    system_prompt: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048
    tag: str = ""

    def validate(self) -> None:
        if not self.messages:
            raise InvalidRequest("request has no messages")
        if self.messages[-1].role != "user":
            raise InvalidRequest("last message must come from the user")
        for msg in self.messages:
            if msg.role not in ("user", "assistant"):
                raise InvalidRequest(f"bad role {msg.role!r}")
        if not 0.0 <= self.temperature <= 1.0:
            raise InvalidRequest("temperature must lie in [0, 1]")
        if self.max_output_tokens < 1:
            raise InvalidRequest("max_output_tokens must be positive")

    def flat_text(self) -> str:
        chunks = [self.system_prompt]
        for msg in self.messages:
            for part in msg.parts:
                chunks.append(part.text if part.kind == "text" else f"[image:{part.image_ref}]")
        return "\n".join(chunks)


def user_request(system_prompt: str, parts: Iterable[MessagePart], tag: str, **kw) -> ModelRequest:
    return ModelRequest(system_prompt, (Message("user", tuple(parts)),), tag=tag, **kw)


@dataclass(frozen=True)
class ModelResponse:
    text: str
    prompt_tokens: int = 0
    output_tokens: int = 0
    latency_ms: int = 0
    retries: int = 0


class Backend(ABC):
    name: str = "backend"

    @abstractmethod
    def _complete(self, request: ModelRequest) -> ModelResponse:
        ...

    def complete(self, request: ModelRequest) -> ModelResponse:
        request.validate()
        return self._complete(request)


def complete(backend: Backend, request: ModelRequest) -> ModelResponse:
    return backend.complete(request)


def request_to_dict(request: ModelRequest) -> dict:
    return {
        "tag": request.tag,
        "system_prompt": request.system_prompt,
        "temperature": request.temperature,
        "max_output_tokens": request.max_output_tokens,
        "messages": [
            {
                "role": m.role,
                "parts": [
                    {"kind": p.kind, "text": p.text} if p.kind == "text" else {"kind": p.kind, "image_ref": p.image_ref}
                    for p in m.parts
                ],
            }
            for m in request.messages
        ],
    }


@dataclass
class Exchange:
    request: ModelRequest
    response: ModelResponse | None
    error: str | None = None

    def to_dict(self) -> dict:
        out = {"request": request_to_dict(self.request)}
        if self.response is not None:
            out["response"] = {
                "text": self.response.text,
                "usage": [self.response.prompt_tokens, self.response.output_tokens],
                "latency_ms": self.response.latency_ms,
                "retries": self.response.retries,
            }
        if self.error is not None:
            out["error"] = self.error
        return out


def dump_transcript(exchanges: Iterable[Exchange], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in exchanges:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


# -- HTTP ---------------------------------------------------------------------


@dataclass
class BackendConfig:
    endpoint_url: str
    model_name: str
    api_key_env_var: str = ""
    timeout_ms: int = 60_000
    max_retries: int = 2
    backoff_ms: int = 500

    def __post_init__(self):
        if self.timeout_ms < 1:
            raise ValueError("timeout_ms must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


_RETRYABLE_STATUS = {429, 502, 503, 504}


def _image_url(ref: str) -> str:
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    mime = mimetypes.guess_type(ref)[0] or "image/png"
    data = base64.b64encode(Path(ref).read_bytes()).decode("ascii")
    return f"data:{mime};base64,{data}"


class HttpChatBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` client with bounded retries."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None):
        self.config = config
        self.name = config.model_name
        self._client = client or httpx.Client(timeout=config.timeout_ms / 1000)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if not key:
                raise AuthError(f"environment variable {self.config.api_key_env_var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, request: ModelRequest) -> dict:
        messages: list[dict[str, Any]] = [{"role": "system", "content": request.system_prompt}]
        for msg in request.messages:
            if all(p.kind == "text" for p in msg.parts):
                messages.append({"role": msg.role, "content": "\n".join(p.text for p in msg.parts)})
                continue
            content = []
            for p in msg.parts:
                if p.kind == "text":
                    content.append({"type": "text", "text": p.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": _image_url(p.image_ref)}})
            messages.append({"role": msg.role, "content": content})
        return {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

    def _complete(self, request: ModelRequest) -> ModelResponse:
        body = self._body(request)
        headers = self._headers()
        retries = 0
        started = time.monotonic()
        while True:
            failure: BackendError
            try:
                resp = self._client.post(self.config.endpoint_url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                failure = Timeout(str(exc))
            except httpx.TransportError as exc:
                failure = TransportError(str(exc))
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"HTTP {resp.status_code}")
                if resp.status_code == 429:
                    failure = RateLimited("HTTP 429")
                elif resp.status_code in _RETRYABLE_STATUS:
                    failure = TransportError(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return self._parse(resp, retries, started)
            if retries >= self.config.max_retries:
                raise failure
            delay = self.config.backoff_ms * (2**retries) / 1000
            retries += 1
            log.warning("%s: %s, retry %d/%d in %.3fs", request.tag, failure, retries, self.config.max_retries, delay)
            time.sleep(delay)

    @staticmethod
    def _parse(resp: httpx.Response, retries: int, started: float) -> ModelResponse:
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {exc}") from exc
        usage = payload.get("usage") or {}
        return ModelResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=int((time.monotonic() - started) * 1000),
            retries=retries,
        )


# -- scripted replay ----------------------------------------------------------


@dataclass
class ScriptRule:
    tag: str
    match: str = "*"
    response: str = ""
    repeat: bool = False
    _regex: re.Pattern | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.match != "*":
            self._regex = re.compile(self.match)

    def matches(self, request: ModelRequest) -> bool:
        if self.tag != "*" and self.tag != request.tag:
            return False
        return self._regex is None or self._regex.search(request.flat_text()) is not None


class ScriptedBackend(Backend):
    """Answers each request with the first unconsumed matching rule.

    Rules fire once unless ``repeat`` is set; every request is appended to
    ``transcript`` under a lock so concurrent callers are safe.
    """

    def __init__(self, rules: Iterable[ScriptRule | tuple], name: str = "scripted"):
        self.rules = [r if isinstance(r, ScriptRule) else ScriptRule(*r) for r in rules]
        if not self.rules:
            raise ValueError("script must contain at least one rule")
        self.name = name
        self._used = [False] * len(self.rules)
        self._lock = threading.Lock()
        self.transcript: list[Exchange] = []

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "ScriptedBackend":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [ScriptRule(r["tag"], r.get("match", "*"), r["response"], r.get("repeat", False)) for r in payload["rules"]]
        return cls(rules, name=name or payload.get("name", Path(path).stem))

    def _complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            for i, rule in enumerate(self.rules):
                if (rule.repeat or not self._used[i]) and rule.matches(request):
                    self._used[i] = True
                    response = ModelResponse(rule.response)
                    self.transcript.append(Exchange(request, response))
                    return response
            self.transcript.append(Exchange(request, None, "ScriptExhausted"))
        raise ScriptExhausted(f"no script rule left for tag {request.tag!r}")


class RecordingBackend(Backend):
    """Wraps a backend and keeps a private transcript (one per case)."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.name = inner.name
        self.exchanges: list[Exchange] = []

    def _complete(self, request: ModelRequest) -> ModelResponse:
        try:
            response = self.inner.complete(request)
        except BackendError as exc:
            self.exchanges.append(Exchange(request, None, f"{type(exc).__name__}: {exc}"))
            raise
        self.exchanges.append(Exchange(request, response))
        return response


def load_backend(source: str | Path | dict, base_dir: str | Path | None = None) -> Backend:
    """Build a backend from a config file path or an already-parsed mapping.

    ``kind`` selects ``http`` (default), ``scripted`` (``script`` names a rule
    file) or ``offline-judge``.
    """
    if not isinstance(source, dict):
        path = Path(source)
        base_dir = path.parent
        source = _read_config(path)
    base = Path(base_dir or ".")
    kind = source.get("kind", "http")
    name = source.get("name")
    if kind == "scripted":
        script = source["script"]
        if isinstance(script, dict):
            rules = [ScriptRule(r["tag"], r.get("match", "*"), r["response"], r.get("repeat", False)) for r in script["rules"]]
            return ScriptedBackend(rules, name=name or "scripted")
        return ScriptedBackend.from_file(base / script, name=name)
    if kind == "offline-judge":
        from .judge import OfflineJudge

        return OfflineJudge(name=name or "offline-judge")
    if kind == "http":
        cfg = BackendConfig(
            endpoint_url=source["endpoint_url"],
            model_name=source["model_name"],
            api_key_env_var=source.get("api_key_env_var", ""),
            timeout_ms=int(source.get("timeout_ms", 60_000)),
            max_retries=int(source.get("max_retries", 2)),
            backoff_ms=int(source.get("backoff_ms", 500)),
        )
        backend = HttpChatBackend(cfg)
        if name:
            backend.name = name
        return backend
    raise ValueError(f"unknown backend kind {kind!r}")


def _read_config(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text)
    return json.loads(text)
