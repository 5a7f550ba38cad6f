"""Chat-completion client abstraction.

Every LLM/VLM call in the engine goes through one request/response shape so
any compliant HTTP endpoint works and tests can drive the full contract suite
with canned-response mocks. Message content is either a plain string or a
list of parts ({"type": "text", ...} / {"type": "image_ref", "hash": ...}).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import requests

from ..core import InputError


class ClientError(RuntimeError):
    """Transport-level failure after exhausting retries."""


@dataclass(frozen=True)
class LlmClientSpec:
    endpoint: str
    model_name: str = "default"
    max_retries: int = 2
    timeout: float = 30.0
    prompt_template_id: str = ""

    def __post_init__(self):
        if self.max_retries < 0:
            raise InputError("max_retries must be >= 0")
        if self.prompt_template_id:
            from .prompts import TEMPLATES  # local import avoids a cycle at module load

            if self.prompt_template_id not in TEMPLATES:
                raise InputError(f"unknown prompt template {self.prompt_template_id!r}")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str | tuple[dict, ...]

    def as_obj(self) -> dict[str, Any]:
        content = list(self.content) if isinstance(self.content, tuple) else self.content
        return {"role": self.role, "content": content}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    template_id: str = ""
    metadata: dict = field(default_factory=dict)

    def as_obj(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [m.as_obj() for m in self.messages],
            "temperature": self.temperature,
            "template_id": self.template_id,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str


def extract_json(text: str) -> dict | None:
    """Best-effort structured payload from a model reply: direct parse, then
    the outermost {...} block. Returns None when nothing parses."""
    text = (text or "").strip()
    if not text:
        return None
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except json.JSONDecodeError:
        pass
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        try:
            obj = json.loads(text[start : end + 1])
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            return None
    return None


class HttpChatClient:
    """POSTs the request object to the endpoint; accepts either a bare
    {"content": ...} reply or an OpenAI-style choices list."""

    def __init__(self, spec: LlmClientSpec, backoff: float = 0.5):
        self.spec = spec
        self.backoff = backoff

    def complete(self, request: ChatRequest) -> ChatResponse:
        last_error: Exception | None = None
        for attempt in range(self.spec.max_retries + 1):
            try:
                r = requests.post(self.spec.endpoint, json=request.as_obj(), timeout=self.spec.timeout)
                if r.status_code >= 500 or r.status_code == 429:
                    raise ClientError(f"endpoint returned {r.status_code}")
                r.raise_for_status()
                payload = r.json()
                if "content" in payload:
                    return ChatResponse(content=str(payload["content"]))
                choices = payload.get("choices")
                if choices:
                    return ChatResponse(content=str(choices[0]["message"]["content"]))
                raise ClientError(f"unrecognized response shape: {sorted(payload)}")
            except (requests.RequestException, ClientError, KeyError, ValueError) as e:
                last_error = e
                if attempt < self.spec.max_retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise ClientError(f"endpoint {self.spec.endpoint} failed after {self.spec.max_retries + 1} attempts: {last_error}")


class MockChatClient:
    """Scripted client for tests and offline runs. ``handler`` maps a request
    to the raw response text; calls are recorded thread-safely."""

    def __init__(self, handler: Callable[[ChatRequest], str]):
        self.handler = handler
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.calls)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
        return ChatResponse(content=self.handler(request))


def make_client(spec: LlmClientSpec):
    """"mock:" endpoints resolve to the built-in deterministic engine mock so
    the whole pipeline runs on a laptop without a live model."""
    if spec.endpoint.startswith("mock:"):
        from .mock import MockEngineClient

        return MockEngineClient()
    return HttpChatClient(spec)


def user_text(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True)


def payload_of(request: ChatRequest) -> dict:
    """The structured payload a stage sent: the last user message's JSON."""
    for msg in reversed(request.messages):
        if msg.role != "user":
            continue
        content = msg.content
        if isinstance(content, tuple):
            texts = [p.get("text", "") for p in content if p.get("type") == "text"]
            content = "\n".join(texts)
        obj = extract_json(content)
        if obj is not None:
            return obj
    return {}
