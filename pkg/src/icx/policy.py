"""Model access: one protocol, swappable transports.

Callers build a ChatRequest and get a ChatResponse; whether that goes over
HTTP or into a deterministic oracle rule set is wired once at startup and
never inspected again downstream.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from .core import MediaRef
from .errors import TransportError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media: MediaRef

    def b64(self) -> str:
        return base64.b64encode(self.media.read_bytes()).decode("ascii")


Part = TextPart | ImagePart


@dataclass
class ChatRequest:
    parts: list[Part]
    role: str = "user"

    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def images(self) -> list[MediaRef]:
        return [p.media for p in self.parts if isinstance(p, ImagePart)]


@dataclass
class ChatResponse:
    text: str
    total_tokens: int = 0


class ModelPolicy(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def request_payload(model: str, request: ChatRequest) -> dict:
    content: list[dict] = []
    for part in request.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            content.append({"type": "image_b64", "data": part.b64()})
    return {"model": model, "messages": [{"role": request.role, "content": content}]}


def parse_response_payload(payload: dict) -> ChatResponse:
    try:
        text = payload["choices"][0]["message"]["content"]
        tokens = int(payload.get("usage", {}).get("total_tokens", 0))
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed endpoint response: {exc}") from exc
    return ChatResponse(text=text, total_tokens=tokens)


@dataclass
class HttpPolicyConfig:
    base_url: str
    model: str = "default"
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    max_concurrency: int = 4
    auth_env_var: str | None = None


_RETRYABLE = {429, 500, 502, 503, 504}


class HttpPolicy:
    """POSTs chat requests to an endpoint, with bounded retry and concurrency."""

    def __init__(self, config: HttpPolicyConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._semaphore = threading.BoundedSemaphore(max(1, config.max_concurrency))

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env_var:
            token = os.environ.get(self.config.auth_env_var, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = request_payload(self.config.model, request)
        last_error = "no attempt made"
        with self._semaphore:
            for attempt in range(self.config.max_retries + 1):
                if attempt:
                    delay = self.config.backoff_base_s * (2 ** (attempt - 1))
                    time.sleep(delay)
                try:
                    resp = self._session.post(
                        self.config.base_url,
                        data=json.dumps(payload),
                        headers=self._headers(),
                        timeout=self.config.timeout_s,
                    )
                except requests.RequestException as exc:
                    last_error = f"request failed: {exc}"
                    logger.warning("policy endpoint attempt %d failed: %s", attempt, exc)
                    continue
                if resp.status_code in _RETRYABLE:
                    last_error = f"HTTP {resp.status_code}"
                    logger.warning("policy endpoint returned %d, retrying", resp.status_code)
                    continue
                if resp.status_code != 200:
                    raise TransportError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise TransportError(f"endpoint returned non-JSON body: {exc}") from exc
                return parse_response_payload(body)
        raise TransportError(
            f"endpoint {self.config.base_url} failed after "
            f"{self.config.max_retries + 1} attempts: {last_error}"
        )


class OraclePolicy:
    """Deterministic in-process stand-in for a hosted model.

    All behavior comes from the injected rule set, a callable from the full
    request to response text.  Token accounting is a crude length estimate.
    """

    def __init__(self, rules: Callable[[ChatRequest], str]):
        self._rules = rules

    def complete(self, request: ChatRequest) -> ChatResponse:
        text = self._rules(request)
        tokens = (len(request.text()) + len(text)) // 4
        return ChatResponse(text=text, total_tokens=tokens)


@dataclass
class MalformedPolicy:
    """Wrapper that garbles a fraction of responses; used to exercise
    re-prompting and task-success accounting."""

    inner: ModelPolicy
    rate: float
    seed: int = 0
    marker: str | None = None  # only garble requests whose text contains this
    garbled: str = "I am not sure which tools apply here, sorry"
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def complete(self, request: ChatRequest) -> ChatResponse:
        applies = self.marker is None or self.marker in request.text()
        if applies and self._rng.random() < self.rate:
            return ChatResponse(text=self.garbled, total_tokens=8)
        return self.inner.complete(request)
