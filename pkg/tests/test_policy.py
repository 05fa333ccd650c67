from __future__ import annotations

import json
import threading
import time

import pytest
import requests

from icx.core import MediaRef
from icx.errors import TransportError
from icx.policy import (
    ChatRequest,
    ChatResponse,
    HttpPolicy,
    HttpPolicyConfig,
    ImagePart,
    MalformedPolicy,
    OraclePolicy,
    TextPart,
    parse_response_payload,
    request_payload,
)


@pytest.fixture()
def image_ref(tmp_path) -> MediaRef:
    p = tmp_path / "probe.img"
    p.write_bytes(b"probe pixels")
    return MediaRef("image", str(p))


def two_part_request(image_ref) -> ChatRequest:
    return ChatRequest(parts=[TextPart("describe the gasket"), ImagePart(image_ref)])


class FakeResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("not json")
        return self._payload


class FakeSession:
    """Scripted transport double; pops one canned response per post."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.posts = []

    def post(self, url, data=None, headers=None, timeout=None):
        self.posts.append({"url": url, "data": data, "headers": headers, "timeout": timeout})
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def ok_payload(text: str = "fine", tokens: int = 11) -> dict:
    return {"choices": [{"message": {"content": text}}], "usage": {"total_tokens": tokens}}


class TestParts:
    def test_request_text_joins_text_parts_only(self, image_ref):
        request = ChatRequest(parts=[TextPart("a"), ImagePart(image_ref), TextPart("b")])
        assert request.text() == "a\nb"
        assert request.images() == [image_ref]

    def test_image_part_b64_reads_from_media(self, image_ref):
        import base64

        assert ImagePart(image_ref).b64() == base64.b64encode(b"probe pixels").decode("ascii")

    def test_request_payload_wire_shape(self, image_ref):
        import base64

        payload = request_payload("oracle-1", two_part_request(image_ref))
        assert payload == {
            "model": "oracle-1",
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": "describe the gasket"},
                        {"type": "image_b64", "data": base64.b64encode(b"probe pixels").decode("ascii")},
                    ],
                }
            ],
        }

    def test_parse_response_payload(self):
        response = parse_response_payload(ok_payload("done", 7))
        assert response.text == "done"
        assert response.total_tokens == 7

    def test_parse_response_payload_defaults_tokens(self):
        response = parse_response_payload({"choices": [{"message": {"content": "x"}}]})
        assert response.total_tokens == 0

    def test_parse_response_payload_malformed(self):
        with pytest.raises(TransportError, match="malformed endpoint response"):
            parse_response_payload({"choices": []})


class TestOraclePolicy:
    def test_rules_drive_response(self):
        policy = OraclePolicy(lambda req: f"echo: {req.text()}")
        out = policy.complete(ChatRequest(parts=[TextPart("ping")]))
        assert out.text == "echo: ping"

    def test_same_request_twice_is_byte_identical(self):
        policy = OraclePolicy(lambda req: f"echo: {req.text()}")
        request = ChatRequest(parts=[TextPart("ping")])
        first = policy.complete(request)
        second = policy.complete(request)
        assert first.text.encode() == second.text.encode()
        assert first.total_tokens == second.total_tokens

    def test_token_estimate_is_length_quarter(self):
        policy = OraclePolicy(lambda req: "y" * 10)
        out = policy.complete(ChatRequest(parts=[TextPart("x" * 30)]))
        assert out.total_tokens == (30 + 10) // 4


class TestHttpPolicy:
    def config(self, **kw) -> HttpPolicyConfig:
        base = {"base_url": "http://endpoint.test/v1", "backoff_base_s": 0.0, "max_retries": 2}
        base.update(kw)
        return HttpPolicyConfig(**base)

    def test_posts_wire_payload_and_parses(self, image_ref):
        session = FakeSession(FakeResponse(200, ok_payload("answer", 5)))
        policy = HttpPolicy(self.config(model="m-1"), session=session)
        out = policy.complete(two_part_request(image_ref))
        assert out == ChatResponse(text="answer", total_tokens=5)

        post = session.posts[0]
        assert post["url"] == "http://endpoint.test/v1"
        assert post["headers"]["Content-Type"] == "application/json"
        assert json.loads(post["data"]) == request_payload("m-1", two_part_request(image_ref))

    def test_retryable_500_thrice_exhausts_retries(self, image_ref):
        session = FakeSession(*[FakeResponse(500) for _ in range(3)])
        policy = HttpPolicy(self.config(max_retries=2), session=session)
        with pytest.raises(TransportError, match="after 3 attempts: HTTP 500"):
            policy.complete(two_part_request(image_ref))
        assert len(session.posts) == 3

    def test_retryable_then_success(self, image_ref):
        session = FakeSession(FakeResponse(503), FakeResponse(200, ok_payload()))
        policy = HttpPolicy(self.config(), session=session)
        assert policy.complete(two_part_request(image_ref)).text == "fine"
        assert len(session.posts) == 2

    def test_connection_error_is_retried(self, image_ref):
        session = FakeSession(requests.ConnectionError("refused"), FakeResponse(200, ok_payload()))
        policy = HttpPolicy(self.config(), session=session)
        assert policy.complete(two_part_request(image_ref)).text == "fine"

    def test_non_retryable_status_fails_fast(self, image_ref):
        session = FakeSession(FakeResponse(404, text="missing"))
        policy = HttpPolicy(self.config(), session=session)
        with pytest.raises(TransportError, match="HTTP 404"):
            policy.complete(two_part_request(image_ref))
        assert len(session.posts) == 1

    def test_non_json_body_fails(self, image_ref):
        session = FakeSession(FakeResponse(200, payload=None, text="<html>"))
        policy = HttpPolicy(self.config(), session=session)
        with pytest.raises(TransportError, match="non-JSON"):
            policy.complete(two_part_request(image_ref))

    def test_auth_header_from_env(self, image_ref, monkeypatch):
        monkeypatch.setenv("ICX_TEST_TOKEN", "sekrit")
        session = FakeSession(FakeResponse(200, ok_payload()))
        policy = HttpPolicy(self.config(auth_env_var="ICX_TEST_TOKEN"), session=session)
        policy.complete(two_part_request(image_ref))
        assert session.posts[0]["headers"]["Authorization"] == "Bearer sekrit"

    def test_no_auth_header_when_env_unset(self, image_ref, monkeypatch):
        monkeypatch.delenv("ICX_TEST_TOKEN", raising=False)
        session = FakeSession(FakeResponse(200, ok_payload()))
        policy = HttpPolicy(self.config(auth_env_var="ICX_TEST_TOKEN"), session=session)
        policy.complete(two_part_request(image_ref))
        assert "Authorization" not in session.posts[0]["headers"]

    def test_concurrency_bound_never_exceeded(self, image_ref):
        lock = threading.Lock()
        active = {"now": 0, "peak": 0}

        class GaugeSession:
            def post(self, url, data=None, headers=None, timeout=None):
                with lock:
                    active["now"] += 1
                    active["peak"] = max(active["peak"], active["now"])
                time.sleep(0.01)
                with lock:
                    active["now"] -= 1
                return FakeResponse(200, ok_payload())

        policy = HttpPolicy(self.config(max_concurrency=2), session=GaugeSession())
        threads = [
            threading.Thread(target=policy.complete, args=(two_part_request(image_ref),))
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert active["peak"] <= 2


class TestMalformedPolicy:
    def inner(self) -> OraclePolicy:
        return OraclePolicy(lambda req: "Toolchain: start -> end.")

    def test_rate_one_always_garbles(self):
        policy = MalformedPolicy(self.inner(), rate=1.0, seed=3)
        out = policy.complete(ChatRequest(parts=[TextPart("plan please")]))
        assert out.text == "I am not sure which tools apply here, sorry"

    def test_rate_zero_passes_through(self):
        policy = MalformedPolicy(self.inner(), rate=0.0, seed=3)
        out = policy.complete(ChatRequest(parts=[TextPart("plan please")]))
        assert out.text == "Toolchain: start -> end."

    def test_marker_gates_garbling(self):
        policy = MalformedPolicy(self.inner(), rate=1.0, seed=3, marker="MAGIC")
        clean = policy.complete(ChatRequest(parts=[TextPart("plan please")]))
        assert clean.text == "Toolchain: start -> end."
        hit = policy.complete(ChatRequest(parts=[TextPart("MAGIC plan please")]))
        assert hit.text != "Toolchain: start -> end."

    def test_seeded_garble_pattern_is_reproducible(self):
        request = ChatRequest(parts=[TextPart("plan")])

        def pattern(seed: int) -> list[bool]:
            policy = MalformedPolicy(self.inner(), rate=0.05, seed=seed)
            return [policy.complete(request).text.startswith("I am not sure") for _ in range(200)]

        assert pattern(9) == pattern(9)
        assert pattern(9) != pattern(10)

    def test_one_percent_rate_is_roughly_one_percent(self):
        policy = MalformedPolicy(self.inner(), rate=0.01, seed=0)
        request = ChatRequest(parts=[TextPart("plan")])
        garbled = sum(
            policy.complete(request).text.startswith("I am not sure") for _ in range(1000)
        )
        assert 2 <= garbled <= 25
