"""Test the inference client against a mocked endpoint and transcript store."""
import json
import sys
import tempfile
import time
from pathlib import Path

import httpx

sys.path.insert(0, str(Path(__file__).parent.parent))

from hazguard.config import InferenceConfig
from hazguard.errors import ConfigurationError, EndpointError, ReplayMissError
from hazguard.prompts import PromptBundle
from vlm.client import (
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    VLMClient,
    build_request,
    create_client,
    request_digest,
)

from fakes import FixedBackend
from harness import collect_tests, run_suite

IMAGE = b"\x89PNG fake image bytes"
CFG = InferenceConfig(endpoint="http://vlm.test/v1", model_name="test-model", max_retries=2)


def prompt(text: str = "Identify hazards.") -> PromptBundle:
    return PromptBundle(mode="baseline", text=text, template_version="v1", entity_count=0)


def completion(text: str) -> dict:
    return {
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 5},
    }


def live_client(handler) -> VLMClient:
    transport = httpx.MockTransport(handler)
    return VLMClient(LiveBackend(httpx.Client(transport=transport), backoff_factor=0))


def test_request_digest_pinned():
    assert request_digest(b"", "", "") == "63cab8e921e413242a44bf4e8fdc999d3834c0883aed7afd6199c1ffa98c1948"
    assert request_digest(b"abc", "hello", "m") == "6240b02877666995f7b3f4a728a4b9b1a6c438cda6d294075595da616169ec22"
    # length prefixes keep the field boundary unambiguous
    assert request_digest(b"ab", "chello", "m") != request_digest(b"abc", "hello", "m")
    assert request_digest(IMAGE, "p", "model-a") != request_digest(IMAGE, "p", "model-b")


def test_request_payload():
    payload = build_request(IMAGE, "Identify hazards.", CFG)
    assert payload["model"] == "test-model"
    assert payload["temperature"] == 0.1 and payload["max_tokens"] == 256
    content = payload["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "Identify hazards."}
    assert content[1]["type"] == "image" and content[1]["data"]


def test_live_success():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json=completion("Hazards: none"))

    response = live_client(handler).complete(IMAGE, prompt(), CFG)
    assert response.text == "Hazards: none"
    assert response.backend_id == "live"
    assert response.latency >= 0
    assert response.token_usage == {"prompt_tokens": 12, "completion_tokens": 5}
    assert str(seen[0].url) == "http://vlm.test/v1/chat/completions"
    assert json.loads(seen[0].content)["model"] == "test-model"


def test_live_retries_transient_statuses():
    statuses = iter([503, 429])

    def handler(request: httpx.Request) -> httpx.Response:
        status = next(statuses, 200)
        if status != 200:
            return httpx.Response(status, text="busy")
        return httpx.Response(200, json=completion("Hazards: fall_hazard"))

    response = live_client(handler).complete(IMAGE, prompt(), CFG)
    assert response.text == "Hazards: fall_hazard"


def test_live_latency_spans_retries():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        if len(calls) == 1:
            time.sleep(0.05)
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json=completion("Hazards: none"))

    started = time.perf_counter()
    response = live_client(handler).complete(IMAGE, prompt(), CFG)
    elapsed = time.perf_counter() - started
    assert len(calls) == 2
    assert 0.05 <= response.latency <= elapsed


def test_live_gives_up_after_retries():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(502)

    try:
        live_client(handler).complete(IMAGE, prompt(), CFG)
    except EndpointError:
        pass
    else:
        raise AssertionError("persistent 502 should fail")
    assert len(calls) == CFG.max_retries + 1


def test_live_client_errors_are_not_retried():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(400, text="bad request")

    try:
        live_client(handler).complete(IMAGE, prompt(), CFG)
    except EndpointError as e:
        assert "400" in str(e)
    else:
        raise AssertionError("400 should fail")
    assert len(calls) == 1


def test_live_transport_errors_and_bad_payloads():
    def refuse(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("connection refused", request=request)

    try:
        live_client(refuse).complete(IMAGE, prompt(), CFG)
    except EndpointError:
        pass
    else:
        raise AssertionError("connection errors should surface as EndpointError")

    def malformed(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json={"unexpected": True})

    try:
        live_client(malformed).complete(IMAGE, prompt(), CFG)
    except EndpointError:
        pass
    else:
        raise AssertionError("a payload without choices should fail")


def test_empty_image_rejected():
    try:
        VLMClient(FixedBackend()).complete(b"", prompt(), CFG)
    except ValueError:
        pass
    else:
        raise AssertionError("empty image should fail")


def test_record_then_replay():
    with tempfile.TemporaryDirectory() as tmp:
        recorder = VLMClient(RecordingBackend(FixedBackend("Hazards: fall_hazard"), Path(tmp)))
        recorded = recorder.complete(IMAGE, prompt(), CFG)
        digest = request_digest(IMAGE, prompt().text, CFG.model_name)
        transcript = json.loads((Path(tmp) / f"{digest}.json").read_text(encoding="utf-8"))
        assert transcript["response"] == "Hazards: fall_hazard"
        assert transcript["model"] == "test-model"

        replay = create_client("replay", Path(tmp))
        replayed = replay.complete(IMAGE, prompt(), CFG)
        assert replayed.text == recorded.text
        assert replayed.backend_id == "replay"

        try:
            replay.complete(IMAGE, prompt("A different prompt."), CFG)
        except ReplayMissError:
            pass
        else:
            raise AssertionError("unrecorded prompt should miss")

        other_model = CFG.model_copy(update={"model_name": "other-model"})
        try:
            replay.complete(IMAGE, prompt(), other_model)
        except ReplayMissError:
            pass
        else:
            raise AssertionError("a different model should miss")


def test_corrupt_transcript_is_a_miss():
    with tempfile.TemporaryDirectory() as tmp:
        digest = request_digest(IMAGE, prompt().text, CFG.model_name)
        (Path(tmp) / f"{digest}.json").write_text(json.dumps({"digest": digest}), encoding="utf-8")
        try:
            ReplayBackend(Path(tmp)).complete(IMAGE, prompt().text, CFG)
        except ReplayMissError:
            pass
        else:
            raise AssertionError("transcript without a response should miss")


def test_client_factory_errors():
    for args in (("replay", None), ("record", None), ("carrier-pigeon", None), ("replay", Path("/nonexistent/transcripts"))):
        try:
            create_client(*args)
        except ConfigurationError:
            continue
        raise AssertionError(f"create_client{args} should fail")


if __name__ == "__main__":
    sys.exit(run_suite("VLM CLIENT TESTS", collect_tests(globals())))
