"""Multimodal inference client with live, replay and recording backends."""
import base64
import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Optional, Protocol

import backoff
import httpx
from pydantic import BaseModel, ConfigDict, Field

from hazguard.config import InferenceConfig
from hazguard.errors import ConfigurationError, EndpointError, ReplayMissError, RetryableEndpointError
from hazguard.prompts import PromptBundle
from hazguard.schemas import validate_output

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 425, 429, 500, 502, 503, 504}


class RawResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    latency: float = Field(ge=0)
    token_usage: Optional[dict] = None
    backend_id: str


class CompletionBackend(Protocol):
    backend_id: str

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        ...


def request_digest(image: bytes, prompt_text: str, model_name: str) -> str:
    """SHA-256 over length-prefixed image, prompt and model name."""
    digest = hashlib.sha256()
    for part in (image, prompt_text.encode("utf-8"), model_name.encode("utf-8")):
        digest.update(f"{len(part)}:".encode("ascii"))
        digest.update(part)
    return digest.hexdigest()


def build_request(image: bytes, prompt_text: str, cfg: InferenceConfig) -> dict:
    """Chat-style completion payload with the image as base64 content."""
    return {
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt_text},
                    {"type": "image", "data": base64.b64encode(image).decode("ascii")},
                ],
            }
        ],
    }


def _message_text(data: dict) -> str:
    content = data["choices"][0]["message"]["content"]
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return content or ""


class LiveBackend:
    """HTTP backend for a chat-completions style endpoint."""

    backend_id = "live"

    def __init__(self, client: Optional[httpx.Client] = None, backoff_factor: float = 1.0):
        self.client = client or httpx.Client()
        self.backoff_factor = backoff_factor

    def _headers(self, cfg: InferenceConfig) -> dict:
        headers = {"Content-Type": "application/json", "Accept": "application/json"}
        api_key = cfg.api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post_once(self, url: str, payload: dict, cfg: InferenceConfig) -> dict:
        try:
            response = self.client.post(url, json=payload, headers=self._headers(cfg), timeout=cfg.timeout)
        except httpx.TimeoutException as e:
            raise RetryableEndpointError(f"Timeout after {cfg.timeout}s calling {url}") from e
        except httpx.TransportError as e:
            raise RetryableEndpointError(f"Transport error calling {url}: {e}") from e

        if response.status_code in RETRYABLE_STATUS:
            raise RetryableEndpointError(f"{url} returned {response.status_code}")
        if not response.is_success:
            raise EndpointError(f"{url} returned {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise EndpointError(f"{url} returned non-JSON body") from e

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        url = f"{cfg.endpoint.rstrip('/')}/chat/completions"
        payload = build_request(image, prompt_text, cfg)
        send = backoff.on_exception(
            backoff.expo,
            RetryableEndpointError,
            max_tries=cfg.max_retries + 1,
            factor=self.backoff_factor,
            logger=logger,
        )(self._post_once)
        # latency spans every attempt and the backoff sleeps between them
        start = time.perf_counter()
        try:
            data = send(url, payload, cfg)
        except RetryableEndpointError as e:
            raise EndpointError(f"Giving up after {cfg.max_retries} retries: {e}") from e
        latency = time.perf_counter() - start
        try:
            text = _message_text(data)
        except (KeyError, IndexError, TypeError) as e:
            raise EndpointError(f"Unexpected completion payload from {url}: {e}") from e
        return RawResponse(text=text, latency=latency, token_usage=data.get("usage"), backend_id=self.backend_id)


class ReplayBackend:
    """Serves stored transcripts keyed by request digest."""

    backend_id = "replay"

    def __init__(self, transcripts_dir: Path):
        self.transcripts_dir = Path(transcripts_dir)
        if not self.transcripts_dir.is_dir():
            raise ConfigurationError(f"Transcript directory not found: {self.transcripts_dir}")

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        digest = request_digest(image, prompt_text, cfg.model_name)
        path = self.transcripts_dir / f"{digest}.json"
        if not path.exists():
            raise ReplayMissError(f"No transcript for request {digest[:12]} in {self.transcripts_dir}")
        with open(path, "r", encoding="utf-8") as f:
            transcript = json.load(f)
        is_valid, error = validate_output(transcript, "transcript")
        if not is_valid:
            raise ReplayMissError(f"Corrupt transcript {path.name}: {error}")
        return RawResponse(
            text=transcript["response"],
            latency=transcript["latency"],
            token_usage=transcript.get("token_usage"),
            backend_id=self.backend_id,
        )


class RecordingBackend:
    """Passes requests to another backend and stores each transcript for replay."""

    def __init__(self, inner: CompletionBackend, transcripts_dir: Path):
        self.inner = inner
        self.transcripts_dir = Path(transcripts_dir)
        self.transcripts_dir.mkdir(parents=True, exist_ok=True)
        self.backend_id = f"record:{inner.backend_id}"

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        response = self.inner.complete(image, prompt_text, cfg)
        digest = request_digest(image, prompt_text, cfg.model_name)
        transcript = {
            "digest": digest,
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "image_sha256": hashlib.sha256(image).hexdigest(),
            "prompt": prompt_text,
            "response": response.text,
            "latency": response.latency,
            "token_usage": response.token_usage,
        }
        path = self.transcripts_dir / f"{digest}.json"
        tmp_path = path.with_suffix(".json.tmp")
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(transcript, f, indent=2, ensure_ascii=False)
        os.replace(tmp_path, path)
        logger.debug(f"Recorded transcript {digest[:12]}")
        return response


class VLMClient:
    """Submits image + prompt requests through a backend."""

    def __init__(self, backend: CompletionBackend):
        self.backend = backend
        logger.info(f"VLM client initialized with backend: {backend.backend_id}")

    def complete(self, image: bytes, prompt: PromptBundle, cfg: InferenceConfig) -> RawResponse:
        """Send one request; latency covers only the backend call."""
        if not image:
            raise ValueError("Image bytes are empty")
        return self.backend.complete(image, prompt.text, cfg)


def create_client(
    backend: str,
    transcripts_dir: Optional[Path] = None,
    live_client: Optional[httpx.Client] = None,
) -> VLMClient:
    """Factory for 'live', 'replay' or 'record' clients.

    'record' wraps the live backend and writes transcripts as it goes.
    """
    if backend == "live":
        return VLMClient(LiveBackend(live_client))
    if backend == "replay":
        if transcripts_dir is None:
            raise ConfigurationError("Replay backend needs a transcripts directory")
        return VLMClient(ReplayBackend(transcripts_dir))
    if backend == "record":
        if transcripts_dir is None:
            raise ConfigurationError("Record backend needs a transcripts directory")
        return VLMClient(RecordingBackend(LiveBackend(live_client), transcripts_dir))
    raise ConfigurationError(f"Unknown VLM backend: {backend}")
