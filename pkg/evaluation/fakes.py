"""Deterministic backends and fixture helpers shared by the test scripts."""
import hashlib
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

sys.path.insert(0, str(Path(__file__).parent.parent))

from hazguard.config import DetectorConfig, InferenceConfig, RunConfig
from hazguard.detection import Detection
from hazguard.detector_backend import FilesDetector
from hazguard.orchestrator import run_pipeline
from vlm.client import RawResponse, RecordingBackend, VLMClient
from vlm.embeddings import TokenEmbeddings, tokenize

FIXTURES = Path(__file__).parent / "fixtures"
MANIFEST = FIXTURES / "manifest.jsonl"
DETECTIONS = FIXTURES / "detections"
IMAGES = FIXTURES / "images"
LABELS = FIXTURES / "labels"
RESPONSES = FIXTURES / "responses.yaml"

GUIDED_MARKER = "Detected entities"


def image_index() -> dict:
    """sha256 of each fixture image -> its manifest reference."""
    return {
        hashlib.sha256(path.read_bytes()).hexdigest(): f"images/{path.name}"
        for path in sorted(IMAGES.glob("*.png"))
    }


class ScriptedBackend:
    """Answers with the scripted response for (prompt mode, image)."""

    backend_id = "scripted"

    def __init__(self, responses_path: Path = RESPONSES, latency: float = 0.0):
        with open(responses_path, "r", encoding="utf-8") as f:
            self.responses = yaml.safe_load(f)
        self.images = image_index()
        self.latency = latency
        self.calls = 0

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        self.calls += 1
        mode = "detection_guided" if GUIDED_MARKER in prompt_text else "baseline"
        image_ref = self.images[hashlib.sha256(image).hexdigest()]
        return RawResponse(
            text=self.responses[mode][image_ref],
            latency=self.latency,
            token_usage={"prompt_tokens": len(prompt_text.split()), "completion_tokens": 0},
            backend_id=self.backend_id,
        )


class FixedBackend:
    """Returns the same text for every request, as fast as possible."""

    backend_id = "fixed"

    def __init__(self, text: str = "Hazards: none"):
        self.text = text
        self.prompts = []

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        self.prompts.append(prompt_text)
        return RawResponse(text=self.text, latency=0.0, backend_id=self.backend_id)


class FailingBackend:
    """Fails for selected images, answers for the rest."""

    backend_id = "failing"

    def __init__(self, fail_refs: set, error: Exception, text: str = "Hazards: none"):
        self.fail_refs = fail_refs
        self.error = error
        self.text = text
        self.images = image_index()

    def complete(self, image: bytes, prompt_text: str, cfg: InferenceConfig) -> RawResponse:
        if self.images[hashlib.sha256(image).hexdigest()] in self.fail_refs:
            raise self.error
        return RawResponse(text=self.text, latency=0.0, backend_id=self.backend_id)


class HashedVectorProvider:
    """Deterministic pseudo-embeddings: one seeded random unit vector per token.

    Identical tokens get identical vectors, so lexical overlap drives the score.
    """

    def __init__(self, dimension: int = 64):
        self.dimension = dimension
        self.provider_id = f"hashed-{dimension}"

    def vector(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "big")
        vector = np.random.default_rng(seed).standard_normal(self.dimension)
        return vector / np.linalg.norm(vector)

    def embed(self, text: str) -> TokenEmbeddings:
        tokens = tokenize(text)
        return TokenEmbeddings.from_lists(tokens, [self.vector(token) for token in tokens])


class SlowFilesDetector(FilesDetector):
    """Files backend with a fixed extra delay per call."""

    backend_id = "slow_files"

    def __init__(self, cfg: DetectorConfig, delay: float = 0.02):
        super().__init__(cfg)
        self.delay = delay

    def _run(self, image: bytes, image_ref: str) -> list[Detection]:
        time.sleep(self.delay)
        return super()._run(image, image_ref)


def files_detector_config(**overrides) -> DetectorConfig:
    return DetectorConfig(backend="files", files_dir=DETECTIONS, **overrides)


def run_config(mode: str, output_dir: Path, **overrides) -> RunConfig:
    values = {
        "mode": mode,
        "manifest_path": MANIFEST,
        "output_dir": output_dir,
        "detector": files_detector_config(),
    }
    values.update(overrides)
    return RunConfig(**values)


def record_transcripts(transcripts_dir: Path, cfg: Optional[InferenceConfig] = None) -> Path:
    """Build a replay store for both prompt modes from the scripted responses."""
    client = VLMClient(RecordingBackend(ScriptedBackend(latency=0.25), transcripts_dir))
    for mode in ("baseline", "detection_guided"):
        overrides = {"vlm": cfg} if cfg else {}
        run_pipeline(run_config(mode, transcripts_dir / "_reports", **overrides), client=client, persist=False)
    return transcripts_dir
