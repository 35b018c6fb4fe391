"""Configuration for the hazard assessment pipeline."""
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

load_dotenv()

# Inference endpoint configuration
ENDPOINT = os.environ.get("HAZGUARD_ENDPOINT", "http://localhost:8000/v1")
MODEL_NAME = os.environ.get("HAZGUARD_MODEL", "gemma-3-4b-it")
API_KEY_ENV = "HAZGUARD_API_KEY"

# Token embeddings endpoint for BERTScore
EMBEDDINGS_ENDPOINT = os.environ.get("HAZGUARD_EMBEDDINGS_ENDPOINT", "")
EMBEDDINGS_MODEL = os.environ.get("HAZGUARD_EMBEDDINGS_MODEL", "roberta-large")

# Log level
LOG_LEVEL = os.environ.get("HAZGUARD_LOG_LEVEL", "INFO")

TEMPLATES_DIR = Path(__file__).parent / "templates"
TEMPLATE_VERSION = "v1"
CATEGORIES_FILE = TEMPLATES_DIR / "categories.yaml"
SYNONYMS_FILE = TEMPLATES_DIR / "synonyms.txt"
CLASSES_FILE = TEMPLATES_DIR / "classes.txt"

# Hazard taxonomy, in canonical key order
HAZARD_KEYS = [
    "ppe_non_compliance",
    "fall_hazard",
    "caught_between_hazard",
    "unsafe_environment",
]

# Object classes and their identifier prefixes
CLASS_PREFIXES = {
    "Worker": "w",
    "Cement Truck": "ct",
    "Compactor": "cp",
    "Dozer": "dz",
    "Dump Truck": "dt",
    "Excavator": "ex",
    "Grader": "gr",
    "Mobile Crane": "mc",
    "Tower Crane": "tc",
    "Wheel Loader": "wl",
    "Backhoe Loader": "bl",
}

# Detection settings
DEFAULT_SCORE_THRESHOLD = 0.25
DEFAULT_INPUT_SIZE = 640
LETTERBOX_FILL = 114

# Detection metric thresholds
MAP_THRESHOLDS = [0.3, 0.4, 0.5, 0.6, 0.7]
COCO_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]
RECALL_LEVELS = [i / 10 for i in range(11)]
PR_REPORT_THRESHOLD = 0.5

# Decoding profiles
EVALUATION_PROFILE = {"temperature": 0.1, "max_tokens": 256}
ANNOTATION_PROFILE = {"temperature": 0.1, "max_tokens": 180}
DEFAULT_TIMEOUT = 120.0
DEFAULT_MAX_RETRIES = 3

# Benchmarking
BENCH_WARMUP = 2
STAGES = ["load", "detect", "encode", "vlm", "parse", "score"]

REPORT_VERSION = "1.0"
MANIFEST_VERSION = "1.0"

# CLI mode names -> prompt modes
MODE_ALIASES = {
    "baseline": "baseline",
    "guided": "detection_guided",
    "detection_guided": "detection_guided",
}


class InferenceConfig(BaseModel):
    """Decoding and transport settings for the multimodal endpoint."""

    model_config = ConfigDict(frozen=True)

    endpoint: str = ENDPOINT
    model_name: str = MODEL_NAME
    temperature: float = Field(default=EVALUATION_PROFILE["temperature"], ge=0)
    max_tokens: int = Field(default=EVALUATION_PROFILE["max_tokens"], ge=1)
    timeout: float = Field(default=DEFAULT_TIMEOUT, gt=0)
    max_retries: int = Field(default=DEFAULT_MAX_RETRIES, ge=0, le=10)
    auth_env: str = API_KEY_ENV
    profile: Literal["evaluation", "annotation"] = "evaluation"

    @classmethod
    def annotation(cls, **overrides: Any) -> "InferenceConfig":
        """Config carrying the fixed annotation-draft decoding parameters."""
        values = {**ANNOTATION_PROFILE, "profile": "annotation", **overrides}
        return cls(**values)

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.auth_env) or None


class DetectorConfig(BaseModel):
    """Detector backend selection."""

    model_config = ConfigDict(frozen=True)

    backend: Literal["embedded_model", "files", "http"]
    model_path: Optional[Path] = None
    files_dir: Optional[Path] = None
    endpoint: Optional[str] = None
    input_size: int = Field(default=DEFAULT_INPUT_SIZE, gt=0)
    score_threshold: float = Field(default=DEFAULT_SCORE_THRESHOLD, ge=0, le=1)
    class_list: list[str] = Field(default_factory=lambda: list(CLASS_PREFIXES))
    sessions: int = Field(default=1, ge=1)
    # how the embedded network lays out its output head
    output_layout: Literal["auto", "channels_first", "rows", "end_to_end"] = "auto"
    timeout: float = Field(default=30.0, gt=0)

    @model_validator(mode="after")
    def _one_source(self) -> "DetectorConfig":
        sources = {
            "embedded_model": self.model_path,
            "files": self.files_dir,
            "http": self.endpoint,
        }
        set_sources = [name for name, value in sources.items() if value]
        if set_sources != [self.backend]:
            raise ValueError(
                f"Detector backend '{self.backend}' needs exactly its own source set, got {set_sources or 'none'}"
            )
        return self


class RunConfig(BaseModel):
    """Everything one pipeline run needs."""

    model_config = ConfigDict(frozen=True)

    mode: Literal["baseline", "detection_guided"]
    manifest_path: Path
    output_dir: Path
    vlm: InferenceConfig = Field(default_factory=InferenceConfig)
    detector: Optional[DetectorConfig] = None
    backend: Literal["live", "replay", "record"] = "live"
    transcripts_dir: Optional[Path] = None
    images_dir: Optional[Path] = None
    template_path: Optional[Path] = None
    categories_path: Path = CATEGORIES_FILE
    synonyms_path: Path = SYNONYMS_FILE
    strict_parse: bool = False
    parallelism: int = Field(default=1, ge=1)
    score_rationales: bool = False
    embeddings_cache: Optional[Path] = None
    embeddings_endpoint: Optional[str] = None
    idf: bool = False
    time_detector_in_baseline: bool = False
    save_detections_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _check_sources(self) -> "RunConfig":
        if self.mode == "detection_guided" and self.detector is None:
            raise ValueError("detection_guided runs require a detector source")
        if self.backend in ("replay", "record") and self.transcripts_dir is None:
            raise ValueError(f"backend '{self.backend}' requires a transcripts directory")
        return self

    def resolved_images_dir(self) -> Path:
        return self.images_dir or self.manifest_path.parent


def load_config_file(path: Optional[str]) -> dict:
    """Load an optional YAML config file whose keys mirror CLI flags."""
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a mapping")
    # Allow both --flag-name and flag_name spellings
    return {str(key).replace("-", "_"): value for key, value in data.items()}
