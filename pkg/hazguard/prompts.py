"""Prompt templates and detection-to-prompt encoding."""
import hashlib
import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .config import CATEGORIES_FILE, HAZARD_KEYS, TEMPLATE_VERSION, TEMPLATES_DIR
from .detection import CLASS_ORDER, IdentifiedDetection, ObjectClass
from .errors import ConfigurationError
from .schemas import validate_output

logger = logging.getLogger(__name__)

PromptMode = Literal["baseline", "detection_guided"]

NO_ENTITIES_SENTENCE = "No workers or machinery detected."

PLACEHOLDERS = ("ENTITIES", "CATEGORIES", "OUTPUT_FORMAT")
_PLACEHOLDER_RE = re.compile(r"\{(ENTITIES|CATEGORIES|OUTPUT_FORMAT)\}")

# Output grammar shared with the response parser
OUTPUT_FORMAT_INSTRUCTIONS = """Respond using exactly this format and nothing else:
Hazards: <comma-separated hazard category keys, or none>
Explanation:
-<hazard category key>: <one or two sentences describing what in the image creates the hazard>

Write one explanation line for every hazard listed. If no hazard is present, answer "Hazards: none"."""


class HazardCategory(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: str
    definition: str = Field(min_length=1)

    @field_validator("key")
    @classmethod
    def _canonical_key(cls, value: str) -> str:
        if value not in HAZARD_KEYS:
            raise ValueError(f"Unknown hazard category key: {value!r}")
        return value


class PromptTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: str
    body: str
    name: str = ""

    def count(self, placeholder: str) -> int:
        return self.body.count("{" + placeholder + "}")

    def check_mode(self, mode: PromptMode) -> None:
        """Raise ConfigurationError when the placeholders do not fit the mode."""
        for placeholder in ("CATEGORIES", "OUTPUT_FORMAT"):
            if self.count(placeholder) != 1:
                raise ConfigurationError(
                    f"Template {self.name or self.version} must contain {{{placeholder}}} exactly once"
                )
        entities = self.count("ENTITIES")
        if mode == "detection_guided" and entities != 1:
            raise ConfigurationError(
                f"Detection-guided template {self.name or self.version} must contain {{ENTITIES}} exactly once"
            )
        if mode == "baseline" and entities != 0:
            raise ConfigurationError(
                f"Baseline template {self.name or self.version} must not contain {{ENTITIES}}"
            )


class PromptBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: PromptMode
    text: str
    template_version: str
    entity_count: int = Field(ge=0)
    identifiers: tuple[str, ...] = ()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def load_template(path: Path) -> PromptTemplate:
    """Load a template file; `guided.v1.txt` has version `v1`."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        body = f.read()
    parts = path.name.split(".")
    version = parts[-2] if len(parts) >= 3 else TEMPLATE_VERSION
    return PromptTemplate(version=version, body=body, name=path.name)


def default_template_path(kind: str, version: str = TEMPLATE_VERSION) -> Path:
    """Bundled template for 'baseline', 'detection_guided'/'guided' or 'annotation'."""
    stem = "guided" if kind in ("detection_guided", "guided") else kind
    return TEMPLATES_DIR / f"{stem}.{version}.txt"


def paired_template_path(path: Path, mode: str) -> Optional[Path]:
    """The `mode` sibling of a baseline/guided template file (same directory and version), if present."""
    path = Path(path)
    parts = path.name.split(".")
    if len(parts) < 3 or parts[0] not in ("baseline", "guided"):
        return None
    stem = "guided" if mode in ("detection_guided", "guided") else mode
    sibling = path.with_name(".".join([stem] + parts[1:]))
    return sibling if sibling.exists() else None


@lru_cache(maxsize=8)
def _read_categories(path: str) -> tuple[tuple[str, str], ...]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    is_valid, error = validate_output(data, "category_file")
    if not is_valid:
        raise ConfigurationError(f"Invalid category definitions in {path}: {error}")
    return tuple((key, " ".join(str(data[key]).split())) for key in HAZARD_KEYS)


def load_categories(path: Optional[Path] = None) -> list[HazardCategory]:
    """Load the four hazard category definitions in canonical key order."""
    pairs = _read_categories(str(path or CATEGORIES_FILE))
    return [HazardCategory(key=key, definition=definition) for key, definition in pairs]


def encode_detections(ids: Sequence[IdentifiedDetection]) -> str:
    """Render identified detections as `Worker w1: center=0.558,0.518, w2: ...`.

    Groups follow the class taxonomy order and are separated by '; '.
    """
    if not ids:
        return NO_ENTITIES_SENTENCE

    groups: dict[ObjectClass, list[IdentifiedDetection]] = {}
    for item in ids:
        groups.setdefault(item.detection.cls, []).append(item)

    clauses = []
    for cls in sorted(groups, key=CLASS_ORDER.__getitem__):
        members = sorted(groups[cls], key=lambda item: _id_index(item.id))
        entities = ", ".join(
            f"{item.id}: center={item.detection.box.cx:.3f},{item.detection.box.cy:.3f}"
            for item in members
        )
        clauses.append(f"{cls.value} {entities}")
    return "; ".join(clauses)


def _id_index(identifier: str) -> int:
    digits = re.search(r"(\d+)$", identifier)
    return int(digits.group(1)) if digits else 0


def encode_categories(categories: Sequence[HazardCategory]) -> str:
    keys = [category.key for category in categories]
    if sorted(keys) != sorted(HAZARD_KEYS) or len(set(keys)) != len(keys):
        raise ConfigurationError(f"Expected the four hazard categories {HAZARD_KEYS}, got {keys}")
    ordered = sorted(categories, key=lambda category: HAZARD_KEYS.index(category.key))
    return "\n".join(f"- {category.key}: {category.definition}" for category in ordered)


def build_prompt(
    mode: PromptMode,
    ids: Sequence[IdentifiedDetection],
    categories: Sequence[HazardCategory],
    template: PromptTemplate,
) -> PromptBundle:
    """Render a template for the baseline or detection-guided configuration.

    Baseline prompts ignore the detections entirely.

    Raises:
        ConfigurationError: template placeholders do not match the mode.
    """
    template.check_mode(mode)
    guided = mode == "detection_guided"
    values = {
        "ENTITIES": encode_detections(ids) if guided else "",
        "CATEGORIES": encode_categories(categories),
        "OUTPUT_FORMAT": OUTPUT_FORMAT_INSTRUCTIONS,
    }
    text = _PLACEHOLDER_RE.sub(lambda match: values[match.group(1)], template.body)
    return PromptBundle(
        mode=mode,
        text=text,
        template_version=template.version,
        entity_count=len(ids) if guided else 0,
        identifiers=tuple(item.id for item in ids) if guided else (),
    )
