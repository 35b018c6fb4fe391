"""Parse model output into structured hazard assessments.

Expected grammar (markup such as <p> or <ul> wrappers is tolerated):

    Hazards: ppe_non_compliance, fall_hazard
    Explanation:
    -ppe_non_compliance: The worker standing on the edge is not wearing a hard hat.
    -fall_hazard: The worker is standing on the edge without fall protection.
"""
import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import HAZARD_KEYS, SYNONYMS_FILE

logger = logging.getLogger(__name__)

NEGATIVE_LABELS = {
    "none",
    "no",
    "nil",
    "n/a",
    "na",
    "no_hazard",
    "no_hazards",
    "no_hazards_detected",
    "no_hazards_found",
    "no_hazards_identified",
    "no_hazard_detected",
}

_TAG_BREAK_RE = re.compile(r"</?(?:p|ul|ol|li|br|div)\b[^>]*>", re.IGNORECASE)
_TAG_RE = re.compile(r"<[^>]{0,200}>")
_HEADER_LINE_RE = re.compile(r"^[ \t]*(?:detected[ \t]+)?hazards?[ \t]*:", re.IGNORECASE | re.MULTILINE)
_HEADER_MARKED_RE = re.compile(
    r"^[ \t]*(?:[#>*•\-]+|\d+[.)])[ \t]*(?:detected[ \t]+)?hazards?[ \t]*:", re.IGNORECASE | re.MULTILINE
)
_EXPLANATION_RE = re.compile(r"^[ \t]*(?:explanations?|rationales?)[ \t]*:", re.IGNORECASE | re.MULTILINE)
_EXPLANATION_INLINE_RE = re.compile(r"(?<![\w-])explanations?[ \t]*:", re.IGNORECASE)
_BULLET_RE = re.compile(r"(?:^|(?<=\s))[-*•][ \t]*([A-Za-z][A-Za-z0-9 _/\-]{0,48}?)[ \t]*:(?=\s|$)")
_LABEL_SPLIT_RE = re.compile(r",|;|\band\b|\|")
_TRAILING_PUNCT = ".,;:!?"


class HazardAssessment(BaseModel):
    """Hazard categories, per-category rationales and parse warnings."""

    model_config = ConfigDict(frozen=True)

    categories: tuple[str, ...] = ()
    rationales: dict[str, str] = Field(default_factory=dict)
    parse_warnings: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_invariants(self) -> "HazardAssessment":
        unknown = [key for key in self.categories if key not in HAZARD_KEYS]
        if unknown:
            raise ValueError(f"Unknown hazard categories: {unknown}")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("Duplicate hazard categories")
        extra = set(self.rationales) - set(self.categories)
        if extra:
            raise ValueError(f"Rationales for categories not in the assessment: {sorted(extra)}")
        return self

    @classmethod
    def build(
        cls,
        categories: Iterable[str],
        rationales: Optional[Mapping[str, str]] = None,
        warnings: Iterable[str] = (),
    ) -> "HazardAssessment":
        """Create an assessment with categories and rationales in canonical order."""
        keys = set(categories)
        rationales = rationales or {}
        return cls(
            categories=tuple(key for key in HAZARD_KEYS if key in keys),
            rationales={key: rationales[key] for key in HAZARD_KEYS if key in rationales},
            parse_warnings=tuple(warnings),
        )


def _normalize_label(s: str) -> str:
    text = s.strip().lower()
    text = text.strip("*_`\"' \t")
    text = text.rstrip(_TRAILING_PUNCT).strip()
    text = re.sub(r"[\s\-]+", "_", text)
    return re.sub(r"_+", "_", text).strip("_")


@lru_cache(maxsize=8)
def load_synonyms(path: Optional[str] = None) -> dict[str, str]:
    """Read `surface => canonical_key` pairs, one per line."""
    synonyms = {}
    with open(path or SYNONYMS_FILE, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=>" not in line:
                logger.warning(f"Ignoring malformed synonym line {line_no}: {line!r}")
                continue
            surface, key = (part.strip() for part in line.split("=>", 1))
            if key not in HAZARD_KEYS:
                logger.warning(f"Synonym line {line_no} maps to unknown key {key!r}")
                continue
            synonyms[_normalize_label(surface)] = key
    return synonyms


def canonicalize_label(
    s: str,
    synonyms: Optional[Mapping[str, str]] = None,
    strict: bool = False,
) -> Optional[str]:
    """Map a surface label to a canonical hazard key, or None when unmapped.

    Strict mode only accepts labels that normalize to a canonical key.
    """
    label = _normalize_label(s)
    if label in HAZARD_KEYS:
        return label
    if strict:
        return None
    table = load_synonyms() if synonyms is None else synonyms
    return table.get(label)


def _strip_markup(raw: str) -> str:
    text = _TAG_BREAK_RE.sub("\n", raw)
    text = _TAG_RE.sub(" ", text)
    text = text.replace("**", "").replace("&nbsp;", " ")
    return text


def _find_header(text: str) -> Optional[re.Match]:
    return _HEADER_LINE_RE.search(text) or _HEADER_MARKED_RE.search(text)


def parse_assessment(
    raw: str,
    synonyms: Optional[Mapping[str, str]] = None,
    strict: bool = False,
) -> HazardAssessment:
    """Parse raw model text into a HazardAssessment. Never raises on content.

    A response without a recognizable "Hazards:" header yields an empty
    assessment with a `missing_header` warning. In lenient mode, rationale
    bullets for labels missing from the header add the label with a
    `rationale_only_label` warning; strict mode drops them.
    """
    text = _strip_markup(raw if isinstance(raw, str) else str(raw))
    warnings: list[str] = []

    header = _find_header(text)
    if header is None:
        return HazardAssessment(parse_warnings=("missing_header",))

    after_header = text[header.end():]
    line_end = after_header.find("\n")
    header_value = after_header if line_end < 0 else after_header[:line_end]
    inline_explanation = _EXPLANATION_INLINE_RE.search(header_value)
    if inline_explanation:
        header_value = header_value[: inline_explanation.start()]

    categories: list[str] = []
    for piece in _LABEL_SPLIT_RE.split(header_value):
        label = _normalize_label(piece)
        if not label or label in NEGATIVE_LABELS:
            continue
        key = canonicalize_label(piece, synonyms, strict)
        if key is None:
            warnings.append(f"unknown_label:{label}")
        elif key not in categories:
            categories.append(key)

    explanation = _EXPLANATION_RE.search(text, header.end())
    if explanation is None:
        explanation = _EXPLANATION_INLINE_RE.search(text, header.end())
    body_start = explanation.end() if explanation else header.end() + (len(after_header) if line_end < 0 else line_end)
    rationales = _parse_bullets(text[body_start:], categories, warnings, synonyms, strict)

    return HazardAssessment.build(categories, rationales, warnings)


def _parse_bullets(
    body: str,
    categories: list[str],
    warnings: list[str],
    synonyms: Optional[Mapping[str, str]],
    strict: bool,
) -> dict[str, str]:
    """Split `-label: rationale` bullets; bullets may share a line."""
    starts = []
    for match in _BULLET_RE.finditer(body):
        label = match.group(1)
        key = canonicalize_label(label, synonyms, strict)
        line_start = body.rfind("\n", 0, match.start()) + 1
        at_line_start = body[line_start:match.start()].strip() == ""
        if key is None and not at_line_start:
            # A hyphen inside a sentence, not a bullet
            continue
        starts.append((match.start(), match.end(), key, _normalize_label(label)))

    rationales: dict[str, str] = {}
    for index, (_, end, key, label) in enumerate(starts):
        stop = starts[index + 1][0] if index + 1 < len(starts) else len(body)
        rationale = " ".join(body[end:stop].split())
        if key is None:
            warnings.append(f"unknown_rationale_label:{label}")
            continue
        if not rationale:
            continue
        if key not in categories:
            if strict:
                warnings.append(f"dropped_rationale_label:{key}")
                continue
            warnings.append(f"rationale_only_label:{key}")
            categories.append(key)
        rationales[key] = f"{rationales[key]} {rationale}" if key in rationales else rationale
    return rationales


def render_assessment(assessment: HazardAssessment) -> str:
    """Render an assessment back into the output grammar."""
    if not assessment.categories:
        return "Hazards: none"
    lines = [f"Hazards: {', '.join(assessment.categories)}", "Explanation:"]
    for key in assessment.categories:
        if key in assessment.rationales:
            lines.append(f"-{key}: {assessment.rationales[key]}")
    return "\n".join(lines)


def extract_entity_mentions(rationale: str, known_ids: Iterable[str]) -> set[str]:
    """Known identifiers that appear as standalone tokens in the rationale."""
    mentioned = set()
    for identifier in known_ids:
        pattern = rf"(?<![A-Za-z0-9_]){re.escape(identifier)}(?![A-Za-z0-9_])"
        if re.search(pattern, rationale, re.IGNORECASE):
            mentioned.add(identifier)
    return mentioned
