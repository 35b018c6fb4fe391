"""Line-oriented JSON manifests of hazard-annotated images."""
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from hazguard.config import HAZARD_KEYS, MANIFEST_VERSION
from hazguard.errors import ManifestError
from hazguard.schemas import validate_output

logger = logging.getLogger(__name__)

Source = Literal["historical_inspection", "public_dataset"]
Validation = Literal["draft", "validated", "revised", "rejected"]
Verdict = Literal["validated", "revised", "rejected"]

EVALUATION_STATES = {"validated", "revised"}

T = TypeVar("T")


class HazardRecord(BaseModel):
    """One annotated image: hazards, reference rationales and review state."""

    model_config = ConfigDict(frozen=True)

    image_ref: str = Field(min_length=1)
    hazards: tuple[str, ...] = ()
    rationales: dict[str, str] = Field(default_factory=dict)
    source: Source = "public_dataset"
    validation: Validation = "draft"
    history: tuple[dict, ...] = ()
    warnings: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_invariants(self) -> "HazardRecord":
        outside = [key for key in self.hazards if key not in HAZARD_KEYS]
        if outside:
            raise ValueError(f"hazard {outside[0]!r} not in category vocabulary")
        if len(set(self.hazards)) != len(self.hazards):
            raise ValueError("duplicate hazard keys")
        extra = sorted(set(self.rationales) - set(self.hazards))
        if extra:
            raise ValueError(f"rationale for {extra[0]!r} which is not a listed hazard")
        if self.validation in EVALUATION_STATES:
            missing = [key for key in self.hazards if not self.rationales.get(key, "").strip()]
            if missing:
                raise ValueError(f"{self.validation} record lacks a rationale for {missing[0]!r}")
        return self

    @classmethod
    def from_json(cls, data: dict) -> "HazardRecord":
        hazards = set(data["hazards"])
        ordered = [key for key in HAZARD_KEYS if key in hazards] + sorted(hazards - set(HAZARD_KEYS))
        return cls(
            image_ref=data["image"],
            hazards=tuple(ordered),
            rationales=dict(data["rationales"]),
            source=data["source"],
            validation=data["validation"],
            history=tuple(data.get("history", [])),
            warnings=tuple(data.get("warnings", [])),
        )

    def to_json(self) -> dict:
        data: dict[str, Any] = {
            "image": self.image_ref,
            "hazards": list(self.hazards),
            "rationales": {key: self.rationales[key] for key in HAZARD_KEYS if key in self.rationales},
            "source": self.source,
            "validation": self.validation,
        }
        if self.history:
            data["history"] = list(self.history)
        if self.warnings:
            data["warnings"] = list(self.warnings)
        return data


class Manifest(BaseModel):
    records: list[HazardRecord] = Field(default_factory=list)
    version: str = MANIFEST_VERSION
    category_vocabulary: tuple[str, ...] = tuple(HAZARD_KEYS)

    def get(self, image_ref: str) -> HazardRecord:
        for record in self.records:
            if record.image_ref == image_ref:
                return record
        raise KeyError(f"Record not found in manifest: {image_ref}")

    def upsert(self, record: HazardRecord) -> None:
        for index, existing in enumerate(self.records):
            if existing.image_ref == record.image_ref:
                self.records[index] = record
                return
        self.records.append(record)


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    train_frac: float = Field(default=0.7, ge=0)
    val_frac: float = Field(default=0.2, ge=0)
    test_frac: float = Field(default=0.1, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _sums_to_one(self) -> "SplitSpec":
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self


def _first_error(error: ValidationError) -> str:
    return "; ".join(item["msg"].removeprefix("Value error, ") for item in error.errors())


def load_manifest(path: Path, mode: Literal["all", "evaluation"] = "all") -> Manifest:
    """Load and validate a manifest.

    Evaluation mode drops draft and rejected records.

    Raises:
        ManifestError: missing file, schema or invariant violations, or
            duplicate image references, itemized per record line.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(str(path), [f"file not found: {path}"])

    diagnostics: list[str] = []
    records: list[HazardRecord] = []
    seen: dict[str, int] = {}
    version = MANIFEST_VERSION
    vocabulary = tuple(HAZARD_KEYS)

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                diagnostics.append(f"line {line_no}: invalid JSON ({e.msg})")
                continue

            if isinstance(data, dict) and "manifest_version" in data:
                is_valid, error = validate_output(data, "manifest_header")
                if not is_valid:
                    diagnostics.append(f"line {line_no}: {error}")
                    continue
                version = data["manifest_version"]
                vocabulary = tuple(data.get("category_vocabulary", HAZARD_KEYS))
                unknown = sorted(set(vocabulary) - set(HAZARD_KEYS))
                if unknown:
                    diagnostics.append(f"line {line_no}: vocabulary contains unknown keys {unknown}")
                continue

            is_valid, error = validate_output(data, "manifest_record")
            if not is_valid:
                diagnostics.append(f"line {line_no}: {error}")
                continue

            image_ref = data["image"]
            outside = [key for key in data["hazards"] if key not in vocabulary]
            if outside:
                diagnostics.append(f"line {line_no} ({image_ref}): hazard {outside[0]!r} not in category vocabulary")
                continue
            try:
                record = HazardRecord.from_json(data)
            except ValidationError as e:
                diagnostics.append(f"line {line_no} ({image_ref}): {_first_error(e)}")
                continue

            if image_ref in seen:
                diagnostics.append(f"line {line_no} ({image_ref}): duplicate image reference (first on line {seen[image_ref]})")
                continue
            seen[image_ref] = line_no
            records.append(record)

    if diagnostics:
        for diagnostic in diagnostics:
            logger.error(f"{path}: {diagnostic}")
        raise ManifestError(str(path), diagnostics)

    if mode == "evaluation":
        kept = [record for record in records if record.validation in EVALUATION_STATES]
        skipped = len(records) - len(kept)
        if skipped:
            logger.info(f"Skipped {skipped} draft/rejected records from {path.name}")
        records = kept

    logger.info(f"Loaded {len(records)} records from {path}")
    return Manifest(records=records, version=version, category_vocabulary=vocabulary)


def dump_manifest(manifest: Manifest) -> str:
    """Canonical text form: header line, then one record per line."""
    header = {"manifest_version": manifest.version, "category_vocabulary": list(manifest.category_vocabulary)}
    lines = [json.dumps(header, ensure_ascii=False)]
    lines.extend(json.dumps(record.to_json(), ensure_ascii=False) for record in manifest.records)
    return "\n".join(lines) + "\n"


def save_manifest(manifest: Manifest, path: Path) -> None:
    """Write the manifest atomically (single writer per file)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(dump_manifest(manifest))
    os.replace(tmp_path, path)
    logger.info(f"Saved {len(manifest.records)} records to {path}")


def split_dataset(items: Sequence[T], spec: SplitSpec) -> tuple[list[T], list[T], list[T]]:
    """Seeded shuffle, then contiguous train/val/test slices."""
    n = len(items)
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [items[i] for i in order]
    n_train = min(n, int(round(spec.train_frac * n)))
    n_val = min(n - n_train, int(round(spec.val_frac * n)))
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def record_validation_verdict(
    record: HazardRecord,
    verdict: Verdict,
    annotator_id: str,
    edited: Optional[dict] = None,
    timestamp: Optional[str] = None,
) -> HazardRecord:
    """Apply an annotator's verdict, keeping the previous state in history.

    `edited` may carry corrected "hazards" and/or "rationales"; it is
    required for a revised verdict.
    """
    if verdict not in ("validated", "revised", "rejected"):
        raise ValueError(f"Unknown verdict: {verdict}")
    if verdict == "revised" and not edited:
        raise ValueError("A revised verdict requires edited fields")
    if edited and verdict != "revised":
        raise ValueError(f"Edited fields are only accepted with a revised verdict, got {verdict}")
    unknown_fields = set(edited or {}) - {"hazards", "rationales"}
    if unknown_fields:
        raise ValueError(f"Cannot edit fields {sorted(unknown_fields)}")

    entry = {
        "verdict": verdict,
        "annotator": annotator_id,
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(),
        "previous": {
            "hazards": list(record.hazards),
            "rationales": dict(record.rationales),
            "validation": record.validation,
        },
    }
    hazards = set((edited or {}).get("hazards", record.hazards))
    rationales = dict((edited or {}).get("rationales", record.rationales))
    if "hazards" in (edited or {}) and "rationales" not in edited:
        rationales = {key: text for key, text in rationales.items() if key in hazards}

    try:
        return HazardRecord(
            image_ref=record.image_ref,
            hazards=tuple(key for key in HAZARD_KEYS if key in hazards) + tuple(sorted(hazards - set(HAZARD_KEYS))),
            rationales=rationales,
            source=record.source,
            validation=verdict,
            history=record.history + (entry,),
            warnings=record.warnings,
        )
    except ValidationError as e:
        raise ValueError(f"Verdict {verdict} on {record.image_ref} leaves an invalid record: {_first_error(e)}") from e
