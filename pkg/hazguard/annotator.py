"""Annotation drafts: ask the model for labels, store them for human review."""
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

from storage.manifest_store import HazardRecord, Manifest, Source, load_manifest, save_manifest
from vlm.client import VLMClient

from .config import ANNOTATION_PROFILE, InferenceConfig
from .errors import ConfigurationError
from .prompts import HazardCategory, PromptTemplate, build_prompt, default_template_path, load_categories, load_template
from .response_parser import parse_assessment

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


def check_annotation_profile(cfg: InferenceConfig) -> None:
    """Drafts are generated with fixed decoding parameters only."""
    expected_temperature = ANNOTATION_PROFILE["temperature"]
    expected_tokens = ANNOTATION_PROFILE["max_tokens"]
    if cfg.temperature != expected_temperature or cfg.max_tokens != expected_tokens:
        raise ConfigurationError(
            f"Annotation drafts require temperature={expected_temperature} and max_tokens={expected_tokens}, "
            f"got temperature={cfg.temperature} and max_tokens={cfg.max_tokens}"
        )


def generate_annotation_draft(
    image: bytes,
    image_ref: str,
    client: VLMClient,
    cfg: InferenceConfig,
    categories: Optional[Sequence[HazardCategory]] = None,
    template: Optional[PromptTemplate] = None,
    source: Source = "public_dataset",
) -> HazardRecord:
    """Create a draft record from the model's labels for one image.

    Args:
        image: Encoded image bytes
        image_ref: Path of the image relative to the manifest
        client: Inference client (live, replay or record)
        cfg: Decoding config; must carry the annotation profile
        categories: Hazard definitions (bundled ones by default)
        template: Annotation template (annotation.v1.txt by default)
        source: Provenance of the image

    Returns:
        HazardRecord with validation="draft" and any parse warnings
    """
    check_annotation_profile(cfg)
    categories = categories or load_categories()
    template = template or load_template(default_template_path("annotation"))

    prompt = build_prompt("baseline", [], categories, template)
    response = client.complete(image, prompt, cfg)
    assessment = parse_assessment(response.text)
    if assessment.parse_warnings:
        logger.warning(f"Draft for {image_ref} parsed with warnings: {list(assessment.parse_warnings)}")

    return HazardRecord(
        image_ref=image_ref,
        hazards=assessment.categories,
        rationales=dict(assessment.rationales),
        source=source,
        validation="draft",
        warnings=assessment.parse_warnings,
    )


def list_images(images_dir: Path) -> list[Path]:
    return sorted(path for path in Path(images_dir).iterdir() if path.suffix.lower() in IMAGE_SUFFIXES)


def annotate_images(
    images: Iterable[Path],
    images_root: Path,
    manifest_path: Path,
    client: VLMClient,
    cfg: InferenceConfig,
    source: Source = "public_dataset",
) -> dict:
    """Append drafts for images not yet in the manifest.

    The manifest is rewritten once at the end; callers must be its only
    writer. Images already present keep their existing record.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path) if manifest_path.exists() else Manifest()
    existing = {record.image_ref for record in manifest.records}
    categories = load_categories()
    template = load_template(default_template_path("annotation"))

    summary = {"drafted": 0, "skipped": 0, "errors": {}}
    for path in images:
        image_ref = Path(path).relative_to(images_root).as_posix()
        if image_ref in existing:
            summary["skipped"] += 1
            continue
        try:
            record = generate_annotation_draft(
                Path(path).read_bytes(), image_ref, client, cfg, categories, template, source
            )
        except ConfigurationError:
            raise
        except Exception as e:
            logger.error(f"Draft failed for {image_ref}: {e}", exc_info=True)
            summary["errors"][image_ref] = str(e)
            continue
        manifest.records.append(record)
        existing.add(image_ref)
        summary["drafted"] += 1

    save_manifest(manifest, manifest_path)
    logger.info(f"Drafted {summary['drafted']} records ({summary['skipped']} already present, {len(summary['errors'])} errors)")
    return summary
