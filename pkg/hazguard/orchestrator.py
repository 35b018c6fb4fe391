"""Pipeline runner - coordinates detection, prompting, inference, parsing and scoring."""
import copy
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from storage.manifest_store import HazardRecord, load_manifest
from storage.report_storage import ReportStorage
from vlm.client import VLMClient, create_client
from vlm.embeddings import EmbeddingProvider, create_embedder, tokenize

from .config import REPORT_VERSION, STAGES, RunConfig
from .detection import assign_identifiers, detections_to_json
from .detector_backend import Detector, create_detector
from .errors import ConfigurationError, EmbeddingError
from .hazard_metrics import (
    BertScore,
    LabelCounts,
    aggregate_bertscore,
    aggregate_category_bertscore,
    aggregate_hazard_metrics,
    compute_idf,
    concatenate_rationales,
    multilabel_counts,
    score_rationale_categories,
    score_rationales,
)
from .prompts import build_prompt, default_template_path, load_categories, load_template
from .response_parser import HazardAssessment, extract_entity_mentions, load_synonyms, parse_assessment
from .reporting import render_run_report
from .schemas import validate_output

logger = logging.getLogger(__name__)


def stage_stats(values: Sequence[float]) -> Dict:
    """Mean/p50/p95 in milliseconds."""
    if not values:
        return {"count": 0, "mean_ms": None, "p50_ms": None, "p95_ms": None}
    a = np.asarray(values, dtype=np.float64) * 1000
    return {
        "count": len(values),
        "mean_ms": float(a.mean()),
        "p50_ms": float(np.percentile(a, 50)),
        "p95_ms": float(np.percentile(a, 95)),
    }


def counts_to_json(counts: LabelCounts) -> Dict:
    return {
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn,
        "by_category": {key: list(value) for key, value in counts.by_category.items()},
    }


def counts_from_json(data: Dict) -> LabelCounts:
    return LabelCounts(
        tp=data["tp"],
        fp=data["fp"],
        fn=data["fn"],
        by_category={key: tuple(value) for key, value in data["by_category"].items()},
    )


class PipelineRunner:
    """Runs one configuration over every evaluation record of a manifest."""

    def __init__(
        self,
        cfg: RunConfig,
        client: Optional[VLMClient] = None,
        detector: Optional[Detector] = None,
        embedder: Optional[EmbeddingProvider] = None,
    ):
        """Initialize the runner. Configuration problems raise here, before any image is processed.

        Args:
            cfg: Run configuration
            client: Inference client (built from cfg.backend when omitted)
            detector: Detector backend (built from cfg.detector when omitted)
            embedder: Token embedding provider for rationale scoring
        """
        self.cfg = cfg
        self.guided = cfg.mode == "detection_guided"
        self.manifest = load_manifest(cfg.manifest_path, mode="evaluation")

        template_path = cfg.template_path or default_template_path(cfg.mode)
        self.template = load_template(template_path)
        self.template.check_mode(cfg.mode)
        self.categories = load_categories(cfg.categories_path)
        self.synonyms = load_synonyms(str(cfg.synonyms_path))

        self.client = client or create_client(cfg.backend, cfg.transcripts_dir)

        self.detector = None
        if self.guided or cfg.time_detector_in_baseline:
            if detector is None and cfg.detector is None:
                raise ConfigurationError("No detector configured")
            self.detector = detector or create_detector(cfg.detector)

        self.embedder = None
        self.idf = None
        if cfg.score_rationales:
            try:
                self.embedder = embedder or create_embedder(cfg.embeddings_cache, cfg.embeddings_endpoint)
            except (ValueError, EmbeddingError) as e:
                raise ConfigurationError(str(e)) from e
            if cfg.idf:
                references = [concatenate_rationales(r.rationales) for r in self.manifest.records]
                self.idf = compute_idf([tokenize(text) for text in references if text])

        self.images_dir = cfg.resolved_images_dir()
        self.run_id: Optional[str] = None
        self.report_path: Optional[Path] = None
        logger.info(
            f"Pipeline runner initialized: mode={cfg.mode}, template={self.template.name}, "
            f"{len(self.manifest.records)} evaluation records"
        )

    def process_image(self, record: HazardRecord) -> Dict:
        """Run every stage for one image; raises on failure."""
        timings: Dict[str, float] = {}
        start = time.perf_counter()

        t0 = time.perf_counter()
        image = (self.images_dir / record.image_ref).read_bytes()
        timings["load"] = time.perf_counter() - t0

        detections = []
        timings["detect"] = 0.0
        if self.detector is not None:
            timed = self.detector.detect(image, record.image_ref)
            timings["detect"] = timed.detect_latency
            detections = timed.detections if self.guided else []
            if self.cfg.save_detections_dir is not None:
                self._save_detections(record.image_ref, timed.detections)

        t0 = time.perf_counter()
        ids = assign_identifiers(detections)
        prompt = build_prompt(self.cfg.mode, ids, self.categories, self.template)
        timings["encode"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        response = self.client.complete(image, prompt, self.cfg.vlm)
        timings["vlm"] = time.perf_counter() - t0
        timings["vlm_reported"] = response.latency

        t0 = time.perf_counter()
        assessment = parse_assessment(response.text, self.synonyms, self.cfg.strict_parse)
        timings["parse"] = time.perf_counter() - t0
        if assessment.parse_warnings:
            logger.warning(f"{record.image_ref}: parse warnings {list(assessment.parse_warnings)}")

        t0 = time.perf_counter()
        counts = multilabel_counts(assessment.categories, record.hazards)
        score, score_error = self._score(assessment, record)
        timings["score"] = time.perf_counter() - t0

        timings["total"] = time.perf_counter() - start
        accounted = sum(timings[stage] for stage in STAGES)
        timings["unaccounted"] = max(0.0, timings["total"] - accounted)

        logger.info(
            f"{record.image_ref}: "
            + ", ".join(f"{stage}={timings[stage] * 1000:.2f}ms" for stage in STAGES)
            + f", hazards={list(assessment.categories)}"
        )

        result = {
            "image": record.image_ref,
            "status": "success",
            "prompt_digest": prompt.digest,
            "template_version": prompt.template_version,
            "detections": self._detection_summary(ids) if self.guided else None,
            "assessment": {
                "categories": list(assessment.categories),
                "rationales": dict(assessment.rationales),
                "parse_warnings": list(assessment.parse_warnings),
            },
            "ground_truth": list(record.hazards),
            "counts": counts_to_json(counts),
            "bertscore": score._asdict() if score else None,
            "grounding": self._grounding(assessment, prompt.identifiers) if self.guided else None,
        }
        if score_error:
            result["bertscore_error"] = score_error
        return {"result": result, "timings": timings}

    def _save_detections(self, image_ref: str, detections) -> None:
        path = Path(self.cfg.save_detections_dir) / f"{Path(image_ref).stem}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(detections_to_json(image_ref, detections), f, indent=2)

    def _score(self, assessment: HazardAssessment, record: HazardRecord) -> tuple[Optional[BertScore], Optional[str]]:
        if self.embedder is None:
            return None, None
        try:
            return score_rationales(assessment, record, self.embedder, self.idf), None
        except EmbeddingError as e:
            logger.warning(f"{record.image_ref}: rationale scoring failed: {e}")
            return None, str(e)

    @staticmethod
    def _detection_summary(ids) -> Dict:
        by_class = Counter(item.detection.cls.value for item in ids)
        return {
            "count": len(ids),
            "by_class": dict(sorted(by_class.items())),
            "identifiers": [item.id for item in ids],
        }

    @staticmethod
    def _grounding(assessment: HazardAssessment, identifiers: Sequence[str]) -> Dict:
        mentioned = set()
        for rationale in assessment.rationales.values():
            mentioned |= extract_entity_mentions(rationale, identifiers)
        return {"available": len(identifiers), "mentioned": sorted(mentioned)}

    def _safe_process(self, record: HazardRecord) -> Dict:
        try:
            return self.process_image(record)
        except ConfigurationError:
            raise
        except Exception as e:
            logger.error(f"Processing failed for {record.image_ref}: {str(e)}", exc_info=True)
            return {
                "result": {
                    "image": record.image_ref,
                    "status": "error",
                    "error_type": type(e).__name__,
                    "error": str(e),
                },
                "timings": None,
            }

    def run(self, persist: bool = True) -> Dict:
        """Process all records and build the run report.

        Args:
            persist: Store report.json and report.txt under cfg.output_dir

        Returns:
            Run report dictionary
        """
        started_at = datetime.now(timezone.utc)
        logger.info(f"=== Starting {self.cfg.mode} run over {len(self.manifest.records)} images ===")

        wall_start = time.perf_counter()
        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            outcomes = list(pool.map(self._safe_process, self.manifest.records))
        wall = time.perf_counter() - wall_start

        report = self.build_report(outcomes, wall, started_at)
        errors = report["errors"]["count"]
        fps = report["timing"]["fps"]
        logger.info(
            f"=== Run complete: {len(outcomes) - errors} scored, {errors} errors, "
            f"{fps if fps is None else round(fps, 2)} FPS ==="
        )

        if persist:
            storage = ReportStorage(self.cfg.output_dir)
            self.run_id = storage.new_run_id(self.cfg.mode, started_at)
            self.report_path = storage.store_report(self.run_id, report, render_run_report(report))
        return report

    def build_report(self, outcomes: List[Dict], wall: float, started_at: datetime) -> Dict:
        per_image = [outcome["result"] for outcome in outcomes]
        succeeded = [item for item in per_image if item["status"] == "success"]
        failed = [item for item in per_image if item["status"] == "error"]

        hazards = aggregate_hazard_metrics([counts_from_json(item["counts"]) for item in succeeded])
        corpus = {"hazards": hazards}

        if self.embedder is not None:
            scores = [BertScore(**item["bertscore"]) if item["bertscore"] else None for item in succeeded]
            corpus["bertscore"] = aggregate_bertscore(
                scores, errors=sum(1 for item in succeeded if "bertscore_error" in item)
            )
        else:
            corpus["bertscore"] = None

        grounded = [item["grounding"] for item in succeeded if item.get("grounding") and item["grounding"]["available"]]
        available = sum(g["available"] for g in grounded)
        corpus["grounding_rate"] = (sum(len(g["mentioned"]) for g in grounded) / available) if available else None

        timed = [outcome["timings"] for outcome in outcomes if outcome["timings"] is not None]
        timing = {
            "started_at": started_at.isoformat(),
            "parallelism": self.cfg.parallelism,
            "wall_seconds": wall,
            "fps": (len(succeeded) / wall) if succeeded and wall > 0 else None,
            "stages": {stage: stage_stats([t[stage] for t in timed]) for stage in STAGES + ["total", "unaccounted"]},
            "vlm_reported": stage_stats([t["vlm_reported"] for t in timed]),
            "per_image": {
                outcome["result"]["image"]: outcome["timings"] for outcome in outcomes if outcome["timings"] is not None
            },
        }

        report = {
            "report_version": REPORT_VERSION,
            "run": self._config_echo(),
            "per_image": per_image,
            "corpus": corpus,
            "errors": {
                "count": len(failed),
                "scored": len(succeeded),
                "by_type": dict(sorted(Counter(item["error_type"] for item in failed).items())),
            },
            "timing": timing,
        }
        is_valid, error = validate_output(report, "run_report")
        if not is_valid:
            logger.error(f"Run report failed validation: {error}")
        return report

    def _config_echo(self) -> Dict:
        cfg = self.cfg
        return {
            "mode": cfg.mode,
            "manifest": Path(cfg.manifest_path).name,
            "images": len(self.manifest.records),
            "template": self.template.name,
            "template_version": self.template.version,
            "model_name": cfg.vlm.model_name,
            "temperature": cfg.vlm.temperature,
            "max_tokens": cfg.vlm.max_tokens,
            "backend": cfg.backend,
            "detector": cfg.detector.backend if cfg.detector else None,
            "score_threshold": cfg.detector.score_threshold if cfg.detector else None,
            "strict_parse": cfg.strict_parse,
            "score_rationales": cfg.score_rationales,
            "idf": cfg.idf,
        }


def create_runner(
    cfg: RunConfig,
    client: Optional[VLMClient] = None,
    detector: Optional[Detector] = None,
    embedder: Optional[EmbeddingProvider] = None,
) -> PipelineRunner:
    """Factory function to create a pipeline runner."""
    return PipelineRunner(cfg, client=client, detector=detector, embedder=embedder)


def run_pipeline(
    cfg: RunConfig,
    client: Optional[VLMClient] = None,
    detector: Optional[Detector] = None,
    embedder: Optional[EmbeddingProvider] = None,
    persist: bool = True,
) -> Dict:
    """Convenience function to run one configuration end to end."""
    return create_runner(cfg, client, detector, embedder).run(persist=persist)


def strip_timing(report: Dict) -> Dict:
    """Report without its timing section (the deterministic part)."""
    stripped = copy.deepcopy(report)
    stripped.pop("timing", None)
    return stripped


def _pp(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(value * 100, 1)


def _delta(a: Optional[float], b: Optional[float], scale: float, digits: int) -> Optional[float]:
    if a is None or b is None:
        return None
    return round((b - a) * scale, digits)


def compare_reports(a: Dict, b: Dict) -> Dict:
    """Per-metric baseline/proposed/improvement rows for two reports on one image set.

    P/R/F1 deltas are in percentage points, BERTScore deltas in absolute
    score and FPS deltas in frames per second.
    """
    images_a = sorted(item["image"] for item in a["per_image"])
    images_b = sorted(item["image"] for item in b["per_image"])
    if images_a != images_b:
        only_a = sorted(set(images_a) - set(images_b))
        only_b = sorted(set(images_b) - set(images_a))
        raise ValueError(f"Reports cover different image sets (only in a: {only_a[:5]}, only in b: {only_b[:5]})")

    rows = []
    for scope in ("micro", "macro"):
        for metric in ("precision", "recall", "f1"):
            va = a["corpus"]["hazards"][scope][metric]
            vb = b["corpus"]["hazards"][scope][metric]
            rows.append({
                "metric": f"{scope}_{metric}",
                "unit": "%",
                "a": _pp(va),
                "b": _pp(vb),
                "delta": _delta(va, vb, 100, 1),
            })

    bert_a = a["corpus"].get("bertscore") or {}
    bert_b = b["corpus"].get("bertscore") or {}
    for metric in ("precision", "recall", "f1"):
        va, vb = bert_a.get(metric), bert_b.get(metric)
        rows.append({
            "metric": f"bertscore_{metric}",
            "unit": "score",
            "a": None if va is None else round(va, 2),
            "b": None if vb is None else round(vb, 2),
            "delta": _delta(va, vb, 1, 2),
        })

    fps_a = a.get("timing", {}).get("fps")
    fps_b = b.get("timing", {}).get("fps")
    rows.append({
        "metric": "fps",
        "unit": "fps",
        "a": None if fps_a is None else round(fps_a, 2),
        "b": None if fps_b is None else round(fps_b, 2),
        "delta": _delta(fps_a, fps_b, 1, 2),
    })

    return {
        "a": {"mode": a["run"].get("mode"), "template": a["run"].get("template")},
        "b": {"mode": b["run"].get("mode"), "template": b["run"].get("template")},
        "images": len(images_a),
        "rows": rows,
    }


def evaluate_responses(
    manifest_path: Path,
    responses_path: Path,
    embedder: Optional[EmbeddingProvider] = None,
    strict: bool = False,
    idf: bool = False,
) -> Dict:
    """Score stored model responses against a manifest without calling any model.

    The responses file holds one `{"image": ..., "response": ...}` object per
    line. Manifest images with no response count as empty predictions.
    """
    manifest = load_manifest(manifest_path, mode="evaluation")
    weights = None
    if embedder is not None and idf:
        references = [concatenate_rationales(r.rationales) for r in manifest.records]
        weights = compute_idf([tokenize(text) for text in references if text])
    responses: Dict[str, str] = {}
    with open(responses_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            data = json.loads(line)
            if "image" not in data or "response" not in data:
                raise ValueError(f"{responses_path}:{line_no}: expected 'image' and 'response' keys")
            responses[data["image"]] = data["response"]

    synonyms = load_synonyms()
    counts, scores, category_scores, missing = [], [], [], []
    errors = 0
    for record in manifest.records:
        if record.image_ref not in responses:
            missing.append(record.image_ref)
        assessment = parse_assessment(responses.get(record.image_ref, ""), synonyms, strict)
        counts.append(multilabel_counts(assessment.categories, record.hazards))
        if embedder is not None:
            try:
                score = score_rationales(assessment, record, embedder, weights)
                by_category = score_rationale_categories(assessment, record, embedder, weights)
            except EmbeddingError as e:
                logger.warning(f"{record.image_ref}: rationale scoring failed: {e}")
                errors += 1
            else:
                scores.append(score)
                category_scores.append(by_category)

    if missing:
        logger.warning(f"{len(missing)} manifest images have no stored response")
    return {
        "report_version": REPORT_VERSION,
        "hazards": aggregate_hazard_metrics(counts),
        "bertscore": aggregate_bertscore(scores, errors) if embedder is not None else None,
        "bertscore_per_category": aggregate_category_bertscore(category_scores) if embedder is not None else None,
        "missing_responses": missing,
    }
