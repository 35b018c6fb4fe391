"""Throughput benchmark: baseline vs detection-guided on identical inputs."""
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from vlm.client import VLMClient

from .config import BENCH_WARMUP, STAGES, RunConfig
from .detector_backend import Detector
from .errors import ConfigurationError
from .orchestrator import PipelineRunner, stage_stats
from .prompts import paired_template_path

logger = logging.getLogger(__name__)

MODES = ("baseline", "detection_guided")


def _fps_stats(values: list) -> Dict:
    if not values:
        return {"mean": None, "std": None}
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def _template_for(cfg: RunConfig, mode: str) -> Optional[Path]:
    """An explicit template serves its own mode; the other mode gets its sibling or the default."""
    if cfg.template_path is None or mode == cfg.mode:
        return cfg.template_path
    sibling = paired_template_path(cfg.template_path, mode)
    if sibling is None:
        logger.info(f"No {mode} sibling for {cfg.template_path.name}; using the bundled template")
    return sibling


def bench(
    cfg: RunConfig,
    repeats: int,
    warmup: int = BENCH_WARMUP,
    client: Optional[VLMClient] = None,
    detector: Optional[Detector] = None,
) -> Dict:
    """Time both configurations over the same manifest.

    Each mode runs `warmup + repeats` passes; warmup passes are discarded.
    The guided-minus-baseline overhead is reported per stage and per image.
    Baseline passes never run the detector here, so the detect stage carries
    the whole detection cost.

    Args:
        cfg: Run configuration; must name a detector source
        repeats: Measured passes per mode (>= 1)
        warmup: Discarded passes per mode
        client: Inference client shared by both modes
        detector: Detector backend for the guided mode

    Returns:
        Benchmark result dictionary
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    if cfg.detector is None and detector is None:
        raise ConfigurationError("Benchmarking the guided mode requires a detector source")

    modes: Dict[str, Dict] = {}
    for mode in MODES:
        mode_cfg = cfg.model_copy(
            update={
                "mode": mode,
                "time_detector_in_baseline": False,
                "template_path": _template_for(cfg, mode),
                "save_detections_dir": None,
            }
        )
        runner = PipelineRunner(mode_cfg, client=client, detector=detector if mode == "detection_guided" else None)
        logger.info(f"Benchmarking {mode}: {warmup} warmup + {repeats} measured passes")

        timings, fps_values, errors = [], [], 0
        for iteration in range(warmup + repeats):
            report = runner.run(persist=False)
            if iteration < warmup:
                continue
            timings.extend(report["timing"]["per_image"].values())
            errors += report["errors"]["count"]
            if report["timing"]["fps"] is not None:
                fps_values.append(report["timing"]["fps"])

        stage_means = {stage: stage_stats([t[stage] for t in timings]) for stage in STAGES + ["total", "unaccounted"]}
        modes[mode] = {
            "stages": stage_means,
            "stage_std_ms": {
                stage: (float(np.std([t[stage] for t in timings]) * 1000) if timings else None)
                for stage in STAGES + ["total"]
            },
            "vlm_reported": stage_stats([t["vlm_reported"] for t in timings]),
            "fps": _fps_stats(fps_values),
            "errors": errors,
            "images": len(runner.manifest.records),
            "template": runner.template.name,
        }

    by_stage = {}
    for stage in STAGES + ["total"]:
        base = modes["baseline"]["stages"][stage]["mean_ms"]
        guided = modes["detection_guided"]["stages"][stage]["mean_ms"]
        by_stage[stage] = None if base is None or guided is None else guided - base

    detect_plus_encode = None
    if by_stage["detect"] is not None and by_stage["encode"] is not None:
        detect_plus_encode = by_stage["detect"] + by_stage["encode"]

    result = {
        "images": modes["baseline"]["images"],
        "repeats": repeats,
        "warmup": warmup,
        "modes": modes,
        "overhead_ms": {
            "total": by_stage["total"],
            "detect_plus_encode": detect_plus_encode,
            "by_stage": by_stage,
        },
    }
    logger.info(
        f"Guided overhead: {by_stage['total']} ms/image total, {detect_plus_encode} ms in detect+encode"
    )
    return result
