"""Detection scoring: TP/FP/FN matching, precision/recall, 11-point AP and mAP."""
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import COCO_THRESHOLDS, MAP_THRESHOLDS, PR_REPORT_THRESHOLD, RECALL_LEVELS, REPORT_VERSION
from .detection import BoundingBox, Detection, ObjectClass, iou, load_class_list, load_detection_file, load_label_file

logger = logging.getLogger(__name__)

GroundTruth = tuple[BoundingBox, ObjectClass]
APTable = Mapping[str, Mapping[float, Optional[float]]]

_RECALL_EPS = 1e-12


class MatchResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn_: int = Field(ge=0)
    matches: tuple[tuple[int, int, float], ...] = ()
    # TP flag per prediction index
    pred_flags: tuple[bool, ...] = ()


class PRPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    zero_division: bool = False


def match_detections(preds: Sequence[Detection], gts: Sequence[GroundTruth], alpha: float) -> MatchResult:
    """Greedy confidence-descending matching.

    Each prediction takes the unmatched same-class ground truth with the
    highest IoU, provided IoU >= alpha.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")

    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched_gt: set[int] = set()
    flags = [False] * len(preds)
    matches = []
    for pred_index in order:
        pred = preds[pred_index]
        best_gt, best_iou = -1, -1.0
        for gt_index, (gt_box, gt_cls) in enumerate(gts):
            if gt_index in matched_gt or gt_cls != pred.cls:
                continue
            overlap = iou(pred.box, gt_box)
            if overlap > best_iou:
                best_gt, best_iou = gt_index, overlap
        if best_gt >= 0 and best_iou >= alpha:
            matched_gt.add(best_gt)
            flags[pred_index] = True
            matches.append((pred_index, best_gt, best_iou))

    tp = len(matches)
    return MatchResult(
        tp=tp,
        fp=len(preds) - tp,
        fn_=len(gts) - tp,
        matches=tuple(matches),
        pred_flags=tuple(flags),
    )


def max_matching_size(preds: Sequence[Detection], gts: Sequence[GroundTruth], alpha: float) -> int:
    """Size of a maximum one-to-one same-class matching with IoU >= alpha."""
    edges = [
        [g for g, (gt_box, gt_cls) in enumerate(gts) if gt_cls == p.cls and iou(p.box, gt_box) >= alpha]
        for p in preds
    ]
    owner: dict[int, int] = {}

    def augment(p: int, seen: set[int]) -> bool:
        for g in edges[p]:
            if g in seen:
                continue
            seen.add(g)
            if g not in owner or augment(owner[g], seen):
                owner[g] = p
                return True
        return False

    return sum(1 for p in range(len(preds)) if augment(p, set()))


def _safe_ratio(numerator: int, denominator: int) -> tuple[float, bool]:
    if denominator == 0:
        return 0.0, True
    return numerator / denominator, False


def precision_recall(m: MatchResult) -> PRPoint:
    """Precision and recall from match counts; 0/0 is reported as 0."""
    precision, p_zero = _safe_ratio(m.tp, m.tp + m.fp)
    recall, r_zero = _safe_ratio(m.tp, m.tp + m.fn_)
    return PRPoint(precision=precision, recall=recall, zero_division=p_zero or r_zero)


def average_precision(scored_preds: Sequence[bool], total_gt: int, alpha: Optional[float] = None) -> Optional[float]:
    """11-point interpolated AP.

    Args:
        scored_preds: TP/FP flags of the predictions, ranked by descending score
        total_gt: number of ground-truth boxes for the class
        alpha: IoU threshold the flags were computed at (informational)

    Returns:
        AP in [0, 1], or None when there is neither ground truth nor prediction.
    """
    if total_gt < 0:
        raise ValueError(f"total_gt must be >= 0, got {total_gt}")
    flags = np.asarray(scored_preds, dtype=bool)
    tp_total = int(flags.sum())
    if tp_total > total_gt:
        raise ValueError(f"{tp_total} true positives exceed {total_gt} ground truths (alpha={alpha})")
    if total_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0

    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)

    ap = 0.0
    for level in RECALL_LEVELS:
        reached = recall >= level - _RECALL_EPS
        ap += float(np.max(precision[reached])) if reached.any() else 0.0
    return ap / len(RECALL_LEVELS)


def mean_average_precision(ap_table: APTable, thresholds: Sequence[float] = MAP_THRESHOLDS) -> float:
    """Mean over thresholds of the class-mean AP.

    Classes whose AP is None (no ground truth, no predictions) are left out
    of the class mean.
    """
    if not ap_table:
        raise ValueError("AP table is empty")
    per_threshold = []
    for alpha in thresholds:
        key = round(alpha, 2)
        values = []
        for cls_name, row in ap_table.items():
            if key not in row:
                raise ValueError(f"AP for class {cls_name} missing at alpha={key}")
            if row[key] is not None:
                values.append(row[key])
        if values:
            per_threshold.append(sum(values) / len(values))
    if not per_threshold:
        raise ValueError("AP table has no defined values")
    return sum(per_threshold) / len(per_threshold)


def summarize_map(ap_table: APTable, alphas: Sequence[float] = MAP_THRESHOLDS) -> dict:
    """mAP over `alphas` plus mAP@0.5 and mAP@0.5:0.95, each labelled."""
    return {
        "map_alphas": mean_average_precision(ap_table, alphas),
        "map_alphas_thresholds": [round(a, 2) for a in alphas],
        "map50": mean_average_precision(ap_table, [0.5]),
        "map50_95": mean_average_precision(ap_table, COCO_THRESHOLDS),
    }


def _stem_index(directory: Path, suffix: str) -> dict[str, Path]:
    return {path.stem: path for path in sorted(Path(directory).glob(f"*{suffix}"))}


def _matching_shortfalls(stem: str, alpha: float, preds: Sequence[Detection], gts: Sequence[GroundTruth], result: MatchResult) -> list[dict]:
    """Classes where greedy matching in one image found fewer pairs than a maximum matching."""
    found = []
    for cls in sorted({p.cls for p in preds} & {c for _, c in gts}, key=lambda c: c.value):
        greedy = sum(1 for pred_index, _, _ in result.matches if preds[pred_index].cls == cls)
        best = max_matching_size([p for p in preds if p.cls == cls], [g for g in gts if g[1] == cls], alpha)
        if greedy != best:
            logger.warning(f"{stem}: greedy matching paired {greedy} of {best} possible {cls.value} boxes at alpha={alpha}")
            found.append({"image": stem, "class": cls.value, "alpha": alpha, "greedy": greedy, "maximum": best})
    return found


def evaluate_detection_corpus(
    preds_dir: Path,
    labels_dir: Path,
    classes_file: Path,
    alphas: Sequence[float] = MAP_THRESHOLDS,
) -> dict:
    """Score a directory of prediction JSON files against YOLO-format labels.

    Images are paired by file stem. A label file without predictions counts
    as an image with no predictions; predictions without a label file count
    as an image with no ground truth.
    """
    class_list = load_class_list(classes_file)
    pred_files = _stem_index(preds_dir, ".json")
    label_files = _stem_index(labels_dir, ".txt")
    stems = sorted(set(pred_files) | set(label_files))
    thresholds = sorted({round(a, 2) for a in alphas} | set(COCO_THRESHOLDS) | {PR_REPORT_THRESHOLD})
    flags: list[str] = []
    discrepancies: list[dict] = []

    # per threshold, per class: list of (score, is_tp) and GT count
    ranked: dict[float, dict[ObjectClass, list[tuple[float, bool]]]] = {a: {} for a in thresholds}
    gt_counts: dict[ObjectClass, int] = {}
    pr_counts: dict[ObjectClass, list[int]] = {}

    for stem in stems:
        preds: list[Detection] = []
        gts: list[GroundTruth] = []
        if stem in pred_files:
            _, preds = load_detection_file(pred_files[stem])
        else:
            flags.append(f"missing_predictions:{stem}")
        if stem in label_files:
            gts = load_label_file(label_files[stem], class_list)
        else:
            flags.append(f"missing_labels:{stem}")
            logger.warning(f"No label file for {stem}; its predictions count as false positives")

        for _, cls in gts:
            gt_counts[cls] = gt_counts.get(cls, 0) + 1
        for alpha in thresholds:
            result = match_detections(preds, gts, alpha)
            discrepancies.extend(_matching_shortfalls(stem, alpha, preds, gts, result))
            for index, pred in enumerate(preds):
                ranked[alpha].setdefault(pred.cls, []).append((pred.score, result.pred_flags[index]))
            if alpha == PR_REPORT_THRESHOLD:
                for index, pred in enumerate(preds):
                    counts = pr_counts.setdefault(pred.cls, [0, 0, 0])
                    counts[0 if result.pred_flags[index] else 1] += 1
                matched = {gt_index for _, gt_index, _ in result.matches}
                for gt_index, (_, cls) in enumerate(gts):
                    if gt_index not in matched:
                        pr_counts.setdefault(cls, [0, 0, 0])[2] += 1

    classes = [cls for cls in class_list if cls in gt_counts or cls in pr_counts]
    ap_table: dict[str, dict[float, Optional[float]]] = {}
    per_class = {}
    for cls in classes:
        row = {}
        for alpha in thresholds:
            entries = sorted(ranked[alpha].get(cls, []), key=lambda item: -item[0])
            row[alpha] = average_precision([flag for _, flag in entries], gt_counts.get(cls, 0), alpha)
        ap_table[cls.value] = row
        tp, fp, fn = pr_counts.get(cls, [0, 0, 0])
        point = precision_recall(MatchResult(tp=tp, fp=fp, fn_=fn))
        if point.zero_division:
            flags.append(f"zero_division:{cls.value}")
        per_class[cls.value] = {
            "precision": point.precision,
            "recall": point.recall,
            "ground_truth": gt_counts.get(cls, 0),
            "ap": {str(alpha): ap for alpha, ap in row.items()},
        }

    report = {
        "report_version": REPORT_VERSION,
        "images": len(stems),
        "pr_threshold": PR_REPORT_THRESHOLD,
        "per_class": per_class,
        "flags": flags,
        "matching_discrepancies": {"count": len(discrepancies), "cases": discrepancies},
    }
    if ap_table:
        report.update(summarize_map(ap_table, alphas))
    else:
        logger.warning("No ground truth or predictions found; mAP undefined")
        report.update({"map_alphas": None, "map50": None, "map50_95": None})
    logger.info(f"Evaluated detections on {len(stems)} images across {len(classes)} classes")
    return report
