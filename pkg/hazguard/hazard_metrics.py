"""Hazard scoring: image-level multi-label P/R/F1 and BERTScore over rationales."""
import logging
import math
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from vlm.embeddings import TokenEmbeddings, embed_tokens

from .config import HAZARD_KEYS

logger = logging.getLogger(__name__)


class LabelCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)
    # (tp, fp, fn) per hazard key
    by_category: dict[str, tuple[int, int, int]] = Field(default_factory=dict)


class RationalePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    candidate: str
    reference: str
    category: str

    @model_validator(mode="after")
    def _non_empty(self) -> "RationalePair":
        if not self.candidate.strip() or not self.reference.strip():
            raise ValueError("Rationale pair texts must be non-empty")
        if self.category not in HAZARD_KEYS:
            raise ValueError(f"Unknown hazard category: {self.category}")
        return self


class BertScore(NamedTuple):
    precision: float
    recall: float
    f1: float


def multilabel_counts(pred: Iterable[str], gt: Iterable[str]) -> LabelCounts:
    """tp = |pred & gt|, fp = |pred - gt|, fn = |gt - pred|."""
    pred_set, gt_set = set(pred), set(gt)
    by_category = {
        key: (int(key in pred_set and key in gt_set), int(key in pred_set and key not in gt_set), int(key in gt_set and key not in pred_set))
        for key in HAZARD_KEYS
        if key in pred_set or key in gt_set
    }
    return LabelCounts(
        tp=len(pred_set & gt_set),
        fp=len(pred_set - gt_set),
        fn=len(gt_set - pred_set),
        by_category=by_category,
    )


def f1(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _prf(tp: int, fp: int, fn: int) -> dict:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"precision": precision, "recall": recall, "f1": f1(precision, recall), "tp": tp, "fp": fp, "fn": fn}


def aggregate_hazard_metrics(per_image: Sequence[LabelCounts]) -> dict:
    """Micro-averaged corpus P/R/F1 plus per-category and macro breakdowns."""
    flags = []
    if not per_image:
        flags.append("empty_corpus")

    tp = sum(c.tp for c in per_image)
    fp = sum(c.fp for c in per_image)
    fn = sum(c.fn for c in per_image)
    if per_image and tp + fp == 0:
        flags.append("no_predictions")

    per_category = {}
    for key in HAZARD_KEYS:
        totals = [0, 0, 0]
        for counts in per_image:
            for i, value in enumerate(counts.by_category.get(key, (0, 0, 0))):
                totals[i] += value
        per_category[key] = _prf(*totals)

    # Macro over categories that occur in predictions or ground truth
    active = [scores for scores in per_category.values() if scores["tp"] + scores["fp"] + scores["fn"] > 0]
    macro = {
        name: (sum(scores[name] for scores in active) / len(active) if active else 0.0)
        for name in ("precision", "recall", "f1")
    }

    return {
        "images": len(per_image),
        "micro": _prf(tp, fp, fn),
        "macro": macro,
        "per_category": per_category,
        "flags": flags,
    }


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / norms


def _weighted_mean(values: np.ndarray, tokens: Sequence[str], idf: Mapping[str, float], side: str) -> float:
    """idf-weighted mean; uniform weights when every token weighs zero."""
    weights = np.array([idf.get(token, 1.0) for token in tokens], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        logger.warning(f"All {side} tokens have zero idf weight; using uniform weights")
        return float(values.mean())
    return float((values * weights).sum() / total)


def bertscore(
    cand: TokenEmbeddings,
    ref: TokenEmbeddings,
    idf: Optional[Mapping[str, float]] = None,
) -> BertScore:
    """Greedy cosine matching between candidate and reference tokens.

    Precision averages each candidate token's best similarity to the
    reference, recall the reverse. With `idf`, the averages are weighted by
    the token's idf (tokens missing from the table weigh 1).
    """
    if not cand.tokens or not ref.tokens:
        raise ValueError("BERTScore needs non-empty token lists on both sides")

    similarity = _unit_rows(cand.vectors) @ _unit_rows(ref.vectors).T
    best_for_cand = similarity.max(axis=1)
    best_for_ref = similarity.max(axis=0)

    if idf:
        precision = _weighted_mean(best_for_cand, cand.tokens, idf, "candidate")
        recall = _weighted_mean(best_for_ref, ref.tokens, idf, "reference")
    else:
        precision = float(best_for_cand.mean())
        recall = float(best_for_ref.mean())
    return BertScore(precision, recall, f1(precision, recall))


def compute_idf(reference_tokens: Sequence[Sequence[str]]) -> dict[str, float]:
    """idf(t) = log((M + 1) / (df(t) + 1)) over M reference texts."""
    total = len(reference_tokens)
    document_frequency: dict[str, int] = {}
    for tokens in reference_tokens:
        for token in set(tokens):
            document_frequency[token] = document_frequency.get(token, 0) + 1
    return {token: math.log((total + 1) / (df + 1)) for token, df in document_frequency.items()}


def concatenate_rationales(rationales: Mapping[str, str]) -> str:
    """Join rationales in canonical category order."""
    return " ".join(rationales[key].strip() for key in HAZARD_KEYS if rationales.get(key, "").strip())


def rationale_pairs(candidate: Mapping[str, str], reference: Mapping[str, str]) -> list[RationalePair]:
    """Per-category pairs for categories explained on both sides."""
    return [
        RationalePair(candidate=candidate[key], reference=reference[key], category=key)
        for key in HAZARD_KEYS
        if candidate.get(key, "").strip() and reference.get(key, "").strip()
    ]


def score_rationales(
    assessment,
    record,
    embedder,
    idf: Optional[Mapping[str, float]] = None,
) -> Optional[BertScore]:
    """BERTScore between an image's generated and reference rationales.

    Returns None when either side has no rationale text (the image is
    excluded from the corpus mean). Embedding failures propagate as
    EmbeddingError.
    """
    candidate = concatenate_rationales(assessment.rationales)
    reference = concatenate_rationales(record.rationales)
    if not candidate or not reference:
        return None
    return bertscore(embed_tokens(candidate, embedder), embed_tokens(reference, embedder), idf)


def score_rationale_categories(
    assessment,
    record,
    embedder,
    idf: Optional[Mapping[str, float]] = None,
) -> dict[str, BertScore]:
    """BERTScore per hazard category explained on both sides."""
    return {
        pair.category: bertscore(embed_tokens(pair.candidate, embedder), embed_tokens(pair.reference, embedder), idf)
        for pair in rationale_pairs(assessment.rationales, record.rationales)
    }


def aggregate_category_bertscore(per_image: Sequence[Mapping[str, BertScore]]) -> dict:
    """Per-category mean over the images where that category had a pair."""
    result = {}
    for key in HAZARD_KEYS:
        scores = [scores[key] for scores in per_image if key in scores]
        entry = aggregate_bertscore(scores)
        entry["pairing"] = "per_category"
        del entry["excluded_empty"], entry["errors"]
        result[key] = entry
    return result


def aggregate_bertscore(scores: Sequence[Optional[BertScore]], errors: int = 0) -> dict:
    """Mean BERTScore over scored images; exclusions and errors counted separately."""
    scored = [score for score in scores if score is not None]
    result = {
        "scored": len(scored),
        "excluded_empty": len(scores) - len(scored),
        "errors": errors,
        "precision": None,
        "recall": None,
        "f1": None,
        "pairing": "per_image_concatenation",
    }
    if scored:
        result["precision"] = sum(s.precision for s in scored) / len(scored)
        result["recall"] = sum(s.recall for s in scored) / len(scored)
        result["f1"] = sum(s.f1 for s in scored) / len(scored)
    return result
