"""Test hazard P/R/F1 and BERTScore rationale scoring."""
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from hazguard.errors import EmbeddingError
from hazguard.hazard_metrics import (
    BertScore,
    LabelCounts,
    aggregate_bertscore,
    aggregate_category_bertscore,
    aggregate_hazard_metrics,
    bertscore,
    compute_idf,
    concatenate_rationales,
    f1,
    multilabel_counts,
    score_rationale_categories,
    score_rationales,
)
from hazguard.response_parser import HazardAssessment
from storage.manifest_store import load_manifest
from vlm.embeddings import FileCacheProvider, TokenEmbeddings, embed_tokens, tokenize

from fakes import FIXTURES, MANIFEST, HashedVectorProvider
from harness import collect_tests, run_suite

EMBEDDINGS = FIXTURES / "embeddings.json"


def emb(tokens, vectors) -> TokenEmbeddings:
    return TokenEmbeddings.from_lists(tokens, vectors)


def reference_bertscore(cand: np.ndarray, ref: np.ndarray) -> tuple[float, float, float]:
    """Pairwise cosine loops."""
    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    precision = sum(max(cos(c, r) for r in ref) for c in cand) / len(cand)
    recall = sum(max(cos(c, r) for c in cand) for r in ref) / len(ref)
    score = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, score


def test_multilabel_counts():
    counts = multilabel_counts({"ppe_non_compliance", "fall_hazard"}, {"fall_hazard", "unsafe_environment"})
    assert (counts.tp, counts.fp, counts.fn) == (1, 1, 1)
    assert counts.by_category["ppe_non_compliance"] == (0, 1, 0)
    assert counts.by_category["unsafe_environment"] == (0, 0, 1)
    assert "caught_between_hazard" not in counts.by_category
    assert multilabel_counts([], []) == LabelCounts()


def test_f1_examples():
    assert abs(f1(0.601, 0.437) - 0.506) <= 0.0015
    assert abs(f1(0.245, 0.570) - 0.345) <= 0.0015
    assert f1(0.0, 0.0) == 0.0
    assert f1(1.0, 1.0) == 1.0


def test_aggregate_micro_and_macro():
    per_image = [
        multilabel_counts(["ppe_non_compliance", "unsafe_environment"], ["caught_between_hazard"]),
        multilabel_counts(["ppe_non_compliance"], ["ppe_non_compliance", "fall_hazard"]),
        multilabel_counts(["ppe_non_compliance", "fall_hazard"], ["ppe_non_compliance", "unsafe_environment"]),
        multilabel_counts(["unsafe_environment", "fall_hazard"], ["fall_hazard", "caught_between_hazard"]),
    ]
    corpus = aggregate_hazard_metrics(per_image)
    micro = corpus["micro"]
    assert (micro["tp"], micro["fp"], micro["fn"]) == (3, 4, 4)
    assert abs(micro["precision"] - 3 / 7) < 1e-12
    assert abs(micro["recall"] - 3 / 7) < 1e-12
    assert abs(micro["f1"] - 3 / 7) < 1e-12

    ppe = corpus["per_category"]["ppe_non_compliance"]
    assert (ppe["tp"], ppe["fp"], ppe["fn"]) == (2, 1, 0)
    caught = corpus["per_category"]["caught_between_hazard"]
    assert (caught["precision"], caught["recall"], caught["f1"]) == (0.0, 0.0, 0.0)
    macro_p = (2 / 3 + 1 / 2 + 0.0 + 0.0) / 4
    assert abs(corpus["macro"]["precision"] - macro_p) < 1e-12
    assert corpus["flags"] == []


def test_aggregate_edge_cases():
    assert "empty_corpus" in aggregate_hazard_metrics([])["flags"]
    silent = aggregate_hazard_metrics([multilabel_counts([], ["fall_hazard"])])
    assert "no_predictions" in silent["flags"]
    assert silent["micro"]["precision"] == 0.0 and silent["micro"]["recall"] == 0.0


def test_micro_scores_ignore_corpus_order():
    rng = np.random.default_rng(23)
    keys = ["ppe_non_compliance", "fall_hazard", "caught_between_hazard", "unsafe_environment"]
    for _ in range(200):
        per_image = [
            multilabel_counts(
                [key for key in keys if rng.random() < 0.4],
                [key for key in keys if rng.random() < 0.4],
            )
            for _ in range(int(rng.integers(1, 9)))
        ]
        shuffled = [per_image[i] for i in rng.permutation(len(per_image))]
        original, permuted = aggregate_hazard_metrics(per_image), aggregate_hazard_metrics(shuffled)
        for metric in ("tp", "fp", "fn", "precision", "recall", "f1"):
            assert original["micro"][metric] == permuted["micro"][metric]


def test_bertscore_identity():
    tokens = ["worker", "near", "edge"]
    vectors = np.random.default_rng(2).standard_normal((3, 8))
    score = bertscore(emb(tokens, vectors), emb(tokens, vectors))
    assert all(abs(value - 1.0) < 1e-9 for value in score)


def test_bertscore_one_by_two():
    cand = emb(["c"], [[1.0, 0.0, 0.0]])
    ref = emb(["r1", "r2"], [[0.9, math.sqrt(1 - 0.81), 0.0], [0.5, math.sqrt(0.75), 0.0]])
    precision, recall, score = bertscore(cand, ref)
    assert abs(precision - 0.9) < 1e-9
    assert abs(recall - 0.7) < 1e-9
    assert abs(score - 0.7875) < 1e-9


def test_bertscore_swap_symmetry():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, m, d = (int(v) for v in rng.integers(1, 10, size=3))
        a = emb([f"a{i}" for i in range(n)], rng.standard_normal((n, d)))
        b = emb([f"b{j}" for j in range(m)], rng.standard_normal((m, d)))
        forward = bertscore(a, b)
        backward = bertscore(b, a)
        assert abs(forward.precision - backward.recall) < 1e-12
        assert abs(forward.recall - backward.precision) < 1e-12
        assert abs(forward.f1 - backward.f1) < 1e-12


def test_bertscore_matches_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(200):
        n, m, d = (int(v) for v in rng.integers(1, 12, size=3))
        cand = rng.standard_normal((n, d))
        ref = rng.standard_normal((m, d))
        got = bertscore(emb([f"c{i}" for i in range(n)], cand), emb([f"r{j}" for j in range(m)], ref))
        expected = reference_bertscore(cand, ref)
        assert np.allclose(tuple(got), expected, atol=1e-9), f"{tuple(got)} != {expected}"


def test_bertscore_rejects_empty():
    empty = TokenEmbeddings(tokens=(), vectors=np.zeros((0, 3)))
    try:
        bertscore(empty, emb(["a"], [[1.0, 0.0, 0.0]]))
    except ValueError:
        pass
    else:
        raise AssertionError("empty candidate should fail")


def test_cached_embeddings():
    provider = FileCacheProvider(EMBEDDINGS)
    cand = embed_tokens("Worker near edge", provider)
    ref = embed_tokens("worker near excavator", provider)
    precision, recall, _ = bertscore(cand, ref)
    assert abs(precision - 2.8 / 3) < 1e-9
    assert abs(recall - 2 / 3) < 1e-9

    weighted = bertscore(cand, ref, idf={"edge": 2.0})
    assert abs(weighted.precision - 0.9) < 1e-9

    try:
        embed_tokens("worker on scaffold", provider)
    except EmbeddingError:
        pass
    else:
        raise AssertionError("uncached token should fail")


def test_idf_weights_all_zero_fall_back_to_uniform():
    same = embed_tokens("worker near the excavator", HashedVectorProvider())
    idf = compute_idf([list(same.tokens)])
    assert all(abs(weight) < 1e-12 for weight in idf.values())
    score = bertscore(same, same, idf=idf)
    assert all(math.isfinite(value) for value in score)
    assert all(abs(value - 1.0) < 1e-9 for value in score)

    reordered = embed_tokens("the excavator near worker worker", HashedVectorProvider())
    assert bertscore(reordered, same, idf=idf) == bertscore(reordered, same)


def test_compute_idf():
    idf = compute_idf([["worker", "edge"], ["worker"], ["excavator", "worker"]])
    assert abs(idf["worker"]) < 1e-12
    assert abs(idf["edge"] - math.log(4 / 2)) < 1e-12
    assert tokenize("Worker w1, near ex1.") == ["worker", "w1", ",", "near", "ex1", "."]


def test_score_rationales_pairs_by_concatenation():
    record = load_manifest(MANIFEST).get("images/site_02.png")
    same = HazardAssessment.build(record.hazards, record.rationales)
    score = score_rationales(same, record, HashedVectorProvider(16))
    assert all(abs(value - 1.0) < 1e-9 for value in score)

    assert score_rationales(HazardAssessment.build([]), record, HashedVectorProvider(16)) is None

    partial = HazardAssessment.build(["fall_hazard"], {"fall_hazard": record.rationales["fall_hazard"]})
    text = concatenate_rationales(record.rationales)
    assert text.startswith(record.rationales["ppe_non_compliance"].strip())
    subset = score_rationales(partial, record, HashedVectorProvider(16))
    assert abs(subset.precision - 1.0) < 1e-9 and subset.recall < 1.0

    by_category = score_rationale_categories(partial, record, HashedVectorProvider(16))
    assert list(by_category) == ["fall_hazard"]
    assert all(abs(value - 1.0) < 1e-9 for value in by_category["fall_hazard"])


def test_category_scores_skip_one_sided_categories():
    record = load_manifest(MANIFEST).get("images/site_02.png")
    misfiled = HazardAssessment.build(["unsafe_environment"], {"unsafe_environment": record.rationales["fall_hazard"]})
    assert score_rationale_categories(misfiled, record, HashedVectorProvider(16)) == {}

    corpus = aggregate_category_bertscore([
        {"fall_hazard": BertScore(1.0, 0.5, 2 / 3)},
        {},
        {"fall_hazard": BertScore(0.5, 1.0, 2 / 3)},
    ])
    assert corpus["fall_hazard"]["scored"] == 2
    assert abs(corpus["fall_hazard"]["precision"] - 0.75) < 1e-12
    assert corpus["ppe_non_compliance"]["scored"] == 0 and corpus["ppe_non_compliance"]["f1"] is None


def test_aggregate_bertscore():
    result = aggregate_bertscore([BertScore(0.8, 0.6, 0.69), None, BertScore(0.6, 0.8, 0.69)], errors=1)
    assert result["scored"] == 2 and result["excluded_empty"] == 1 and result["errors"] == 1
    assert abs(result["precision"] - 0.7) < 1e-12 and abs(result["recall"] - 0.7) < 1e-12
    assert aggregate_bertscore([None])["f1"] is None


if __name__ == "__main__":
    sys.exit(run_suite("HAZARD METRICS TESTS", collect_tests(globals())))
