"""End-to-end pipeline tests over the fixture manifest.

Model answers come from replayed transcripts, recorded once per suite from
the scripted responses in fixtures/responses.yaml.
"""
import shutil
import sys
import tempfile
from functools import lru_cache
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from hazguard.bench import bench
from hazguard.config import STAGES
from hazguard.errors import ConfigurationError, EndpointError
from hazguard.orchestrator import PipelineRunner, compare_reports, run_pipeline, strip_timing
from hazguard.prompts import default_template_path
from hazguard.reporting import render_bench, render_comparison, render_run_report
from storage.report_storage import load_report
from vlm.client import VLMClient
from vlm.embeddings import FileCacheProvider

from fakes import FIXTURES, FailingBackend, FixedBackend, HashedVectorProvider, SlowFilesDetector, files_detector_config, record_transcripts, run_config
from harness import collect_tests, run_suite

WORK = Path(tempfile.mkdtemp(prefix="hazguard-pipeline-"))


@lru_cache(maxsize=1)
def transcripts() -> Path:
    return record_transcripts(WORK / "transcripts")


def replay_config(mode: str, name: str, **overrides):
    return run_config(mode, WORK / name, backend="replay", transcripts_dir=transcripts(), **overrides)


def by_image(report: dict) -> dict:
    return {item["image"]: item for item in report["per_image"]}


def synthetic_report(mode: str, images: list, micro_p: float, bert_f1: float, fps: float) -> dict:
    scores = {"precision": micro_p, "recall": 0.5, "f1": 0.5}
    return {
        "run": {"mode": mode, "template": f"{mode}.v1.txt"},
        "per_image": [{"image": image} for image in images],
        "corpus": {
            "hazards": {"micro": dict(scores), "macro": dict(scores)},
            "bertscore": {"precision": 0.8, "recall": 0.8, "f1": bert_f1},
        },
        "timing": {"fps": fps},
    }


def test_replay_is_deterministic():
    first = run_pipeline(replay_config("detection_guided", "det_a"), persist=False)
    second = run_pipeline(replay_config("detection_guided", "det_b"), persist=False)
    assert first["errors"]["count"] == 0
    assert strip_timing(first) == strip_timing(second)
    assert "timing" in first and "timing" not in strip_timing(first)


def test_parallelism_does_not_change_results():
    serial = run_pipeline(replay_config("detection_guided", "par_1", parallelism=1), persist=False)
    parallel = run_pipeline(replay_config("detection_guided", "par_4", parallelism=4), persist=False)
    assert strip_timing(serial) == strip_timing(parallel)
    assert [item["image"] for item in parallel["per_image"]] == [
        "images/site_01.png", "images/site_02.png", "images/site_03.png", "images/site_04.png",
    ]
    assert parallel["timing"]["parallelism"] == 4


def test_baseline_corpus_metrics():
    report = run_pipeline(replay_config("baseline", "baseline"), persist=False)
    micro = report["corpus"]["hazards"]["micro"]
    assert (micro["tp"], micro["fp"], micro["fn"]) == (3, 4, 4)
    for metric in ("precision", "recall", "f1"):
        assert abs(micro[metric] - 3 / 7) < 1e-12
    assert report["corpus"]["grounding_rate"] is None
    assert all(item["detections"] is None for item in report["per_image"])
    assert report["run"]["template"] == "baseline.v1.txt"
    site_03 = by_image(report)["images/site_03.png"]["assessment"]["categories"]
    assert site_03 == ["ppe_non_compliance", "fall_hazard"]


def test_guided_corpus_metrics():
    report = run_pipeline(replay_config("detection_guided", "guided"), persist=False)
    micro = report["corpus"]["hazards"]["micro"]
    assert (micro["tp"], micro["fp"], micro["fn"]) == (7, 0, 0)
    assert micro["f1"] == 1.0
    assert report["corpus"]["grounding_rate"] == 1.0

    images = by_image(report)
    assert images["images/site_01.png"]["detections"]["identifiers"] == ["w1", "ex1"]
    assert images["images/site_03.png"]["detections"]["identifiers"] == ["w1", "w2", "w3", "w4"]
    assert images["images/site_04.png"]["detections"]["by_class"] == {"Worker": 3}
    assert images["images/site_04.png"]["grounding"] == {"available": 3, "mentioned": ["w1", "w2", "w3"]}


def test_corpus_matches_per_image_counts():
    report = run_pipeline(replay_config("detection_guided", "consistency"), persist=False)
    for field in ("tp", "fp", "fn"):
        total = sum(item["counts"][field] for item in report["per_image"])
        assert total == report["corpus"]["hazards"]["micro"][field]
    per_category = report["corpus"]["hazards"]["per_category"]
    assert sum(row["tp"] for row in per_category.values()) == report["corpus"]["hazards"]["micro"]["tp"]


def test_prompts_differ_between_modes():
    baseline = by_image(run_pipeline(replay_config("baseline", "digest_b"), persist=False))
    guided = by_image(run_pipeline(replay_config("detection_guided", "digest_g"), persist=False))
    for image in baseline:
        assert baseline[image]["prompt_digest"] != guided[image]["prompt_digest"]
        assert baseline[image]["template_version"] == guided[image]["template_version"] == "v1"


def test_timing_section():
    report = run_pipeline(replay_config("detection_guided", "timing"), persist=False)
    timing = report["timing"]
    assert set(timing["stages"]) == set(STAGES + ["total", "unaccounted"])
    assert all(timing["stages"][stage]["count"] == 4 for stage in STAGES)
    # replayed transcripts keep the recorded endpoint latency
    assert abs(timing["vlm_reported"]["mean_ms"] - 250.0) < 1e-6
    for timings in timing["per_image"].values():
        staged = sum(timings[stage] for stage in STAGES)
        assert staged <= timings["total"] + 1e-9
    assert timing["wall_seconds"] > 0


def test_time_detector_in_baseline():
    plain = by_image(run_pipeline(replay_config("baseline", "timed_plain"), persist=False))
    detector = SlowFilesDetector(files_detector_config(), delay=0.005)
    cfg = replay_config("baseline", "timed_detector", time_detector_in_baseline=True)
    report = run_pipeline(cfg, detector=detector, persist=False)
    assert report["errors"]["count"] == 0
    assert report["timing"]["stages"]["detect"]["mean_ms"] >= 5.0
    for image, item in by_image(report).items():
        assert item["prompt_digest"] == plain[image]["prompt_digest"]
        assert item["detections"] is None


def test_report_is_persisted():
    runner = PipelineRunner(replay_config("detection_guided", "persisted"))
    report = runner.run()
    assert runner.run_id.startswith("detection_guided-")
    assert runner.report_path.exists()
    stored = load_report(runner.report_path.parent)
    assert strip_timing(stored) == strip_timing(report)
    summary = (runner.report_path.parent / "report.txt").read_text(encoding="utf-8")
    assert summary == render_run_report(report)
    assert "Hazard assessment run: detection_guided" in summary


def test_failures_are_tallied():
    backend = FailingBackend({"images/site_02.png"}, EndpointError("Giving up after 3 retries"))
    report = run_pipeline(
        run_config("baseline", WORK / "failing"), client=VLMClient(backend), persist=False
    )
    assert report["errors"] == {"count": 1, "scored": 3, "by_type": {"EndpointError": 1}}
    failed = by_image(report)["images/site_02.png"]
    assert failed["status"] == "error" and "Giving up" in failed["error"]
    assert report["corpus"]["hazards"]["images"] == 3
    assert "images/site_02.png" not in report["timing"]["per_image"]


def test_replay_misses_are_per_image_errors():
    empty = WORK / "empty_transcripts"
    empty.mkdir(exist_ok=True)
    cfg = run_config("baseline", WORK / "misses", backend="replay", transcripts_dir=empty)
    report = run_pipeline(cfg, persist=False)
    assert report["errors"]["by_type"] == {"ReplayMissError": 4}
    assert report["corpus"]["hazards"]["flags"] == ["empty_corpus"]


def test_configuration_errors_abort_before_processing():
    backend = FixedBackend()
    guided_with_baseline_template = run_config(
        "detection_guided", WORK / "bad_template", template_path=default_template_path("baseline")
    )
    no_embedder = run_config("baseline", WORK / "no_embedder", score_rationales=True)
    for cfg in (guided_with_baseline_template, no_embedder):
        try:
            PipelineRunner(cfg, client=VLMClient(backend))
        except ConfigurationError:
            continue
        raise AssertionError(f"{cfg.output_dir.name} should fail")
    assert backend.prompts == []

    try:
        run_config("detection_guided", WORK / "no_detector", detector=None)
    except ValueError:
        pass
    else:
        raise AssertionError("guided run without a detector should fail")


def test_rationale_scoring():
    cfg = replay_config("detection_guided", "bertscore", score_rationales=True, idf=True)
    report = run_pipeline(cfg, embedder=HashedVectorProvider(32), persist=False)
    bert = report["corpus"]["bertscore"]
    assert bert["scored"] == 4 and bert["errors"] == 0 and bert["excluded_empty"] == 0
    assert 0.0 < bert["f1"] <= 1.0
    assert report["run"]["idf"] is True
    for item in report["per_image"]:
        assert set(item["bertscore"]) == {"precision", "recall", "f1"}


def test_embedding_failures_do_not_fail_images():
    cfg = replay_config("detection_guided", "bertscore_missing", score_rationales=True)
    report = run_pipeline(cfg, embedder=FileCacheProvider(FIXTURES / "embeddings.json"), persist=False)
    assert report["errors"]["count"] == 0
    bert = report["corpus"]["bertscore"]
    assert bert["errors"] == 4 and bert["scored"] == 0 and bert["f1"] is None
    assert all("bertscore_error" in item for item in report["per_image"])


def test_compare_reports():
    images = ["images/a.png", "images/b.png"]
    baseline = synthetic_report("baseline", images, micro_p=0.437, bert_f1=0.62, fps=2.0)
    guided = synthetic_report("detection_guided", list(reversed(images)), micro_p=0.598, bert_f1=0.81, fps=1.5)
    comparison = compare_reports(baseline, guided)
    rows = {row["metric"]: row for row in comparison["rows"]}
    assert rows["micro_precision"] == {"metric": "micro_precision", "unit": "%", "a": 43.7, "b": 59.8, "delta": 16.1}
    assert rows["bertscore_f1"]["delta"] == 0.19
    assert rows["fps"]["delta"] == -0.5
    assert comparison["images"] == 2
    rendered = render_comparison(comparison)
    assert "+16.1 pp" in rendered and "+0.19" in rendered

    try:
        compare_reports(baseline, synthetic_report("detection_guided", ["images/a.png"], 0.5, 0.5, 1.0))
    except ValueError:
        pass
    else:
        raise AssertionError("different image sets should fail")


def test_compare_real_runs():
    baseline = run_pipeline(replay_config("baseline", "cmp_b"), persist=False)
    guided = run_pipeline(replay_config("detection_guided", "cmp_g"), persist=False)
    rows = {row["metric"]: row for row in compare_reports(baseline, guided)["rows"]}
    assert rows["micro_f1"]["a"] == 42.9 and rows["micro_f1"]["b"] == 100.0
    assert rows["micro_f1"]["delta"] == 57.1
    assert rows["bertscore_f1"]["delta"] is None


def test_bench_overhead_is_detection_and_encoding():
    client = VLMClient(FixedBackend())
    detector = SlowFilesDetector(files_detector_config(), delay=0.02)
    result = bench(run_config("detection_guided", WORK / "bench"), repeats=2, warmup=1, client=client, detector=detector)
    assert result["images"] == 4 and result["repeats"] == 2

    baseline = result["modes"]["baseline"]
    guided = result["modes"]["detection_guided"]
    assert baseline["stages"]["detect"]["mean_ms"] == 0.0
    assert guided["stages"]["detect"]["count"] == 8
    assert guided["stages"]["detect"]["mean_ms"] >= 20.0
    assert guided["stages"]["encode"]["mean_ms"] < 1.0

    overhead = result["overhead_ms"]
    assert abs(overhead["total"] - overhead["detect_plus_encode"]) <= 0.02 * overhead["total"]
    unaccounted = guided["stages"]["unaccounted"]["mean_ms"]
    assert unaccounted / guided["stages"]["total"]["mean_ms"] < 0.02
    assert "Overhead/image" in render_bench(result)

    for repeats, warmup in ((0, 1), (1, -1)):
        try:
            bench(run_config("detection_guided", WORK / "bench"), repeats=repeats, warmup=warmup, client=client, detector=detector)
        except ValueError:
            continue
        raise AssertionError(f"repeats={repeats}, warmup={warmup} should fail")


def test_bench_with_explicit_template_pairs_modes():
    client = VLMClient(FixedBackend())
    guided = default_template_path("detection_guided")
    result = bench(run_config("detection_guided", WORK / "bench", template_path=guided), repeats=1, warmup=0, client=client)
    assert result["modes"]["detection_guided"]["template"] == "guided.v1.txt"
    assert result["modes"]["baseline"]["template"] == "baseline.v1.txt"
    assert all(result["modes"][mode]["errors"] == 0 for mode in result["modes"])

    custom_dir = WORK / "custom_templates"
    custom_dir.mkdir(parents=True, exist_ok=True)
    shutil.copy(default_template_path("baseline"), custom_dir / "baseline.v9.txt")
    result = bench(
        run_config("baseline", WORK / "bench", template_path=custom_dir / "baseline.v9.txt"),
        repeats=1, warmup=0, client=client,
    )
    assert result["modes"]["baseline"]["template"] == "baseline.v9.txt"
    assert result["modes"]["detection_guided"]["template"] == "guided.v1.txt"


if __name__ == "__main__":
    try:
        exit_code = run_suite("PIPELINE END-TO-END TESTS", collect_tests(globals()))
    finally:
        shutil.rmtree(WORK, ignore_errors=True)
    sys.exit(exit_code)
