#!/usr/bin/env python3
"""Command-line entrypoint: run, bench, compare, evaluate, annotate, validate, split."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from storage.manifest_store import (
    Manifest,
    SplitSpec,
    load_manifest,
    record_validation_verdict,
    save_manifest,
    split_dataset,
)
from storage.report_storage import load_report
from vlm.client import create_client
from vlm.embeddings import create_embedder

from .annotator import annotate_images, list_images
from .bench import bench
from .config import (
    LOG_LEVEL,
    MAP_THRESHOLDS,
    MODE_ALIASES,
    DetectorConfig,
    InferenceConfig,
    RunConfig,
    load_config_file,
)
from .detection import load_class_list
from .detection_metrics import evaluate_detection_corpus
from .errors import ConfigurationError, HazguardError, ManifestError
from .orchestrator import compare_reports, evaluate_responses, run_pipeline
from .reporting import render_bench, render_comparison, render_detection_report, render_hazard_metrics
from .response_parser import HazardAssessment, render_assessment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2

DETECTOR_ALIASES = {"embedded": "embedded_model", "embedded_model": "embedded_model", "files": "files", "http": "http"}


def _add_inference_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--endpoint", help="Multimodal inference endpoint base URL")
    parser.add_argument("--vlm-model", help="Model name sent to the endpoint")
    parser.add_argument("--temperature", type=float, help="Sampling temperature")
    parser.add_argument("--max-tokens", type=int, help="Maximum output tokens")
    parser.add_argument("--timeout", type=float, help="Request timeout in seconds")
    parser.add_argument("--max-retries", type=int, help="Retries for transient endpoint failures")
    parser.add_argument("--backend", choices=["live", "replay", "record"], help="Inference backend")
    parser.add_argument("--transcripts", help="Transcript directory for replay/record backends")


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=sorted(MODE_ALIASES), help="Prompting configuration")
    parser.add_argument("--manifest", help="Evaluation manifest (JSONL)")
    parser.add_argument("--images", help="Image root (defaults to the manifest's directory)")
    parser.add_argument("--detector", choices=sorted(DETECTOR_ALIASES), help="Detector backend")
    parser.add_argument("--model", help="Serialized detector network (embedded backend)")
    parser.add_argument("--detections", help="Directory of per-image detection JSON (files backend)")
    parser.add_argument("--detector-endpoint", help="Detection service URL (http backend)")
    parser.add_argument("--classes", help="Class list file, one class name per line")
    parser.add_argument("--score-threshold", type=float, help="Detection confidence threshold")
    parser.add_argument("--input-size", type=int, help="Detector input size in pixels")
    parser.add_argument("--sessions", type=int, help="Embedded detector session pool size")
    parser.add_argument("--output-layout", choices=["auto", "channels_first", "rows", "end_to_end"],
                        help="Output head layout of the embedded detector (default: from model metadata)")
    parser.add_argument("--template", help="Prompt template file")
    parser.add_argument("--strict-parse", "--strict", dest="strict", action="store_true", default=None, help="Strict response parsing")
    parser.add_argument("--parallel", type=int, help="Worker count")
    parser.add_argument("--score-rationales", action="store_true", default=None, help="Compute BERTScore")
    parser.add_argument("--embeddings-cache", help="Token embedding cache file")
    parser.add_argument("--embeddings-endpoint", help="Token embedding endpoint")
    parser.add_argument("--idf", action="store_true", default=None, help="IDF-weight BERTScore")
    parser.add_argument("--time-detector-in-baseline", action="store_true", default=None,
                        help="Run (and time) the detector in baseline mode without using its output")
    parser.add_argument("--save-detections", help="Write each image's detections as JSON to this directory")
    parser.add_argument("--out", help="Output directory for reports")
    _add_inference_args(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazguard", description="Detection-guided construction hazard assessment")
    parser.add_argument("--config", help="YAML file whose keys mirror the command-line flags")
    parser.add_argument("--log-level", help="Logging level (default from HAZGUARD_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one configuration over a manifest")
    _add_run_args(run)

    bench_parser = sub.add_parser("bench", help="Benchmark baseline vs guided throughput")
    _add_run_args(bench_parser)
    bench_parser.add_argument("--repeats", type=int, default=3, help="Measured passes per mode")
    bench_parser.add_argument("--warmup", type=int, help="Discarded passes per mode")

    compare = sub.add_parser("compare", help="Compare two run reports")
    compare.add_argument("report_a", help="Baseline report (report.json or run directory)")
    compare.add_argument("report_b", help="Proposed report (report.json or run directory)")
    compare.add_argument("--out", help="Write the comparison JSON here")

    eval_det = sub.add_parser("eval-detections", help="Score detection files against YOLO-format labels")
    eval_det.add_argument("--predictions", "--preds", dest="predictions", required=True, help="Directory of per-image detection JSON")
    eval_det.add_argument("--labels", required=True, help="Directory of label .txt files")
    eval_det.add_argument("--classes", required=True, help="Class list file")
    eval_det.add_argument("--alphas", help="Comma-separated IoU thresholds for mAP")
    eval_det.add_argument("--out", help="Write the report JSON here")

    eval_haz = sub.add_parser("eval-hazards", help="Score stored model responses against a manifest")
    eval_haz.add_argument("--manifest", required=True, help="Evaluation manifest")
    eval_haz.add_argument("--responses", required=True, help="JSONL of {image, response}")
    eval_haz.add_argument("--embeddings-cache", help="Token embedding cache file")
    eval_haz.add_argument("--embeddings-endpoint", help="Token embedding endpoint")
    eval_haz.add_argument("--idf", action="store_true", default=None, help="IDF-weight BERTScore with manifest rationales")
    eval_haz.add_argument("--strict-parse", "--strict", dest="strict", action="store_true", default=None, help="Strict response parsing")
    eval_haz.add_argument("--out", help="Write the report JSON here")

    annotate = sub.add_parser("annotate", help="Generate annotation drafts for a directory of images")
    annotate.add_argument("--images", required=True, help="Image directory")
    annotate.add_argument("--out", required=True, help="Manifest to append drafts to")
    annotate.add_argument("--source", choices=["historical_inspection", "public_dataset"], default="public_dataset")
    _add_inference_args(annotate)

    validate = sub.add_parser("validate", help="Record a validation verdict for a draft")
    validate.add_argument("--manifest", required=True, help="Manifest file")
    validate.add_argument("--record", required=True, help="Image reference of the record")
    validate.add_argument("--verdict", required=True, choices=["validated", "revised", "rejected"])
    validate.add_argument("--annotator", required=True, help="Annotator id")
    validate.add_argument("--set-hazards", help="Corrected comma-separated hazard keys")
    validate.add_argument("--set-rationale", action="append", default=[], metavar="KEY=TEXT",
                          help="Corrected rationale for one hazard (repeatable)")

    split = sub.add_parser("split", help="Split a manifest into train/val/test manifests")
    split.add_argument("--manifest", required=True, help="Manifest file")
    split.add_argument("--out", required=True, help="Output directory")
    split.add_argument("--train", type=float, default=0.7)
    split.add_argument("--val", type=float, default=0.2)
    split.add_argument("--test", type=float, default=0.1)
    split.add_argument("--seed", type=int, default=0)
    return parser


def _option_table(parser: argparse.ArgumentParser, command: str) -> tuple[dict, set]:
    """Config keys accepted by `command` mapped to their argparse dest, plus every key any command accepts."""
    accepted: dict = {}
    known: set = set()

    def add(actions, table):
        for action in actions:
            if isinstance(action, argparse._SubParsersAction) or not action.option_strings:
                continue
            for option in action.option_strings:
                if option.startswith("--"):
                    key = option[2:].replace("-", "_")
                    known.add(key)
                    if table is not None:
                        table[key] = action.dest

    add(parser._actions, accepted)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                add(sub._actions, accepted if name == command else None)
    known.discard("help")
    accepted.pop("help", None)
    accepted.pop("config", None)
    return accepted, known


def merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill flags the user did not give from the --config file.

    Keys are flag names in either spelling (`strict-parse`, `strict_parse`).
    Keys no subcommand accepts are rejected; keys for other subcommands are ignored.
    """
    accepted, known = _option_table(parser, args.command)
    for key, value in load_config_file(args.config).items():
        if key not in known:
            raise ConfigurationError(f"Unknown config key '{key}' in {args.config}")
        dest = accepted.get(key)
        if dest is None:
            logger.debug(f"Config key '{key}' does not apply to '{args.command}'")
            continue
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    return args


def _opt(**values) -> dict:
    return {key: value for key, value in values.items() if value is not None}


def inference_config(args: argparse.Namespace, annotation: bool = False) -> InferenceConfig:
    values = _opt(
        endpoint=args.endpoint,
        model_name=args.vlm_model,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        timeout=args.timeout,
        max_retries=args.max_retries,
    )
    return InferenceConfig.annotation(**values) if annotation else InferenceConfig(**values)


def detector_config(args: argparse.Namespace) -> Optional[DetectorConfig]:
    if not args.detector:
        return None
    values = _opt(
        model_path=args.model,
        files_dir=args.detections,
        endpoint=args.detector_endpoint,
        input_size=args.input_size,
        score_threshold=args.score_threshold,
        sessions=args.sessions,
        output_layout=args.output_layout,
    )
    if args.classes:
        values["class_list"] = [cls.value for cls in load_class_list(Path(args.classes))]
    return DetectorConfig(backend=DETECTOR_ALIASES[args.detector], **values)


def run_config(args: argparse.Namespace) -> RunConfig:
    if not args.mode:
        raise ConfigurationError("--mode is required")
    if not args.manifest:
        raise ConfigurationError("--manifest is required")
    values = _opt(
        backend=args.backend,
        transcripts_dir=args.transcripts,
        images_dir=args.images,
        template_path=args.template,
        strict_parse=args.strict,
        parallelism=args.parallel,
        score_rationales=args.score_rationales,
        embeddings_cache=args.embeddings_cache,
        embeddings_endpoint=args.embeddings_endpoint,
        idf=args.idf,
        time_detector_in_baseline=args.time_detector_in_baseline,
        save_detections_dir=args.save_detections,
    )
    return RunConfig(
        mode=MODE_ALIASES[args.mode],
        manifest_path=Path(args.manifest),
        output_dir=Path(args.out or "reports"),
        vlm=inference_config(args),
        detector=detector_config(args),
        **values,
    )


def _write_json(path: Optional[str], data: dict) -> None:
    if not path:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    print(f"\nResults saved to {path}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    report = run_pipeline(cfg)
    hazards = report["corpus"]["hazards"]
    print(render_hazard_metrics(hazards))
    errors = report["errors"]["count"]
    if errors:
        print(f"✗ {errors} images failed: {report['errors']['by_type']}")
        return EXIT_PARTIAL
    print(f"✓ {report['errors']['scored']} images scored")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    kwargs = {} if args.warmup is None else {"warmup": args.warmup}
    result = bench(cfg, args.repeats, **kwargs)
    print(render_bench(result))
    _write_json(str(Path(args.out) / "bench.json") if args.out else None, result)
    errors = sum(mode["errors"] for mode in result["modes"].values())
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    comparison = compare_reports(load_report(Path(args.report_a)), load_report(Path(args.report_b)))
    print(render_comparison(comparison))
    _write_json(args.out, comparison)
    return EXIT_OK


def cmd_eval_detections(args: argparse.Namespace) -> int:
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else MAP_THRESHOLDS
    report = evaluate_detection_corpus(Path(args.predictions), Path(args.labels), Path(args.classes), alphas)
    print(render_detection_report(report))
    _write_json(args.out, report)
    return EXIT_OK


def cmd_eval_hazards(args: argparse.Namespace) -> int:
    embedder = None
    if args.embeddings_cache or args.embeddings_endpoint:
        embedder = create_embedder(args.embeddings_cache, args.embeddings_endpoint)
    report = evaluate_responses(Path(args.manifest), Path(args.responses), embedder, bool(args.strict), bool(args.idf))
    print(render_hazard_metrics(report["hazards"]))
    if report["bertscore"]:
        bert = report["bertscore"]
        print(f"BERTScore: P={bert['precision']} R={bert['recall']} F1={bert['f1']}")
    _write_json(args.out, report)
    return EXIT_OK


def cmd_annotate(args: argparse.Namespace) -> int:
    cfg = inference_config(args, annotation=True)
    backend = args.backend or "live"
    client = create_client(backend, Path(args.transcripts) if args.transcripts else None)
    images_root = Path(args.images)
    summary = annotate_images(list_images(images_root), images_root, Path(args.out), client, cfg, args.source)
    print(f"Drafted {summary['drafted']} records, skipped {summary['skipped']}")
    if summary["errors"]:
        print(f"✗ {len(summary['errors'])} images failed")
        return EXIT_PARTIAL
    return EXIT_OK


def _parse_rationales(items: list) -> dict:
    rationales = {}
    for item in items:
        key, sep, text = item.partition("=")
        if not sep or not text.strip():
            raise ValueError(f"Expected KEY=TEXT, got {item!r}")
        rationales[key.strip()] = text.strip()
    return rationales


def cmd_validate(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    record = manifest.get(args.record)
    edited = {}
    if args.set_hazards is not None:
        edited["hazards"] = [key.strip() for key in args.set_hazards.split(",") if key.strip()]
    if args.set_rationale:
        edited["rationales"] = _parse_rationales(args.set_rationale)
    updated = record_validation_verdict(record, args.verdict, args.annotator, edited or None)
    manifest.upsert(updated)
    save_manifest(manifest, manifest_path)
    print(f"✓ {args.record}: {record.validation} -> {updated.validation}")
    print(render_assessment(HazardAssessment.build(updated.hazards, updated.rationales)))
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    manifest = load_manifest(Path(args.manifest))
    spec = SplitSpec(train_frac=args.train, val_frac=args.val, test_frac=args.test, seed=args.seed)
    out_dir = Path(args.out)
    for name, records in zip(("train", "val", "test"), split_dataset(manifest.records, spec)):
        part = Manifest(records=records, version=manifest.version, category_vocabulary=manifest.category_vocabulary)
        save_manifest(part, out_dir / f"{name}.jsonl")
        print(f"{name}: {len(records)} records")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "bench": cmd_bench,
    "compare": cmd_compare,
    "eval-detections": cmd_eval_detections,
    "eval-hazards": cmd_eval_hazards,
    "annotate": cmd_annotate,
    "validate": cmd_validate,
    "split": cmd_split,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = merge_config(args, parser)
    except (OSError, ValueError, ConfigurationError) as e:
        print(f"✗ Cannot read config file: {e}", file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(
        level=(args.log_level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return COMMANDS[args.command](args)
    except ManifestError as e:
        for diagnostic in e.diagnostics:
            print(f"  {diagnostic}", file=sys.stderr)
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, ValidationError) as e:
        print(f"✗ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (HazguardError, ValueError, KeyError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"✗ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
