"""Plain-text tables rendered from report JSON."""
from typing import Dict, Optional

from .config import HAZARD_KEYS, STAGES

RULE = "=" * 60


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value * 100:.1f}"


def _num(value: Optional[float], digits: int = 2) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _signed(value: Optional[float], digits: int) -> str:
    return "n/a" if value is None else f"{value:+.{digits}f}"


def render_hazard_metrics(hazards: Dict) -> str:
    lines = [
        f"{'Category':<24}{'P (%)':>10}{'R (%)':>10}{'F1 (%)':>10}",
        "-" * 54,
    ]
    for key in HAZARD_KEYS:
        row = hazards["per_category"][key]
        lines.append(f"{key:<24}{_pct(row['precision']):>10}{_pct(row['recall']):>10}{_pct(row['f1']):>10}")
    lines.append("-" * 54)
    for scope in ("micro", "macro"):
        row = hazards[scope]
        lines.append(f"{scope:<24}{_pct(row['precision']):>10}{_pct(row['recall']):>10}{_pct(row['f1']):>10}")
    if hazards.get("flags"):
        lines.append(f"Flags: {', '.join(hazards['flags'])}")
    return "\n".join(lines)


def render_run_report(report: Dict) -> str:
    run = report["run"]
    corpus = report["corpus"]
    timing = report.get("timing", {})
    lines = [
        RULE,
        f"Hazard assessment run: {run['mode']} ({run['template']})",
        RULE,
        f"Model:        {run['model_name']} (temperature={run['temperature']}, max_tokens={run['max_tokens']})",
        f"Images:       {run['images']} ({report['errors']['scored']} scored, {report['errors']['count']} errors)",
        "",
        render_hazard_metrics(corpus["hazards"]),
    ]
    bert = corpus.get("bertscore")
    if bert:
        lines += [
            "",
            f"BERTScore:    P={_num(bert['precision'])} R={_num(bert['recall'])} F1={_num(bert['f1'])} "
            f"({bert['scored']} scored, {bert['excluded_empty']} excluded, {bert['errors']} errors)",
        ]
    if corpus.get("grounding_rate") is not None:
        lines.append(f"Grounding:    {corpus['grounding_rate'] * 100:.1f}% of detected entities referenced")
    if timing:
        lines += ["", f"{'Stage':<14}{'mean (ms)':>12}{'p50 (ms)':>12}{'p95 (ms)':>12}"]
        for stage in STAGES + ["total"]:
            stats = timing["stages"][stage]
            lines.append(
                f"{stage:<14}{_num(stats['mean_ms'], 3):>12}{_num(stats['p50_ms'], 3):>12}{_num(stats['p95_ms'], 3):>12}"
            )
        lines.append(f"FPS:          {_num(timing.get('fps'))}")
    if report["errors"]["by_type"]:
        lines.append(f"Errors:       {report['errors']['by_type']}")
    lines.append(RULE)
    return "\n".join(lines) + "\n"


def render_comparison(comparison: Dict) -> str:
    """Baseline / proposed / improvement table."""
    a, b = comparison["a"], comparison["b"]
    lines = [
        RULE,
        f"{a['mode']} vs {b['mode']} over {comparison['images']} images",
        RULE,
        f"{'Metric':<22}{'Baseline':>12}{'Proposed':>12}{'Improvement':>14}",
        "-" * 60,
    ]
    for row in comparison["rows"]:
        digits = 1 if row["unit"] == "%" else 2
        unit = " pp" if row["unit"] == "%" else ""
        lines.append(
            f"{row['metric']:<22}{_num(row['a'], digits):>12}{_num(row['b'], digits):>12}"
            f"{_signed(row['delta'], digits) + unit:>14}"
        )
    lines.append(RULE)
    return "\n".join(lines) + "\n"


def render_bench(result: Dict) -> str:
    lines = [
        RULE,
        f"Throughput over {result['images']} images x {result['repeats']} repeats (warmup {result['warmup']})",
        RULE,
        f"{'Stage':<14}{'baseline (ms)':>16}{'guided (ms)':>16}{'overhead (ms)':>16}",
    ]
    for stage in STAGES + ["total"]:
        base = result["modes"]["baseline"]["stages"][stage]["mean_ms"]
        guided = result["modes"]["detection_guided"]["stages"][stage]["mean_ms"]
        overhead = result["overhead_ms"]["by_stage"].get(stage)
        lines.append(f"{stage:<14}{_num(base, 3):>16}{_num(guided, 3):>16}{_signed(overhead, 3):>16}")
    lines += [
        "-" * 62,
        f"FPS:            baseline={_num(result['modes']['baseline']['fps']['mean'])} "
        f"guided={_num(result['modes']['detection_guided']['fps']['mean'])}",
        f"Overhead/image: {_num(result['overhead_ms']['total'], 3)} ms "
        f"(detect+encode {_num(result['overhead_ms']['detect_plus_encode'], 3)} ms)",
        RULE,
    ]
    return "\n".join(lines) + "\n"


def render_detection_report(report: Dict) -> str:
    thresholds = report.get("map_alphas_thresholds", [])
    lines = [
        RULE,
        f"Detection evaluation over {report['images']} images",
        RULE,
        f"{'Class':<18}{'GT':>6}{'P@0.5':>9}{'R@0.5':>9}{'AP@0.5':>9}",
    ]
    for name, row in report["per_class"].items():
        ap50 = row["ap"].get(str(report["pr_threshold"]))
        lines.append(
            f"{name:<18}{row['ground_truth']:>6}{_pct(row['precision']):>9}{_pct(row['recall']):>9}{_pct(ap50):>9}"
        )
    lines += [
        "-" * 51,
        f"mAP over {thresholds}: {_pct(report.get('map_alphas'))}",
        f"mAP@0.5:            {_pct(report.get('map50'))}",
        f"mAP@0.5:0.95:       {_pct(report.get('map50_95'))}",
    ]
    if report.get("flags"):
        lines.append(f"Flags: {', '.join(report['flags'])}")
    shortfalls = (report.get("matching_discrepancies") or {}).get("count", 0)
    if shortfalls:
        lines.append(f"Greedy matching below maximum in {shortfalls} image/class/alpha cases")
    lines.append(RULE)
    return "\n".join(lines) + "\n"
