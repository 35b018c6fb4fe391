"""Local-disk storage for run reports."""
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
SUMMARY_FILE = "report.txt"


class ReportStorage:
    """Stores each run under `<base_dir>/<run_id>/` as report.json plus a text summary."""

    def __init__(self, base_dir: Path):
        """Initialize report storage.

        Args:
            base_dir: Directory that holds one subdirectory per run
        """
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Report storage initialized: {self.base_dir}")

    @staticmethod
    def new_run_id(mode: str, now: Optional[datetime] = None) -> str:
        timestamp = (now or datetime.now(timezone.utc)).strftime("%Y%m%dT%H%M%S%f")
        return f"{mode}-{timestamp}"

    def store_report(self, run_id: str, report: Dict, summary: Optional[str] = None) -> Path:
        """Write the report JSON (and optional rendered summary) atomically.

        Args:
            run_id: Run directory name
            report: Report dictionary
            summary: Human-readable rendering of the same report

        Returns:
            Path of the stored report.json
        """
        run_dir = self.base_dir / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / REPORT_FILE
        tmp_path = run_dir / f"{REPORT_FILE}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        os.replace(tmp_path, path)
        if summary is not None:
            with open(run_dir / SUMMARY_FILE, "w", encoding="utf-8") as f:
                f.write(summary)
        logger.info(f"Stored report for {run_id}: {path}")
        return path


def load_report(path: Path) -> Dict:
    """Load a report from a report.json path or a run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILE
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
