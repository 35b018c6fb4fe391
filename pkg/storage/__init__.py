"""Storage package."""
from .manifest_store import HazardRecord, Manifest, SplitSpec, load_manifest, save_manifest
from .report_storage import ReportStorage, load_report

__all__ = [
    "HazardRecord",
    "Manifest",
    "SplitSpec",
    "load_manifest",
    "save_manifest",
    "ReportStorage",
    "load_report",
]
