"""Exception types raised across the pipeline."""
from typing import Iterable


class HazguardError(Exception):
    """Base class for pipeline errors."""


class ConfigurationError(HazguardError):
    """Invalid or inconsistent configuration; aborts before processing."""


class BoxError(HazguardError, ValueError):
    """Bounding box outside the image or with invalid geometry."""


class RetryableEndpointError(HazguardError):
    """Transient endpoint failure (timeout, connection reset, 5xx, 429)."""


class EndpointError(HazguardError):
    """Terminal endpoint failure after retries were exhausted."""


class ReplayMissError(HazguardError):
    """No stored transcript for the request digest."""


class EmbeddingError(HazguardError):
    """Embedding provider failed to produce token vectors."""


class DetectorError(HazguardError):
    """Base class for detector backend failures."""


class ImageDecodeError(DetectorError):
    pass


class DetectionFileMissingError(DetectorError):
    pass


class ModelLoadError(DetectorError):
    pass


class DetectorEndpointError(DetectorError):
    pass


class ManifestError(HazguardError):
    """Manifest failed validation; carries one diagnostic per offending record."""

    def __init__(self, path: str, diagnostics: Iterable[str]):
        self.path = path
        self.diagnostics = list(diagnostics)
        summary = "; ".join(self.diagnostics[:5])
        more = f" (+{len(self.diagnostics) - 5} more)" if len(self.diagnostics) > 5 else ""
        super().__init__(f"Invalid manifest {path}: {summary}{more}")
