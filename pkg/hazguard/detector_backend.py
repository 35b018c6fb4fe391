"""Detector backends: embedded network, precomputed files, or an HTTP endpoint."""
import io
import json
import logging
import queue
import time
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import requests
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field

from .config import LETTERBOX_FILL, DetectorConfig
from .detection import BoundingBox, Detection, ObjectClass, detections_from_json, filter_detections
from .errors import (
    BoxError,
    DetectionFileMissingError,
    DetectorEndpointError,
    ImageDecodeError,
    ModelLoadError,
)

logger = logging.getLogger(__name__)

NMS_IOU_THRESHOLD = 0.45
OUTPUT_LAYOUTS = ("channels_first", "rows", "end_to_end")


class TimedDetections(BaseModel):
    model_config = ConfigDict(frozen=True)

    detections: list[Detection] = Field(default_factory=list)
    detect_latency: float = Field(default=0.0, ge=0)


class Letterbox(BaseModel):
    """Aspect-preserving resize onto a square canvas, with its inverse."""

    model_config = ConfigDict(frozen=True)

    img_w: float = Field(gt=0)
    img_h: float = Field(gt=0)
    target: int = Field(gt=0)
    scale: float = Field(gt=0)
    pad_x: float = Field(ge=0)
    pad_y: float = Field(ge=0)

    @property
    def resized_size(self) -> tuple[int, int]:
        return max(1, round(self.img_w * self.scale)), max(1, round(self.img_h * self.scale))

    def forward_box(self, x1: float, y1: float, x2: float, y2: float) -> tuple[float, float, float, float]:
        """Original-image pixel corners -> model-input pixel corners."""
        return (
            x1 * self.scale + self.pad_x,
            y1 * self.scale + self.pad_y,
            x2 * self.scale + self.pad_x,
            y2 * self.scale + self.pad_y,
        )

    def inverse_box(self, x1: float, y1: float, x2: float, y2: float) -> tuple[float, float, float, float]:
        """Model-input pixel corners -> original-image pixel corners (unclamped)."""
        return (
            (x1 - self.pad_x) / self.scale,
            (y1 - self.pad_y) / self.scale,
            (x2 - self.pad_x) / self.scale,
            (y2 - self.pad_y) / self.scale,
        )


def letterbox_transform(img_w: float, img_h: float, target: int) -> Letterbox:
    """Scale the long side to `target` and center the short side with padding.

    Example: 1280x640 at 640 gives scale 0.5 and 160 px of padding above
    and below.
    """
    if img_w <= 0 or img_h <= 0 or target <= 0:
        raise ValueError(f"Letterbox needs positive sizes, got {img_w}x{img_h} -> {target}")
    scale = target / max(img_w, img_h)
    return Letterbox(
        img_w=img_w,
        img_h=img_h,
        target=target,
        scale=scale,
        pad_x=(target - img_w * scale) / 2,
        pad_y=(target - img_h * scale) / 2,
    )


def decode_image(image: bytes) -> Image.Image:
    if not image:
        raise ImageDecodeError("Image bytes are empty")
    try:
        with Image.open(io.BytesIO(image)) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError) as e:
        raise ImageDecodeError(f"Cannot decode image: {e}") from e


def letterbox_image(img: Image.Image, transform: Letterbox) -> np.ndarray:
    """Letterboxed NCHW float32 tensor in [0, 1]."""
    canvas = Image.new("RGB", (transform.target, transform.target), (LETTERBOX_FILL,) * 3)
    resized = img.resize(transform.resized_size, Image.BILINEAR)
    canvas.paste(resized, (int(round(transform.pad_x)), int(round(transform.pad_y))))
    array = np.asarray(canvas, dtype=np.float32) / 255.0
    return array.transpose(2, 0, 1)[np.newaxis, ...]


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression over corner boxes; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    while order.size:
        best = int(order[0])
        keep.append(best)
        rest = order[1:]
        xx1 = np.maximum(boxes[best, 0], boxes[rest, 0])
        yy1 = np.maximum(boxes[best, 1], boxes[rest, 1])
        xx2 = np.minimum(boxes[best, 2], boxes[rest, 2])
        yy2 = np.minimum(boxes[best, 3], boxes[rest, 3])
        inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
        union = areas[best] + areas[rest] - inter
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[overlap < iou_threshold]
    return keep


def infer_output_layout(shape: Sequence[Any], num_classes: int) -> Optional[str]:
    """Layout implied by a detector output shape, or None when it is ambiguous.

    Symbolic dimensions (strings or None, as reported by session metadata)
    match nothing.
    """
    dims = list(shape)[-2:]
    if len(dims) != 2:
        return None
    rows, cols = (d if isinstance(d, int) else None for d in dims)
    candidates = set()
    if rows == 4 + num_classes:
        candidates.add("channels_first")
    if cols == 4 + num_classes:
        candidates.add("rows")
    if cols == 6:
        candidates.add("end_to_end")
    return candidates.pop() if len(candidates) == 1 else None


def decode_outputs(
    output: np.ndarray,
    class_list: list[ObjectClass],
    transform: Letterbox,
    score_threshold: float,
    layout: str = "auto",
) -> list[Detection]:
    """Map a raw detector head to normalized detections in original-image coordinates.

    Layouts:
        channels_first: (1, 4 + nc, N) center boxes then per-class scores
        rows: (1, N, 4 + nc), the same transposed
        end_to_end: (1, N, 6) rows of x1, y1, x2, y2, score, class id
        auto: inferred from the shape; ambiguous shapes raise ValueError
    """
    raw = np.asarray(output, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw[0]
    if raw.ndim != 2:
        raise ValueError(f"Unexpected detector output shape {np.shape(output)}")

    nc = len(class_list)
    if layout == "auto":
        layout = infer_output_layout(raw.shape, nc)
        if layout is None:
            raise ValueError(
                f"Cannot tell the layout of detector output {np.shape(output)} for {nc} classes; "
                f"set output_layout to one of {', '.join(OUTPUT_LAYOUTS)}"
            )
    if layout == "channels_first":
        raw = raw.T
    elif layout not in OUTPUT_LAYOUTS:
        raise ValueError(f"Unknown output layout {layout!r}")

    if layout == "end_to_end":
        if raw.shape[1] != 6:
            raise ValueError(f"End-to-end output needs 6 columns, got {raw.shape[1]}")
        corners = raw[:, :4]
        scores = raw[:, 4]
        class_ids = raw[:, 5].astype(int)
        suppress = False
    else:
        if raw.shape[1] != 4 + nc:
            raise ValueError(f"Output width {raw.shape[1]} does not match {nc} classes")
        class_scores = raw[:, 4:]
        class_ids = class_scores.argmax(axis=1)
        scores = class_scores[np.arange(len(raw)), class_ids]
        cx, cy, w, h = raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3]
        corners = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        suppress = True

    keep = np.flatnonzero(scores >= score_threshold)
    if suppress and keep.size:
        kept = []
        for class_id in np.unique(class_ids[keep]):
            members = keep[class_ids[keep] == class_id]
            kept.extend(members[i] for i in _nms(corners[members], scores[members], NMS_IOU_THRESHOLD))
        keep = np.array(sorted(kept, key=lambda i: -scores[i]), dtype=int)

    detections = []
    for i in keep:
        class_id = int(class_ids[i])
        if not 0 <= class_id < nc:
            logger.debug(f"Skipping detection with class id {class_id} outside class list")
            continue
        x1, y1, x2, y2 = transform.inverse_box(*corners[i])
        try:
            box = BoundingBox.from_corners(
                x1 / transform.img_w, y1 / transform.img_h, x2 / transform.img_w, y2 / transform.img_h
            )
        except BoxError:
            logger.debug(f"Dropping box {corners[i].tolist()} that lies entirely in the padding")
            continue
        detections.append(Detection(box=box, cls=class_list[class_id], score=float(min(1.0, max(0.0, scores[i])))))
    return detections


class Detector:
    """Base class: times the backend call and applies the score threshold."""

    backend_id = "base"

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.class_list = [ObjectClass.from_name(name) for name in cfg.class_list]

    def _run(self, image: bytes, image_ref: str) -> list[Detection]:
        raise NotImplementedError

    def detect(self, image: bytes, image_ref: str) -> TimedDetections:
        start = time.perf_counter()
        detections = self._run(image, image_ref)
        latency = time.perf_counter() - start
        kept = filter_detections(detections, self.cfg.score_threshold)
        logger.debug(f"{self.backend_id}: {len(kept)}/{len(detections)} detections kept for {image_ref}")
        return TimedDetections(detections=kept, detect_latency=latency)


class FilesDetector(Detector):
    """Reads `<files_dir>/<image stem>.json` detection documents."""

    backend_id = "files"

    def path_for(self, image_ref: str) -> Path:
        return Path(self.cfg.files_dir) / f"{Path(image_ref).stem}.json"

    def _run(self, image: bytes, image_ref: str) -> list[Detection]:
        path = self.path_for(image_ref)
        if not path.exists():
            raise DetectionFileMissingError(f"No detection file for {image_ref} at {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        try:
            _, detections = detections_from_json(data)
        except ValueError as e:
            raise DetectionFileMissingError(f"Invalid detection file {path}: {e}") from e
        return detections


def _default_session_factory(model_path: Path) -> Any:
    import onnxruntime as ort

    return ort.InferenceSession(str(model_path), providers=["CPUExecutionProvider"])


class EmbeddedDetector(Detector):
    """Runs a serialized detector network through an ONNX Runtime session pool.

    Each call borrows one session from the pool, so concurrent workers
    never share a session at the same time.
    """

    backend_id = "embedded_model"

    def __init__(self, cfg: DetectorConfig, session_factory: Optional[Callable[[Path], Any]] = None):
        super().__init__(cfg)
        factory = session_factory or _default_session_factory
        model_path = Path(cfg.model_path)
        if session_factory is None and not model_path.exists():
            raise ModelLoadError(f"Detector model not found: {model_path}")
        self.sessions: queue.Queue = queue.Queue()
        try:
            for _ in range(cfg.sessions):
                self.sessions.put(factory(model_path))
        except Exception as e:
            raise ModelLoadError(f"Cannot load detector model {model_path}: {e}") from e
        self.layout = self._resolve_layout()
        logger.info(f"Loaded detector {model_path.name} with {cfg.sessions} session(s), output layout {self.layout}")

    def _resolve_layout(self) -> str:
        """Configured layout, else the one the session's output metadata pins down."""
        if self.cfg.output_layout != "auto":
            return self.cfg.output_layout
        session = self.sessions.get()
        try:
            shape = session.get_outputs()[0].shape
        finally:
            self.sessions.put(session)
        layout = infer_output_layout(shape, len(self.class_list))
        if layout is None:
            logger.warning(f"Detector output shape {shape} does not fix a layout; inferring it per call")
            return "auto"
        return layout

    def _infer(self, tensor: np.ndarray) -> np.ndarray:
        session = self.sessions.get()
        try:
            input_name = session.get_inputs()[0].name
            return session.run(None, {input_name: tensor})[0]
        finally:
            self.sessions.put(session)

    def _run(self, image: bytes, image_ref: str) -> list[Detection]:
        img = decode_image(image)
        transform = letterbox_transform(img.width, img.height, self.cfg.input_size)
        output = self._infer(letterbox_image(img, transform))
        return decode_outputs(output, self.class_list, transform, self.cfg.score_threshold, self.layout)


class HttpDetector(Detector):
    """POSTs the image to a detection service returning a detection document."""

    backend_id = "http"

    def __init__(self, cfg: DetectorConfig, session: Optional[requests.Session] = None):
        super().__init__(cfg)
        self.session = session or requests.Session()

    def _run(self, image: bytes, image_ref: str) -> list[Detection]:
        url = f"{self.cfg.endpoint.rstrip('/')}/detect"
        try:
            response = self.session.post(
                url,
                files={"image": (Path(image_ref).name, image, "application/octet-stream")},
                data={"image_ref": image_ref},
                timeout=self.cfg.timeout,
            )
            response.raise_for_status()
            _, detections = detections_from_json(response.json())
        except requests.exceptions.RequestException as e:
            raise DetectorEndpointError(f"Detection endpoint {url} failed for {image_ref}: {e}") from e
        except ValueError as e:
            raise DetectorEndpointError(f"Detection endpoint {url} returned an invalid document: {e}") from e
        return detections


def create_detector(cfg: DetectorConfig, **kwargs: Any) -> Detector:
    """Factory for the configured backend; extra kwargs go to the backend."""
    if cfg.backend == "files":
        return FilesDetector(cfg)
    if cfg.backend == "embedded_model":
        return EmbeddedDetector(cfg, **kwargs)
    return HttpDetector(cfg, **kwargs)


def detect(image: bytes, cfg: DetectorConfig, image_ref: str = "image") -> TimedDetections:
    """One-shot detection with a freshly built backend."""
    return create_detector(cfg).detect(image, image_ref)
