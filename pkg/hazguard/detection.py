"""Detected entities: geometry, filtering, left-to-right identifiers, file formats."""
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .config import CLASS_PREFIXES, DEFAULT_SCORE_THRESHOLD
from .errors import BoxError
from .schemas import validate_output

logger = logging.getLogger(__name__)


class ObjectClass(str, Enum):
    """Worker and machinery classes recognised by the detector."""

    WORKER = "Worker"
    CEMENT_TRUCK = "Cement Truck"
    COMPACTOR = "Compactor"
    DOZER = "Dozer"
    DUMP_TRUCK = "Dump Truck"
    EXCAVATOR = "Excavator"
    GRADER = "Grader"
    MOBILE_CRANE = "Mobile Crane"
    TOWER_CRANE = "Tower Crane"
    WHEEL_LOADER = "Wheel Loader"
    BACKHOE_LOADER = "Backhoe Loader"

    @property
    def prefix(self) -> str:
        return CLASS_PREFIXES[self.value]

    @classmethod
    def from_name(cls, name: str) -> "ObjectClass":
        """Resolve 'Dump Truck', 'dump_truck' or 'dump-truck' to a class."""
        key = " ".join(name.replace("_", " ").replace("-", " ").split()).lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"Unknown object class: {name!r}")


CLASS_ORDER = {member: index for index, member in enumerate(ObjectClass)}


class BoundingBox(BaseModel):
    """Center-format box in normalized image coordinates."""

    model_config = ConfigDict(frozen=True)

    cx: float = Field(ge=0, le=1)
    cy: float = Field(ge=0, le=1)
    w: float = Field(gt=0, le=1)
    h: float = Field(gt=0, le=1)

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) clamped to the unit square."""
        return (
            max(0.0, self.cx - self.w / 2),
            max(0.0, self.cy - self.h / 2),
            min(1.0, self.cx + self.w / 2),
            min(1.0, self.cy + self.h / 2),
        )

    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return (x2 - x1) * (y2 - y1)

    def to_pixels(self, img_w: float, img_h: float) -> tuple[float, float, float, float]:
        """(left, top, width, height) in pixels."""
        return (
            (self.cx - self.w / 2) * img_w,
            (self.cy - self.h / 2) * img_h,
            self.w * img_w,
            self.h * img_h,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        """Build from normalized corners, clamping them into [0, 1] first."""
        x1, x2 = sorted((min(1.0, max(0.0, x1)), min(1.0, max(0.0, x2))))
        y1, y2 = sorted((min(1.0, max(0.0, y1)), min(1.0, max(0.0, y2))))
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            raise BoxError(f"Degenerate box after clamping: ({x1}, {y1}, {x2}, {y2})")
        return cls(cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1)


class Detection(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: BoundingBox
    cls: ObjectClass
    score: float = Field(ge=0, le=1)


class IdentifiedDetection(BaseModel):
    model_config = ConfigDict(frozen=True)

    detection: Detection
    id: str


def normalize_box(
    px_left: float,
    px_top: float,
    px_width: float,
    px_height: float,
    img_w: float,
    img_h: float,
) -> BoundingBox:
    """Convert a pixel (left, top, width, height) box to a normalized center box.

    Raises:
        BoxError: non-positive image dimensions, empty box, or a box that
            extends outside the image.
    """
    if img_w <= 0 or img_h <= 0:
        raise BoxError(f"Image dimensions must be positive, got {img_w}x{img_h}")
    if px_width <= 0 or px_height <= 0:
        raise BoxError(f"Box size must be positive, got {px_width}x{px_height}")
    if px_left < 0 or px_top < 0 or px_left + px_width > img_w or px_top + px_height > img_h:
        raise BoxError(
            f"Box (left={px_left}, top={px_top}, w={px_width}, h={px_height}) "
            f"lies outside image {img_w}x{img_h}"
        )
    return BoundingBox(
        cx=(px_left + px_width / 2) / img_w,
        cy=(px_top + px_height / 2) / img_h,
        w=px_width / img_w,
        h=px_height / img_h,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter_w = min(ax2, bx2) - max(ax1, bx1)
    inter_h = min(ay2, by2) - max(ay1, by1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def filter_detections(
    detections: Sequence[Detection],
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> list[Detection]:
    """Keep detections with score >= threshold, preserving order."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must be in [0, 1], got {score_threshold}")
    return [d for d in detections if d.score >= score_threshold]


def assign_identifiers(detections: Sequence[Detection]) -> list[IdentifiedDetection]:
    """Number each class left to right: w1, w2, ..., ex1, ...

    Ties on cx fall back to cy, then higher score, then input order. The
    result is ordered by class (taxonomy order) and index.
    """
    by_class: dict[ObjectClass, list[tuple[int, Detection]]] = {}
    for position, detection in enumerate(detections):
        by_class.setdefault(detection.cls, []).append((position, detection))

    identified = []
    for cls in sorted(by_class, key=CLASS_ORDER.__getitem__):
        ordered = sorted(
            by_class[cls],
            key=lambda item: (item[1].box.cx, item[1].box.cy, -item[1].score, item[0]),
        )
        for index, (_, detection) in enumerate(ordered, start=1):
            identified.append(IdentifiedDetection(detection=detection, id=f"{cls.prefix}{index}"))
    return identified


def detections_from_json(data: dict) -> tuple[str, list[Detection]]:
    """Parse one precomputed-detections document."""
    is_valid, error = validate_output(data, "detection_file")
    if not is_valid:
        raise ValueError(error)
    detections = [
        Detection(
            box=BoundingBox(cx=item["cx"], cy=item["cy"], w=item["w"], h=item["h"]),
            cls=ObjectClass.from_name(item["class"]),
            score=item["score"],
        )
        for item in data["detections"]
    ]
    return data["image"], detections


def detections_to_json(image_ref: str, detections: Iterable[Detection]) -> dict:
    return {
        "image": image_ref,
        "detections": [
            {
                "class": d.cls.value,
                "cx": d.box.cx,
                "cy": d.box.cy,
                "w": d.box.w,
                "h": d.box.h,
                "score": d.score,
            }
            for d in detections
        ],
    }


def load_detection_file(path: Path) -> tuple[str, list[Detection]]:
    with open(path, "r", encoding="utf-8") as f:
        return detections_from_json(json.load(f))


def load_class_list(path: Path) -> list[ObjectClass]:
    """Ordered class names, one per line; the line index is the class id."""
    with open(path, "r", encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]
    return [ObjectClass.from_name(name) for name in names]


def load_label_file(path: Path, class_list: Sequence[ObjectClass]) -> list[tuple[BoundingBox, ObjectClass]]:
    """Read `<class_index> <cx> <cy> <w> <h>` ground-truth lines."""
    labels = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValueError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
            class_index = int(parts[0])
            if not 0 <= class_index < len(class_list):
                raise ValueError(f"{path}:{line_no}: class index {class_index} not in class list")
            cx, cy, w, h = (float(value) for value in parts[1:])
            labels.append((BoundingBox(cx=cx, cy=cy, w=w, h=h), class_list[class_index]))
    return labels
