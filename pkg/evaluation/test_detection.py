"""Test detection geometry, filtering and identifier assignment."""
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from hazguard.detection import (
    BoundingBox,
    Detection,
    ObjectClass,
    assign_identifiers,
    detections_from_json,
    detections_to_json,
    filter_detections,
    iou,
    load_class_list,
    load_detection_file,
    normalize_box,
)
from hazguard.config import CLASSES_FILE
from hazguard.errors import BoxError

from fakes import DETECTIONS
from harness import collect_tests, run_suite

logger = logging.getLogger(__name__)

GRID = 1000

NORMALIZE_SCENARIOS = [
    {"name": "full image", "args": (0, 0, 640, 640, 640, 640), "expected": (0.5, 0.5, 1.0, 1.0)},
    {"name": "centered half", "args": (160, 160, 320, 320, 640, 640), "expected": (0.5, 0.5, 0.5, 0.5)},
    {"name": "rectangular image", "args": (100, 50, 200, 100, 1000, 500), "expected": (0.2, 0.2, 0.2, 0.2)},
]


def det(cls: ObjectClass, cx: float, cy: float = 0.5, score: float = 0.9, w: float = 0.1, h: float = 0.1) -> Detection:
    return Detection(box=BoundingBox(cx=cx, cy=cy, w=w, h=h), cls=cls, score=score)


def test_normalize_box_examples():
    for scenario in NORMALIZE_SCENARIOS:
        box = normalize_box(*scenario["args"])
        got = (box.cx, box.cy, box.w, box.h)
        assert np.allclose(got, scenario["expected"], atol=1e-12), f"{scenario['name']}: {got}"
        left, top, width, height = box.to_pixels(*scenario["args"][4:])
        assert np.allclose((left, top, width, height), scenario["args"][:4], atol=0.5)


def test_normalize_box_rejects_bad_input():
    bad = [
        (0, 0, 10, 10, 0, 100),
        (0, 0, 10, 10, 100, -1),
        (95, 0, 10, 10, 100, 100),
        (-1, 0, 10, 10, 100, 100),
        (0, 0, 0, 10, 100, 100),
    ]
    for args in bad:
        try:
            normalize_box(*args)
        except BoxError:
            continue
        raise AssertionError(f"normalize_box{args} should fail")


def test_box_corners_clamp():
    box = BoundingBox(cx=0.05, cy=0.95, w=0.2, h=0.2)
    x1, y1, x2, y2 = box.corners()
    assert (x1, y2) == (0.0, 1.0)
    assert abs(x2 - 0.15) < 1e-12 and abs(y1 - 0.85) < 1e-12


def test_iou_examples():
    a = BoundingBox(cx=0.5, cy=0.5, w=0.4, h=0.4)
    assert iou(a, a) == 1.0
    disjoint_a = BoundingBox(cx=0.2, cy=0.2, w=0.2, h=0.2)
    disjoint_b = BoundingBox(cx=0.8, cy=0.8, w=0.2, h=0.2)
    assert iou(disjoint_a, disjoint_b) == 0.0
    partial_a = BoundingBox(cx=0.25, cy=0.25, w=0.5, h=0.5)
    partial_b = BoundingBox(cx=0.5, cy=0.5, w=0.5, h=0.5)
    assert abs(iou(partial_a, partial_b) - 1 / 7) < 1e-12


def _grid_box(rng: np.random.Generator) -> tuple[BoundingBox, tuple[int, int, int, int]]:
    x1, x2 = sorted(rng.choice(GRID + 1, size=2, replace=False))
    y1, y2 = sorted(rng.choice(GRID + 1, size=2, replace=False))
    box = BoundingBox.from_corners(x1 / GRID, y1 / GRID, x2 / GRID, y2 / GRID)
    return box, (int(x1), int(y1), int(x2), int(y2))


def _mask(corners: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    x1, y1, x2, y2 = corners
    xs = np.zeros(GRID, dtype=bool)
    ys = np.zeros(GRID, dtype=bool)
    xs[x1:x2] = True
    ys[y1:y2] = True
    return xs, ys


def test_iou_matches_rasterization():
    """1,000 random pairs on a 1000x1000 grid; cell counts as the oracle."""
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        a, corners_a = _grid_box(rng)
        b, corners_b = _grid_box(rng)
        xa, ya = _mask(corners_a)
        xb, yb = _mask(corners_b)
        inter = np.outer(ya & yb, xa & xb).sum()
        union = (np.outer(ya, xa) | np.outer(yb, xb)).sum()
        worst = max(worst, abs(iou(a, b) - inter / union))
        assert abs(iou(a, b) - iou(b, a)) < 1e-15
    assert worst < 1e-3, f"max deviation from raster oracle {worst}"


def test_filter_detections():
    detections = [det(ObjectClass.WORKER, 0.1, score=s) for s in (0.9, 0.1, 0.3)]
    kept = filter_detections(detections, 0.25)
    assert kept == [detections[0], detections[2]]
    assert filter_detections(detections, 0.0) == detections
    assert filter_detections(detections, 1.0) == []
    try:
        filter_detections(detections, 1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("threshold outside [0, 1] should fail")


def test_filter_is_monotone():
    rng = np.random.default_rng(3)
    detections = [det(ObjectClass.WORKER, 0.5, score=float(s)) for s in rng.random(50)]
    for t1, t2 in itertools.combinations(np.linspace(0, 1, 11), 2):
        high = filter_detections(detections, float(t2))
        low = filter_detections(detections, float(t1))
        assert all(d in low for d in high)


def test_assign_identifiers_left_to_right():
    workers = [det(ObjectClass.WORKER, 0.590, 0.514), det(ObjectClass.WORKER, 0.558, 0.518)]
    ids = assign_identifiers(workers)
    assert [(i.id, i.detection.box.cx) for i in ids] == [("w1", 0.558), ("w2", 0.590)]

    assert [i.id for i in assign_identifiers([det(ObjectClass.EXCAVATOR, 0.77)])] == ["ex1"]

    mixed = [det(ObjectClass.WORKER, 0.7), det(ObjectClass.EXCAVATOR, 0.2), det(ObjectClass.WORKER, 0.3)]
    got = [(i.id, i.detection.box.cx) for i in assign_identifiers(mixed)]
    assert got == [("w1", 0.3), ("w2", 0.7), ("ex1", 0.2)]


def test_assign_identifiers_tie_breaks():
    lower = det(ObjectClass.WORKER, 0.5, cy=0.8, score=0.9)
    upper = det(ObjectClass.WORKER, 0.5, cy=0.2, score=0.4)
    ids = {i.id: i.detection for i in assign_identifiers([lower, upper])}
    assert ids["w1"] == upper and ids["w2"] == lower

    weak = det(ObjectClass.WORKER, 0.5, cy=0.5, score=0.4)
    strong = det(ObjectClass.WORKER, 0.5, cy=0.5, score=0.9)
    ids = {i.id: i.detection for i in assign_identifiers([weak, strong])}
    assert ids["w1"] == strong


def test_assign_identifiers_permutation_invariant():
    rng = np.random.default_rng(11)
    classes = list(ObjectClass)
    for _ in range(500):
        detections = [
            det(classes[int(rng.integers(len(classes)))], float(rng.random()), float(rng.random()), float(rng.random()))
            for _ in range(int(rng.integers(0, 13)))
        ]
        reference = {(i.id, i.detection) for i in assign_identifiers(detections)}
        for _ in range(3):
            shuffled = [detections[k] for k in rng.permutation(len(detections))]
            assert {(i.id, i.detection) for i in assign_identifiers(shuffled)} == reference

        by_prefix = {}
        for item in assign_identifiers(detections):
            prefix = item.detection.cls.prefix
            by_prefix.setdefault(prefix, []).append(int(item.id[len(prefix):]))
        for indices in by_prefix.values():
            assert sorted(indices) == list(range(1, len(indices) + 1))


def test_prefixes_unique():
    prefixes = [cls.prefix for cls in ObjectClass]
    assert len(set(prefixes)) == len(prefixes) == 11
    assert ObjectClass.WORKER.prefix == "w"
    assert ObjectClass.EXCAVATOR.prefix == "ex"
    assert ObjectClass.DUMP_TRUCK.prefix == "dt"
    assert ObjectClass.from_name("dump_truck") is ObjectClass.DUMP_TRUCK
    assert ObjectClass.from_name("Tower-Crane") is ObjectClass.TOWER_CRANE


def test_detection_file_round_trip():
    image_ref, detections = load_detection_file(DETECTIONS / "site_01.json")
    assert image_ref == "images/site_01.png"
    assert len(detections) == 3
    again_ref, again = detections_from_json(detections_to_json(image_ref, detections))
    assert again_ref == image_ref and again == detections

    try:
        detections_from_json({"image": "x.png", "detections": [{"class": "Worker", "cx": 1.4}]})
    except ValueError:
        pass
    else:
        raise AssertionError("invalid detection document should fail")


def test_class_list_order():
    classes = load_class_list(CLASSES_FILE)
    assert classes[0] is ObjectClass.WORKER
    assert classes[5] is ObjectClass.EXCAVATOR
    assert len(classes) == 11


if __name__ == "__main__":
    sys.exit(run_suite("DETECTION CORE TESTS", collect_tests(globals())))
