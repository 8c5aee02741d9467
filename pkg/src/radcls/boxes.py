"""Axis-aligned bounding boxes: geometry, ROI cropping, detection metrics.

Boxes use pixel coordinates with ``(x, y)`` the top-left corner and
``(w, h)`` the extents.  Detection metrics score an external detector's
predictions against ground-truth boxes; the detector itself is out of
scope and its outputs arrive via CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """A box lies fully outside the image it is supposed to crop."""


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class DetMetrics:
    """Detector quality summary: precision/recall at IoU 0.5 plus mAP values."""

    precision: float
    recall: float
    map50: float
    map5095: float

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "map50": self.map50,
            "map5095": self.map5095,
        }


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = max(a.x, b.x)
    iy = max(a.y, b.y)
    iw = min(a.x2, b.x2) - ix
    ih = min(a.y2, b.y2) - iy
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # the clamp absorbs float rounding when the boxes (nearly) coincide
    return min(1.0, inter / (a.area + b.area - inter))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_roi(img: np.ndarray, box: BBox, margin_fraction: float = 0.0) -> np.ndarray:
    """Crop ``box`` (expanded by ``margin_fraction`` per side) out of ``img``.

    The expanded box is clamped to the image bounds.  Raises
    :class:`GeometryError` when the box does not intersect the image at all.
    """
    if margin_fraction < 0:
        raise ValueError(f"margin_fraction must be >= 0, got {margin_fraction}")
    h, w = img.shape[:2]
    if box.x >= w or box.y >= h or box.x2 <= 0 or box.y2 <= 0:
        raise GeometryError(f"box {box} is fully outside a {w}x{h} image")
    x0 = _round_half_up(box.x - margin_fraction * box.w)
    y0 = _round_half_up(box.y - margin_fraction * box.h)
    x1 = _round_half_up(box.x2 + margin_fraction * box.w)
    y1 = _round_half_up(box.y2 + margin_fraction * box.h)
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    return img[y0:y1, x0:x1].copy()


def remap_box(box: BBox, t, inverse: bool = False) -> BBox:
    """Move a box between original and letterboxed coordinates.

    ``t`` is the :class:`~radcls.imaging.LetterboxTransform` returned by
    :func:`~radcls.imaging.letterbox`.  Forward maps original -> canvas;
    ``inverse=True`` maps canvas -> original.
    """
    if inverse:
        return BBox(
            (box.x - t.pad_left) / t.scale,
            (box.y - t.pad_top) / t.scale,
            box.w / t.scale,
            box.h / t.scale,
        )
    return BBox(
        box.x * t.scale + t.pad_left,
        box.y * t.scale + t.pad_top,
        box.w * t.scale,
        box.h * t.scale,
    )


def _match_detections(
    dets: list[Detection],
    gts: dict[str, list[BBox]],
    iou_thresh: float,
) -> tuple[list[Detection], list[bool]]:
    """Greedy matching in descending confidence order.

    Each detection may claim at most one still-unmatched ground-truth box in
    its image, the one with the highest IoU at or above the threshold.
    Returns the sorted detections and a true-positive flag per detection.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    ordered = [dets[i] for i in order]
    taken: dict[str, set[int]] = {}
    flags: list[bool] = []
    for det in ordered:
        boxes = gts.get(det.image_id, [])
        used = taken.setdefault(det.image_id, set())
        best_j, best_iou = -1, iou_thresh
        for j, gt in enumerate(boxes):
            if j in used:
                continue
            v = iou(det.box, gt)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            used.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return ordered, flags


def average_precision(
    dets: list[Detection],
    gts: dict[str, list[BBox]],
    iou_thresh: float,
) -> float:
    """All-point interpolated average precision at one IoU threshold.

    Precision at each recall level is replaced by the maximum precision at
    any recall >= that level, and the area under the resulting envelope is
    accumulated over recall increments.  Degenerate cases: no ground truth
    with detections present gives 0; no ground truth and no detections
    gives 1.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    _, flags = _match_detections(dets, gts, iou_thresh)
    precisions, recalls = [], []
    tp = 0
    for i, flag in enumerate(flags):
        tp += int(flag)
        precisions.append(tp / (i + 1))
        recalls.append(tp / n_gt)
    # precision envelope: max precision at recall >= r
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recalls, envelope):
        ap += (r - prev_recall) * p
        prev_recall = r
    return ap


MAP_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))


def map_range(dets: list[Detection], gts: dict[str, list[BBox]]) -> DetMetrics:
    """mAP at 0.5, mAP averaged over IoU 0.50..0.95, and max-F1 precision/recall.

    ``map5095`` is the arithmetic mean of the AP at the ten thresholds
    0.50, 0.55, ..., 0.95.  Precision and recall are reported at IoU 0.5
    using the confidence cutoff that maximizes F1 (highest such cutoff on
    ties); this cutoff convention is this toolkit's, chosen because the
    detector evaluation it mirrors does not pin one down.
    """
    aps = [average_precision(dets, gts, t) for t in MAP_THRESHOLDS]
    map50 = aps[0]
    map5095 = sum(aps) / len(aps)
    precision, recall = _max_f1_point(dets, gts, 0.5)
    return DetMetrics(precision=precision, recall=recall, map50=map50, map5095=map5095)


def _max_f1_point(
    dets: list[Detection],
    gts: dict[str, list[BBox]],
    iou_thresh: float,
) -> tuple[float, float]:
    n_gt = sum(len(v) for v in gts.values())
    if not dets or n_gt == 0:
        degenerate = 1.0 if (not dets and n_gt == 0) else 0.0
        return degenerate, degenerate
    ordered, flags = _match_detections(dets, gts, iou_thresh)
    # Greedy matching is prefix-stable: truncating at a cutoff keeps the
    # matches of the surviving detections, so prefixes of one full run
    # give the per-cutoff counts.
    best = (-1.0, 0.0, 0.0)
    tp = 0
    for i, flag in enumerate(flags):
        tp += int(flag)
        if i + 1 < len(ordered) and ordered[i + 1].confidence == ordered[i].confidence:
            continue
        p = tp / (i + 1)
        r = tp / n_gt
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        if f1 > best[0]:
            best = (f1, p, r)
    return best[1], best[2]


def load_detections(path) -> list[Detection]:
    """Read predicted boxes from CSV ``image_path,x,y,w,h,confidence``."""
    expected = ["image_path", "x", "y", "w", "h", "confidence"]
    dets: list[Detection] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != expected:
            raise ValueError(f"detection CSV must have header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise ValueError(f"row {lineno}: expected 6 fields, got {len(row)}")
            try:
                box = BBox(float(row[1]), float(row[2]), float(row[3]), float(row[4]))
                conf = float(row[5])
            except ValueError as e:
                raise ValueError(f"row {lineno}: {e}") from None
            dets.append(Detection(image_id=row[0], box=box, confidence=conf))
    return dets
