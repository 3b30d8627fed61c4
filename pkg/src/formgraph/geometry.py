"""Axis-aligned box math: overlap measures, unions, and visibility tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned box in image coordinates, origin at the top-left.

    Invariant: x1 <= x2 and y1 <= y2, all coordinates finite. Zero-area boxes
    are allowed (they behave as points or segments in overlap math).
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise UsageError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise UsageError(f"inverted box coordinates: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def corners(self) -> tuple[tuple[float, float], ...]:
        """Corners in (top-left, top-right, bottom-left, bottom-right) order."""
        return (
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x1, self.y2),
            (self.x2, self.y2),
        )

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def padded(self, pad: float) -> "BBox":
        return BBox(self.x1 - pad, self.y1 - pad, self.x2 + pad, self.y2 + pad)

    def clamped(self, width: float, height: float) -> "BBox":
        """Clip to the [0, width] x [0, height] rectangle."""
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def union_bbox(boxes: Iterable[BBox]) -> BBox:
    """Smallest box covering every input box.

    Raises:
        UsageError: on an empty input.
    """
    boxes = list(boxes)
    if not boxes:
        raise UsageError("union of zero boxes is undefined")
    return BBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def clipped_iou(gt: BBox, pred: BBox) -> float:
    """IOU after clipping `gt` horizontally to the x-span of `pred`.

    Long ground-truth lines frequently cover several detected fragments; the
    horizontal clip scores each fragment against only the part of the GT line
    it could plausibly cover, so a fragment is not punished for the rest.
    If the x-spans are disjoint the score is 0.
    """
    x1 = max(gt.x1, pred.x1)
    x2 = min(gt.x2, pred.x2)
    if x1 > x2:
        return 0.0
    return iou(BBox(x1, gt.y1, x2, gt.y2), pred)


def _boxes_as_arrays(boxes: Sequence[BBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x1 = np.array([b.x1 for b in boxes], dtype=np.float64)
    y1 = np.array([b.y1 for b in boxes], dtype=np.float64)
    x2 = np.array([b.x2 for b in boxes], dtype=np.float64)
    y2 = np.array([b.y2 for b in boxes], dtype=np.float64)
    return x1, y1, x2, y2


def line_of_sight(a: BBox, b: BBox, obstacles: Sequence[BBox]) -> bool:
    """True when the open segment between the centers of `a` and `b` misses every obstacle.

    The segment endpoints are excluded, so obstacles touching only an endpoint
    do not block. A degenerate pair whose centers coincide is visible by
    convention. The boxes `a` and `b` themselves must not be in `obstacles`;
    callers filter them out.
    """
    (px, py) = a.center
    (qx, qy) = b.center
    if px == qx and py == qy:
        return True
    if not obstacles:
        return True
    x1, y1, x2, y2 = _boxes_as_arrays(obstacles)
    return not _segment_hits_any(px, py, qx, qy, x1, y1, x2, y2)


def _segment_hits_any(
    px: float,
    py: float,
    qx: float,
    qy: float,
    x1: np.ndarray,
    y1: np.ndarray,
    x2: np.ndarray,
    y2: np.ndarray,
) -> bool:
    """Slab test of the open segment (p, q) against closed boxes, vectorized."""
    dx = qx - px
    dy = qy - py
    n = x1.shape[0]
    t_enter = np.full(n, -np.inf)
    t_exit = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)

    for d, p, lo, hi in ((dx, px, x1, x2), (dy, py, y1, y2)):
        if d == 0.0:
            # Segment parallel to this slab: must already lie inside it.
            alive &= (lo <= p) & (p <= hi)
        else:
            t1 = (lo - p) / d
            t2 = (hi - p) / d
            t_enter = np.maximum(t_enter, np.minimum(t1, t2))
            t_exit = np.minimum(t_exit, np.maximum(t1, t2))

    # Intersection with the open parameter range (0, 1); touching an endpoint
    # exactly does not block, crossing or touching strictly inside does.
    hits = alive & (t_enter <= t_exit) & (t_exit > 0.0) & (t_enter < 1.0)
    return bool(hits.any())
