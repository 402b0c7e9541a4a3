"""Box and point geometry: IoU, centers, hit criterion, distance rewards.

Boxes are inclusive pixel spans: a box covers the integer grid cells
[x_min..x_max] x [y_min..y_max], so width = x_max - x_min + 1. A
single-pixel box therefore has area 1, never 0.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Union


class BBox(NamedTuple):
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def valid(self):
        return self.x_min <= self.x_max and self.y_min <= self.y_max

    def area(self):
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)


class Point(NamedTuple):
    x: int
    y: int


Prediction = Optional[Union[BBox, Point]]  # None means a Malformed decode


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union under the inclusive-pixel convention."""
    if not (a.valid() and b.valid()):
        raise ValueError(f"invalid box: {a} / {b}")
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def center(b: BBox) -> Point:
    return Point((b.x_min + b.x_max) // 2, (b.y_min + b.y_max) // 2)


def acc_hit(prediction: Union[BBox, Point], gt: BBox) -> bool:
    """Click-point criterion: center of a predicted box (or the predicted
    point itself) lies inside the ground-truth box, edges inclusive."""
    p = center(prediction) if isinstance(prediction, BBox) else prediction
    return gt.x_min <= p.x <= gt.x_max and gt.y_min <= p.y <= gt.y_max


def point_reward(p: Point, gt_p: Point, w: int, h: int) -> float:
    """1 - euclidean_distance / image_diagonal, clamped to [0, 1]."""
    if w < 1 or h < 1:
        raise ValueError("image dims must be >= 1")
    diag = math.sqrt(w * w + h * h)
    d = math.hypot(p.x - gt_p.x, p.y - gt_p.y)
    return min(1.0, max(0.0, 1.0 - d / diag))


def _iou_of_prediction(pred: Prediction, gt: BBox) -> float:
    if pred is None:
        return 0.0
    if isinstance(pred, Point):
        pred = BBox(pred.x, pred.y, pred.x, pred.y)
    if not pred.valid():
        return 0.0
    return iou(pred, gt)


def aggregate(results) -> dict:
    """Mean hit rate and mean IoU over (prediction, gt) pairs.

    Malformed (None) and geometrically invalid predictions contribute a
    miss and IoU 0. Point predictions score IoU as their 1x1-pixel box.
    """
    results = list(results)
    if not results:
        raise ValueError("aggregate over empty result list")
    hits = 0
    iou_sum = 0.0
    for pred, gt in results:
        if pred is not None and (isinstance(pred, Point) or pred.valid()) and acc_hit(pred, gt):
            hits += 1
        iou_sum += _iou_of_prediction(pred, gt)
    n = len(results)
    return {"acc": hits / n, "miou": iou_sum / n}
