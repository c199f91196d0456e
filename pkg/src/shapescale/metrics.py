"""Key-point position precision and matching accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import KeyPoints


@dataclass
class PrecisionCounts:
    inside: int = 0
    total: int = 0
    weight_inside: float = 0.0
    weight_total: float = 0.0

    def __iadd__(self, other: "PrecisionCounts"):
        self.inside += other.inside
        self.total += other.total
        self.weight_inside += other.weight_inside
        self.weight_total += other.weight_total
        return self

    @property
    def empty(self) -> bool:
        return self.total == 0

    @property
    def position_precision(self) -> float:
        return self.inside / self.total if self.total else float("nan")

    @property
    def weighted_position_precision(self) -> float:
        return self.weight_inside / self.weight_total if self.weight_total else float("nan")


def keypoint_counts(keypoints: KeyPoints, matches, targets) -> PrecisionCounts:
    """Count key points of matched queries that land inside the matched 2D box."""
    counts = PrecisionCounts()
    if not matches:
        return counts
    img = keypoints.image_positions()
    for q, t in matches:
        x1, y1, x2, y2 = targets[t].box_xyxy
        pts = img[q].reshape(-1, 2)
        w = keypoints.weights[q].reshape(-1)
        inside = (pts[:, 0] >= x1) & (pts[:, 0] <= x2) & (pts[:, 1] >= y1) & (pts[:, 1] <= y2)
        counts.inside += int(inside.sum())
        counts.total += len(pts)
        counts.weight_inside += float(w[inside].sum())
        counts.weight_total += float(w.sum())
    return counts


def eval_keypoint_precision(keypoints: KeyPoints, matches, targets) -> dict:
    counts = keypoint_counts(keypoints, matches, targets)
    return {
        "position_precision": counts.position_precision,
        "weighted_position_precision": counts.weighted_position_precision,
        "empty": counts.empty,
    }


@dataclass
class MetricsReport:
    step: int
    position_precision: float
    weighted_position_precision: float
    matching_accuracy: float
    total_loss: float
    msm_loss: float
    terms: dict = field(default_factory=dict)
    empty: bool = False

    def __post_init__(self):
        for name in ("position_precision", "weighted_position_precision", "matching_accuracy"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
