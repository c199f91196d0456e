"""Shape&scale category labels and the multi-class focal matching loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTargetError
from .fusion import MatchingDistribution
from .sampling import ShapeScalePreset
from .tensor import log_softmax

FEATURE_STRIDE = 16
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ShapeScaleTruth:
    r_hat: float
    w_hat: float

    def __post_init__(self):
        if not (self.r_hat > 0 and self.w_hat > 0):
            raise InvalidTargetError(f"shape&scale truth must be positive, got {self}")


@dataclass(frozen=True)
class MSMConfig:
    w1: float = 2.0
    w2: float = 1.0
    gamma: float = 2.0
    lambda_msm: float = 0.1

    def __post_init__(self):
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("w1 and w2 must be positive")
        if self.gamma < 0 or self.lambda_msm < 0:
            raise ValueError("gamma and lambda_msm must be nonnegative")


@dataclass(frozen=True)
class CategoryLabel:
    index: int
    onehot: np.ndarray = field(compare=False)

    @classmethod
    def of(cls, index: int, n: int) -> "CategoryLabel":
        onehot = np.zeros(n)
        onehot[index] = 1.0
        return cls(int(index), onehot)


def truth_from_box(l: float, r: float, t: float, b: float) -> ShapeScaleTruth:
    width = l + r
    height = t + b
    if not (width > 0 and height > 0):
        raise InvalidTargetError(f"degenerate box l={l} r={r} t={t} b={b}")
    return ShapeScaleTruth(r_hat=height / width, w_hat=width / FEATURE_STRIDE)


def weighted_distances(truth: ShapeScaleTruth, presets: ShapeScalePreset, cfg: MSMConfig) -> np.ndarray:
    s = presets.as_array()
    return cfg.w1 * np.abs(truth.r_hat - s[:, 0]) + cfg.w2 * np.abs(truth.w_hat - s[:, 1])


def generate_category_label(truth: ShapeScaleTruth, presets: ShapeScalePreset,
                            cfg: MSMConfig = MSMConfig()) -> CategoryLabel:
    # np.argmin returns the first minimum, i.e. ties go to the lowest index
    index = int(np.argmin(weighted_distances(truth, presets, cfg)))
    return CategoryLabel.of(index, len(presets))


def focal_loss_rows(logits: np.ndarray, index: np.ndarray, gamma: float):
    """Row-wise multi-class focal loss; returns ``(losses, d_logits)``.

    Works from logits through log-softmax so the true-class log-probability
    never underflows.
    """
    logits = np.atleast_2d(logits)
    index = np.atleast_1d(np.asarray(index, dtype=np.intp))
    rows = np.arange(len(index))
    logp = log_softmax(logits)
    p = np.exp(logp)
    logpt = logp[rows, index]
    pt = p[rows, index]
    one_minus = -np.expm1(logpt)
    mod = one_minus ** gamma
    losses = -mod * logpt
    # dL/dz = g * (onehot - p), g = gamma (1-pt)^(gamma-1) pt log pt - (1-pt)^gamma
    g = -mod
    if gamma > 0:
        safe = one_minus > 0
        g = g + np.where(safe, gamma * np.where(safe, one_minus, 1.0) ** (gamma - 1) * pt * logpt, 0.0)
    onehot = np.zeros_like(p)
    onehot[rows, index] = 1.0
    return losses, g[:, None] * (onehot - p)


def focal_loss_from_logits(logits: np.ndarray, index: int, gamma: float):
    """Single-row focal loss; returns ``(loss, d_logits)``."""
    losses, grad = focal_loss_rows(np.asarray(logits)[None], [index], gamma)
    return float(losses[0]), grad[0]


def focal_loss_multiclass(p_row, label: CategoryLabel | int, gamma: float = 2.0) -> float:
    """Focal loss on a probability row; probabilities are floored at 1e-12."""
    p_row = np.asarray(p_row, dtype=float)
    index = label.index if isinstance(label, CategoryLabel) else int(label)
    if abs(p_row.sum() - 1.0) > 1e-6:
        raise ValueError("probability row must sum to 1")
    if p_row[index] <= 0:
        warnings.warn("true-class probability is zero; flooring at 1e-12", RuntimeWarning)
    logits = np.log(np.maximum(p_row, PROB_FLOOR))
    return focal_loss_from_logits(logits, index, gamma)[0]


def msm_loss(p: MatchingDistribution, labels, gamma: float = 2.0):
    """Mean focal loss over labeled queries.

    ``labels`` is a sequence of ``(query_index, CategoryLabel)``. Returns
    ``(loss, d_logits)`` where ``d_logits`` has the shape of ``p.p``.
    """
    logits = p.logits if p.logits is not None else np.log(np.maximum(p.p, PROB_FLOOR))
    dlogits = np.zeros_like(logits)
    if not labels:
        warnings.warn("no positive queries; matching loss is zero", RuntimeWarning)
        return 0.0, dlogits
    n = logits.shape[0]
    qs = np.array([q for q, _ in labels])
    if np.any(qs < 0) or np.any(qs >= n):
        raise IndexError(f"labels reference queries outside [0, {n})")
    idx = [lab.index if isinstance(lab, CategoryLabel) else int(lab) for _, lab in labels]
    losses, g = focal_loss_rows(logits[qs], idx, gamma)
    np.add.at(dlogits, qs, g)
    total = float(losses.sum())
    m = len(labels)
    return total / m, dlogits / m
