"""Query-level visual/depth fusion and the shape&scale matching head."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .sampling import FeatureMap, ShapeScalePreset
from .tensor import (Linear, Parameter, conv2d_stride2, conv2d_stride2_backward, glorot,
                     softmax)

log = logging.getLogger(__name__)


class MapReducer:
    """Two chained 3x3 stride-2 convolutions: stride-16 map to stride-64 map."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator | None = None):
        self.kernels = []
        self.biases = []
        for j in range(2):
            k = (glorot(rng, 9 * channels, channels, (3, 3, channels, channels))
                 if rng is not None else np.zeros((3, 3, channels, channels)))
            self.kernels.append(Parameter(k, f"{name}.conv{j}.kernel"))
            self.biases.append(Parameter(np.zeros(channels), f"{name}.conv{j}.bias"))

    def parameters(self):
        return [p for pair in zip(self.kernels, self.biases) for p in pair]


def reduce_feature_map(feature_map: FeatureMap, reducer: MapReducer):
    """Returns the stride-64 map and a cache for :func:`reduce_feature_map_backward`."""
    if feature_map.stride_to_image != 16:
        raise DimensionError("reduce_feature_map expects a stride-16 map")
    x0 = feature_map.data
    x1 = conv2d_stride2(x0, reducer.kernels[0], reducer.biases[0])
    x2 = conv2d_stride2(x1, reducer.kernels[1], reducer.biases[1])
    return FeatureMap(x2, stride_to_image=64), (x0, x1)


def reduce_feature_map_backward(dy: np.ndarray, reducer: MapReducer, cache) -> np.ndarray:
    x0, x1 = cache
    dx1 = conv2d_stride2_backward(dy, x1, reducer.kernels[1], reducer.biases[1])
    return conv2d_stride2_backward(dx1, x0, reducer.kernels[0], reducer.biases[0])


class FusionWeights:
    """Per-query fusion proportion, initialized to an equal split."""

    def __init__(self, n_queries: int, name: str = "fusion"):
        self.w = Parameter(np.full((n_queries, 1), 0.5), f"{name}.w")

    def parameters(self):
        return [self.w]

    def outside_unit_interval(self) -> int:
        w = self.w.value
        return int(np.count_nonzero((w < 0) | (w > 1)))


def fuse_query_features(fv: np.ndarray, fd: np.ndarray, weights: FusionWeights) -> np.ndarray:
    w = weights.w.value
    if fv.shape != fd.shape or w.shape != (fv.shape[0], 1):
        raise DimensionError(
            f"fusion: visual {fv.shape}, depth {fd.shape}, weights {w.shape} disagree")
    return w * fv + (1.0 - w) * fd


def fuse_query_features_backward(dout: np.ndarray, fv: np.ndarray, fd: np.ndarray,
                                 weights: FusionWeights):
    """Returns ``(d_fv, d_fd)`` and accumulates the weight gradient."""
    w = weights.w.value
    weights.w.accumulate((dout * (fv - fd)).sum(axis=1, keepdims=True))
    return dout * w, dout * (1.0 - w)


class MatchingHead(Linear):
    def __init__(self, channels: int, n_presets: int, rng=None, name: str = "matching_head"):
        super().__init__(name, channels, n_presets, rng)


@dataclass
class MatchingDistribution:
    p: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        p = self.p
        if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("matching distribution rows must be probability vectors")

    @property
    def shape(self):
        return self.p.shape


def predict_matching_distribution(fused: np.ndarray, head: MatchingHead) -> MatchingDistribution:
    logits = head(fused)
    return MatchingDistribution(softmax(logits), logits)


def expected_shape_scale(p, presets: ShapeScalePreset) -> np.ndarray:
    """Probability-weighted (r, w) per query."""
    p = p.p if isinstance(p, MatchingDistribution) else np.asarray(p, dtype=float)
    if p.shape[1] != len(presets):
        raise DimensionError(f"distribution has {p.shape[1]} columns, presets have {len(presets)}")
    return p @ presets.as_array()


def shape_scale_l1(p: MatchingDistribution, presets: ShapeScalePreset, truths: np.ndarray,
                   rows: np.ndarray):
    """L1 between expected and true (r, w) on the given rows.

    Alternative to the classification loss; kept for comparison and off by
    default. Returns the mean loss and the gradient w.r.t. the logits.
    """
    s = presets.as_array()
    pred = p.p[rows] @ s
    diff = pred - truths
    loss = float(np.abs(diff).sum(axis=1).mean()) if len(rows) else 0.0
    dlogits = np.zeros_like(p.p)
    if len(rows):
        dpred = np.sign(diff) / len(rows)
        dp = dpred @ s.T
        pr = p.p[rows]
        dlogits[rows] = pr * (dp - (dp * pr).sum(axis=1, keepdims=True))
    return loss, dlogits
