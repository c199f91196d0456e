"""Shape&scale-aware deformable decoder layer.

Pipeline per layer::

    self-attention -> local features (stride-16 visual map, one mask per preset)
                   -> reduce + sample + fuse visual/depth -> matching distribution
    -> filter = sigmoid(linear(sum_i p_i * local_i))
    -> augmented = queries * filter
    -> deformable key-point aggregation over the visual map
    -> FFN with residual
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .fusion import (FusionWeights, MapReducer, MatchingDistribution, MatchingHead,
                     fuse_query_features, fuse_query_features_backward,
                     predict_matching_distribution, reduce_feature_map,
                     reduce_feature_map_backward)
from .sampling import (FeatureMap, QuerySet, ShapeScalePreset, bilinear_sample,
                       bilinear_sample_backward, extract_local_features,
                       extract_local_features_backward, sample_queries_backward,
                       sample_queries_from_map)
from .tensor import (Linear, SelfAttention, relu, relu_backward, sigmoid, sigmoid_backward,
                     softmax, softmax_backward)

# ---------------------------------------------------------------------------
# shape&scale-aware filter
# ---------------------------------------------------------------------------


class AdaptiveFilterLayer(Linear):
    """1x1 convolution over the query axis (a shared C->C linear map) + sigmoid.

    Zero-initialized by default so the filter starts as a uniform 0.5 gate
    and passes no gradient to the matching distribution until it has learned
    something; pass ``rng`` for a random start.
    """

    def __init__(self, channels: int, rng=None, name: str = "filter"):
        super().__init__(name, channels, channels, rng)


def build_filter(local: np.ndarray, p, layer: AdaptiveFilterLayer):
    """Returns ``(filter, context)``; ``context[q] = sum_i p[q, i] * local[q, i]``."""
    p = p.p if isinstance(p, MatchingDistribution) else np.asarray(p, dtype=float)
    if local.ndim != 3 or local.shape[:2] != p.shape:
        raise DimensionError(f"local features {local.shape} and distribution {p.shape} disagree")
    context = np.einsum("ni,nic->nc", p, local)
    return sigmoid(layer(context)), context


def build_filter_backward(dfilter: np.ndarray, local: np.ndarray, p: np.ndarray,
                          layer: AdaptiveFilterLayer, filt: np.ndarray, context: np.ndarray):
    """Returns ``(d_local, d_p)``."""
    dctx = layer.backward(sigmoid_backward(dfilter, filt), context)
    dlocal = p[:, :, None] * dctx[:, None, :]
    dp = np.einsum("nic,nc->ni", local, dctx)
    return dlocal, dp


def augment_queries(features: np.ndarray, filt: np.ndarray) -> np.ndarray:
    if features.shape != filt.shape:
        raise DimensionError(f"features {features.shape} and filter {filt.shape} disagree")
    return features * filt


def augment_queries_backward(dout, features, filt):
    return dout * filt, dout * features


# ---------------------------------------------------------------------------
# deformable key-point aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPointRecord:
    position: tuple[float, float]
    attention_weight: float
    head: int
    query: int


@dataclass
class KeyPoints:
    """Dense key-point arrays: positions ``N x heads x K x 2`` (feature px), weights ``N x heads x K``."""

    positions: np.ndarray
    weights: np.ndarray
    stride_to_image: int = 16

    def records(self) -> list[KeyPointRecord]:
        n, h, k = self.weights.shape
        return [KeyPointRecord((float(self.positions[q, j, m, 0]), float(self.positions[q, j, m, 1])),
                               float(self.weights[q, j, m]), j, q)
                for q in range(n) for j in range(h) for m in range(k)]

    def image_positions(self) -> np.ndarray:
        return (self.positions + 0.5) * self.stride_to_image


@dataclass(frozen=True)
class DeformableConfig:
    heads: int = 8
    points_per_head: int = 4
    offset_init_scale: float = 1.0

    def validate(self, channels: int):
        if self.heads < 1 or channels % self.heads:
            raise ConfigurationError(f"channels={channels} not divisible by heads={self.heads}")
        if self.points_per_head < 1:
            raise ConfigurationError("points_per_head must be >= 1")


class DeformableAttention:
    def __init__(self, channels: int, cfg: DeformableConfig = DeformableConfig(), rng=None,
                 name: str = "deform"):
        cfg.validate(channels)
        self.cfg = cfg
        self.channels = channels
        h, k = cfg.heads, cfg.points_per_head
        self.offset_head = Linear(f"{name}.offset", channels, h * k * 2, None,
                                  bias=_ring_offsets(h, k, cfg.offset_init_scale).ravel())
        self.weight_head = Linear(f"{name}.attn_weight", channels, h * k, None)
        self.value_proj = Linear(f"{name}.value", channels, channels, rng)
        self.output_proj = Linear(f"{name}.output", channels, channels, rng)

    def parameters(self):
        return (self.offset_head.parameters() + self.weight_head.parameters()
                + self.value_proj.parameters() + self.output_proj.parameters())


def _ring_offsets(heads: int, k: int, scale: float) -> np.ndarray:
    theta = 2 * np.pi * np.arange(heads) / heads
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    grid = grid / np.abs(grid).max(axis=1, keepdims=True)
    return scale * grid[:, None, :] * np.arange(1, k + 1)[None, :, None]


def deformable_aggregate(feature_map: FeatureMap, positions, augmented: np.ndarray,
                         attn: DeformableAttention):
    """Returns ``(output, keypoints, cache)``."""
    if isinstance(positions, QuerySet):
        positions = positions.positions
    if feature_map.stride_to_image != 16:
        raise DimensionError("deformable aggregation samples stride-16 maps")
    n, c = augmented.shape
    h, k = attn.cfg.heads, attn.cfg.points_per_head
    d = c // h
    offsets = attn.offset_head(augmented).reshape(n, h, k, 2)
    ref = feature_map.denormalize(positions)
    loc = ref[:, None, None, :] + offsets
    aw = softmax(attn.weight_head(augmented).reshape(n, h, k))
    value = attn.value_proj(feature_map.data)
    flat_loc = loc.reshape(-1, 2)
    samples = bilinear_sample(value, flat_loc).reshape(n, h, k, h, d)
    per_head = np.einsum("nhkgd,hg->nhkd", samples, np.eye(h))
    agg = np.einsum("nhk,nhkd->nhd", aw, per_head).reshape(n, c)
    out = augmented + attn.output_proj(agg)

    clamped = np.stack([np.clip(loc[..., 0], 0, feature_map.width - 1),
                        np.clip(loc[..., 1], 0, feature_map.height - 1)], axis=-1)
    keypoints = KeyPoints(clamped, aw, feature_map.stride_to_image)
    cache = (feature_map.data, augmented, value, flat_loc, aw, per_head, agg)
    return out, keypoints, cache


def deformable_aggregate_backward(dout: np.ndarray, attn: DeformableAttention, cache):
    """Returns ``(d_augmented, d_map)``."""
    data, augmented, value, flat_loc, aw, per_head, agg = cache
    n, c = augmented.shape
    h, k = attn.cfg.heads, attn.cfg.points_per_head
    d = c // h
    dagg = attn.output_proj.backward(dout, agg).reshape(n, h, d)
    daw = np.einsum("nhd,nhkd->nhk", dagg, per_head)
    dper_head = aw[..., None] * dagg[:, :, None, :]
    dsamples = np.einsum("nhkd,hg->nhkgd", dper_head, np.eye(h)).reshape(-1, c)
    dvalue, dloc = bilinear_sample_backward(dsamples, value, flat_loc)
    dlogits = softmax_backward(daw, aw).reshape(n, h * k)
    daug = dout.copy()
    daug += attn.weight_head.backward(dlogits, augmented)
    daug += attn.offset_head.backward(dloc.reshape(n, h * k * 2), augmented)
    dmap = attn.value_proj.backward(dvalue, data)
    return daug, dmap


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------


class FFN:
    def __init__(self, channels: int, hidden: int, rng=None, name: str = "ffn"):
        self.fc1 = Linear(f"{name}.fc1", channels, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, channels, rng)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, x):
        pre = self.fc1(x)
        act = relu(pre)
        return x + self.fc2(act), (x, pre, act)

    def backward(self, dy, cache):
        x, pre, act = cache
        dact = self.fc2.backward(dy, act)
        return dy + self.fc1.backward(relu_backward(dact, pre), x)


# metric depth (channel 0 of the depth map) is divided by this before the
# reduction convs so tens of meters do not swamp the code channels
DEPTH_INPUT_SCALE = 50.0


def _depth_scale(channels: int) -> np.ndarray:
    scale = np.ones(channels)
    scale[0] = 1.0 / DEPTH_INPUT_SCALE
    return scale


def _depth_input(map_d: FeatureMap) -> FeatureMap:
    return FeatureMap(map_d.data * _depth_scale(map_d.channels), map_d.stride_to_image)


@dataclass(frozen=True)
class LayerConfig:
    n_queries: int
    channels: int
    presets: ShapeScalePreset
    attn_heads: int = 8
    deformable: DeformableConfig = DeformableConfig()
    ffn_hidden: int | None = None

    def validate(self):
        if self.channels % self.attn_heads:
            raise ConfigurationError(
                f"channels={self.channels} not divisible by attention heads={self.attn_heads}")
        self.deformable.validate(self.channels)


@dataclass
class LayerOutput:
    features: np.ndarray
    distribution: MatchingDistribution
    keypoints: KeyPoints
    local: np.ndarray
    filter: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


class DecoderLayer:
    def __init__(self, cfg: LayerConfig, rng: np.random.Generator | None = None, name: str = "layer0"):
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.self_attn = SelfAttention(f"{name}.self_attn", c, cfg.attn_heads, rng)
        self.reduce_v = MapReducer(f"{name}.reduce_v", c, rng)
        self.reduce_d = MapReducer(f"{name}.reduce_d", c, rng)
        self.fusion = FusionWeights(cfg.n_queries, f"{name}.fusion")
        self.matching_head = MatchingHead(c, len(cfg.presets), rng, f"{name}.matching_head")
        self.filter = AdaptiveFilterLayer(c, None, f"{name}.filter")
        self.deform = DeformableAttention(c, cfg.deformable, rng, f"{name}.deform")
        self.ffn = FFN(c, cfg.ffn_hidden or 4 * c, rng, f"{name}.ffn")

    def parameters(self):
        return (self.self_attn.parameters() + self.reduce_v.parameters() + self.reduce_d.parameters()
                + self.fusion.parameters() + self.matching_head.parameters()
                + self.filter.parameters() + self.deform.parameters() + self.ffn.parameters())

    def forward(self, map_v: FeatureMap, map_d: FeatureMap, queries: QuerySet) -> LayerOutput:
        if queries.features.shape != (self.cfg.n_queries, self.cfg.channels):
            raise DimensionError(
                f"queries {queries.features.shape} do not match layer "
                f"({self.cfg.n_queries}, {self.cfg.channels})")
        pos = queries.positions
        x1, sa_cache = self.self_attn.forward(queries.features)
        local = extract_local_features(map_v, pos, self.cfg.presets)
        red_v, rv_cache = reduce_feature_map(map_v, self.reduce_v)
        red_d, rd_cache = reduce_feature_map(_depth_input(map_d), self.reduce_d)
        fv = sample_queries_from_map(red_v, pos)
        fd = sample_queries_from_map(red_d, pos)
        fused = fuse_query_features(fv, fd, self.fusion)
        dist = predict_matching_distribution(fused, self.matching_head)
        filt, context = build_filter(local, dist, self.filter)
        aug = augment_queries(x1, filt)
        z, keypoints, df_cache = deformable_aggregate(map_v, pos, aug, self.deform)
        y, ffn_cache = self.ffn.forward(z)
        cache = dict(map_v=map_v, map_d=map_d, pos=pos, x1=x1, sa=sa_cache, red_v=red_v,
                     red_d=red_d, rv=rv_cache, rd=rd_cache, fv=fv, fd=fd, fused=fused,
                     context=context, aug=aug, deform=df_cache, ffn=ffn_cache)
        return LayerOutput(y, dist, keypoints, local, filt, cache)

    def backward(self, out: LayerOutput, dfeatures: np.ndarray, dlogits: np.ndarray | None = None,
                 map_grads: bool = True):
        """Backpropagate; returns ``(d_query_features, d_map_v, d_map_d)``.

        With ``map_grads=False`` the map gradients are skipped (returned as
        None) since no parameter sits upstream of the input maps.
        """
        c = out.cache
        dz = self.ffn.backward(dfeatures, c["ffn"])
        daug, dmap_v = deformable_aggregate_backward(dz, self.deform, c["deform"])
        dx1, dfilt = augment_queries_backward(daug, c["x1"], out.filter)
        p = out.distribution.p
        dlocal, dp = build_filter_backward(dfilt, out.local, p, self.filter, out.filter, c["context"])
        dlog = softmax_backward(dp, p)
        if dlogits is not None:
            dlog = dlog + dlogits
        dfused = self.matching_head.backward(dlog, c["fused"])
        dfv, dfd = fuse_query_features_backward(dfused, c["fv"], c["fd"], self.fusion)
        dred_v = sample_queries_backward(dfv, c["red_v"], c["pos"])
        dred_d = sample_queries_backward(dfd, c["red_d"], c["pos"])
        dq = self.self_attn.backward(dx1, c["sa"])
        dmap_v += reduce_feature_map_backward(dred_v, self.reduce_v, c["rv"])
        dmap_d = reduce_feature_map_backward(dred_d, self.reduce_d, c["rd"]) * _depth_scale(c["map_d"].channels)
        if not map_grads:
            return dq, None, None
        dmap_v += extract_local_features_backward(dlocal, c["map_v"], c["pos"], self.cfg.presets)
        return dq, dmap_v, dmap_d


def decoder_forward(map_v: FeatureMap, map_d: FeatureMap, queries: QuerySet, layers):
    """Run a stack of decoder layers; returns ``(updated QuerySet, distribution, keypoints, outputs)``.

    The distribution and key points are those of the final layer; ``outputs``
    keeps every layer's :class:`LayerOutput` for backward and per-layer losses.
    """
    if isinstance(layers, DecoderLayer):
        layers = [layers]
    outputs = []
    current = queries
    for layer in layers:
        out = layer.forward(map_v, map_d, current)
        outputs.append(out)
        current = QuerySet(out.features, queries.positions)
    last = outputs[-1]
    return current, last.distribution, last.keypoints, outputs


def decoder_backward(layers, outputs, dfeatures, dlogits_per_layer=None, map_grads: bool = True):
    """Returns ``(d_query_features, d_map_v, d_map_d)`` for :func:`decoder_forward`."""
    if isinstance(layers, DecoderLayer):
        layers = [layers]
    dmap_v = dmap_d = 0.0
    dx = dfeatures
    for j in reversed(range(len(layers))):
        dl = None if dlogits_per_layer is None else dlogits_per_layer[j]
        dx, dv, dd = layers[j].backward(outputs[j], dx, dl, map_grads)
        if map_grads:
            dmap_v = dmap_v + dv
            dmap_d = dmap_d + dd
    if not map_grads:
        return dx, None, None
    return dx, dmap_v, dmap_d
