"""Finite-difference checks for every differentiable operation.

Each check builds a small random problem from a seed, reduces the op's
output to a scalar with a fixed random projection, and compares the
hand-written backward pass against central differences via
:func:`grad_check`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoder import (AdaptiveFilterLayer, DecoderLayer, DeformableAttention, DeformableConfig,
                      LayerConfig, build_filter, build_filter_backward, decoder_backward,
                      decoder_forward, deformable_aggregate, deformable_aggregate_backward)
from .fusion import (FusionWeights, MatchingDistribution, MatchingHead, fuse_query_features,
                     fuse_query_features_backward, predict_matching_distribution)
from .losses import TERM_NAMES, LossWeights, ObjectTarget, QueryPrediction, match_queries, query_loss
from .msm import CategoryLabel, msm_loss
from .sampling import FeatureMap, QuerySet, ShapeScalePreset, bilinear_sample, bilinear_sample_backward
from .tensor import grad_check, softmax, softmax_backward

EPSILON = 1e-5
THRESHOLD = 1e-4
DEFAULT_SEEDS = tuple(range(10))
SMALL_PRESETS = ShapeScalePreset(((1, 1), (1, 2), (0.5, 2)))


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < THRESHOLD)


def _with_params(params, analytic):
    """Wrap a closure so gradients of ``params`` (read in place) are returned too."""
    def op(*_):
        for p in params:
            p.zero_grad()
        loss, grads = analytic()
        return loss, list(grads) + [p.grad.copy() for p in params]
    return op


def check_bilinear(seed: int) -> float:
    rng = np.random.default_rng((seed, 1))
    data = rng.normal(size=(4, 5, 3))
    coords = rng.uniform((0.1, 0.1), (3.9, 2.9), (6, 2))
    proj = rng.normal(size=(6, 3))

    def op(d, c):
        out = bilinear_sample(d, c)
        dm, dc = bilinear_sample_backward(proj, d, c)
        return float(np.sum(out * proj)), (dm, dc)

    return grad_check(op, [data, coords], EPSILON,
                      loss_only=lambda d, c: float(np.sum(bilinear_sample(d, c) * proj)))


def check_fusion(seed: int) -> float:
    rng = np.random.default_rng((seed, 2))
    fv, fd = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    weights = FusionWeights(3)
    weights.w.value[:] = rng.uniform(-0.5, 1.5, (3, 1))
    proj = rng.normal(size=(3, 4))

    def analytic():
        out = fuse_query_features(fv, fd, weights)
        return float(np.sum(out * proj)), fuse_query_features_backward(proj, fv, fd, weights)

    op = _with_params(weights.parameters(), analytic)
    return grad_check(op, [fv, fd, weights.w.value], EPSILON)


def check_matching_head(seed: int) -> float:
    rng = np.random.default_rng((seed, 3))
    fused = rng.normal(size=(3, 4))
    head = MatchingHead(4, 5, rng)
    proj = rng.normal(size=(3, 5))

    def analytic():
        dist = predict_matching_distribution(fused, head)
        dlog = softmax_backward(proj, dist.p)
        return float(np.sum(dist.p * proj)), [head.backward(dlog, fused)]

    op = _with_params(head.parameters(), analytic)
    return grad_check(op, [fused, head.weight.value, head.bias.value], EPSILON)


def check_filter(seed: int) -> float:
    rng = np.random.default_rng((seed, 4))
    local = rng.normal(size=(3, 4, 5))
    p = softmax(rng.normal(size=(3, 4)))
    layer = AdaptiveFilterLayer(5, rng)
    proj = rng.normal(size=(3, 5))

    def analytic():
        filt, ctx = build_filter(local, p, layer)
        return float(np.sum(filt * proj)), build_filter_backward(proj, local, p, layer, filt, ctx)

    op = _with_params(layer.parameters(), analytic)
    return grad_check(op, [local, p, layer.weight.value, layer.bias.value], EPSILON)


def check_deformable(seed: int) -> float:
    rng = np.random.default_rng((seed, 5))
    fmap = FeatureMap(rng.normal(size=(6, 7, 8)), 16)
    positions = rng.uniform(0.2, 0.8, (3, 2))
    aug = rng.normal(size=(3, 8))
    attn = DeformableAttention(8, DeformableConfig(heads=2, points_per_head=2), rng)
    attn.offset_head.weight.value[:] = rng.normal(0, 0.3, attn.offset_head.weight.shape)
    attn.weight_head.weight.value[:] = rng.normal(0, 0.5, attn.weight_head.weight.shape)
    proj = rng.normal(size=(3, 8))
    params = attn.parameters()

    def analytic():
        out, _, cache = deformable_aggregate(fmap, positions, aug, attn)
        daug, dmap = deformable_aggregate_backward(proj, attn, cache)
        return float(np.sum(out * proj)), [daug, dmap]

    return grad_check(_with_params(params, analytic), [aug, fmap.data] + [p.value for p in params],
                      EPSILON)


def _loss_problem(rng):
    n, n_cls = 4, 2
    depth_map = FeatureMap(np.abs(rng.normal(30, 8, (6, 6, 3))), 16)
    targets = []
    for k in range(2):
        center = rng.uniform(20, 76, 2)
        targets.append(ObjectTarget(
            class_id=k % n_cls, box_lrtb=rng.uniform(4, 20, 4), center3d_proj=center,
            size3d=rng.uniform(1, 4, 3), depth=float(rng.uniform(10, 50)),
            angle=float(rng.uniform(-np.pi, np.pi)), focal_length=700.0))
    positions = rng.uniform(0.1, 0.9, (n, 2))
    matches = match_queries(positions, targets, (96, 96))
    pred = QueryPrediction(
        class_logits=rng.normal(size=(n, n_cls + 1)),
        box_lrtb=rng.uniform(4, 20, (n, 4)),
        center3d_proj=rng.uniform(12, 84, (n, 2)),
        d_reg=rng.uniform(10, 50, n),
        log_sigma=rng.normal(0, 0.5, n),
        size3d=rng.uniform(1, 4, (n, 3)),
        angle_sincos=rng.normal(size=(n, 2)),
    )
    return pred, targets, matches, depth_map


def check_loss_term(term: str, seed: int) -> float:
    """Gradient of one query-loss term in isolation (its weight set to 1)."""
    rng = np.random.default_rng((seed, 6, TERM_NAMES.index(term)))
    pred, targets, matches, depth_map = _loss_problem(rng)
    weights = LossWeights(tuple(float(t == term) for t in TERM_NAMES), 0.0)
    names = list(vars(pred))
    arrays = [getattr(pred, k) for k in names]

    def op(*_):
        res = query_loss(matches, pred, targets, depth_map, weights)
        return res.total, [getattr(res.grads, k) for k in names]

    return grad_check(op, arrays, EPSILON)


def check_msm(seed: int) -> float:
    rng = np.random.default_rng((seed, 7))
    logits = rng.normal(size=(5, 6))
    labels = [(q, CategoryLabel.of(int(rng.integers(6)), 6)) for q in (0, 2, 3)]

    def analytic(z):
        loss, d = msm_loss(MatchingDistribution(softmax(z), z), labels)
        return loss, [d]

    return grad_check(analytic, [logits], EPSILON)


def check_decoder(seed: int, n: int = 3, c: int = 8, presets: ShapeScalePreset = SMALL_PRESETS) -> float:
    """Full layer: self-attention, reductions, fusion, matching, filter, aggregation and FFN."""
    rng = np.random.default_rng((seed, 8))
    map_v = FeatureMap(rng.normal(size=(8, 8, c)), 16)
    map_d = FeatureMap(rng.normal(size=(8, 8, c)), 16)
    queries = QuerySet(rng.normal(size=(n, c)), rng.uniform(0.25, 0.75, (n, 2)))
    layer = DecoderLayer(LayerConfig(n, c, presets, attn_heads=2,
                                     deformable=DeformableConfig(heads=2, points_per_head=2)), rng)
    layer.deform.offset_head.weight.value[:] = rng.normal(0, 0.3, layer.deform.offset_head.weight.shape)
    layer.deform.weight_head.weight.value[:] = rng.normal(0, 0.5, layer.deform.weight_head.weight.shape)
    layer.filter.weight.value[:] = rng.normal(0, 0.5, layer.filter.weight.shape)
    layer.fusion.w.value[:] = rng.uniform(0.2, 0.8, (n, 1))
    proj = rng.normal(size=(n, c))
    labels = [(0, CategoryLabel.of(1, len(presets))), (2, CategoryLabel.of(0, len(presets)))]
    params = layer.parameters()

    def loss_only(*_):
        current, dist, _, _ = decoder_forward(map_v, map_d, queries, [layer])
        return float(np.sum(current.features * proj)) + msm_loss(dist, labels)[0]

    def analytic():
        current, dist, _, outputs = decoder_forward(map_v, map_d, queries, [layer])
        m, dlog = msm_loss(dist, labels)
        dq, dmv, dmd = decoder_backward([layer], outputs, proj, [dlog])
        return float(np.sum(current.features * proj)) + m, [dq, dmv, dmd]

    inputs = [queries.features, map_v.data, map_d.data] + [p.value for p in params]
    return grad_check(_with_params(params, analytic), inputs, EPSILON, loss_only=loss_only)


def all_checks():
    """``(name, fn(seed) -> error)`` pairs, in report order."""
    checks = [("bilinear_sample", check_bilinear), ("fusion", check_fusion),
              ("matching_head", check_matching_head), ("filter", check_filter),
              ("deformable_aggregate", check_deformable)]
    checks += [(f"loss_{t}", (lambda s, t=t: check_loss_term(t, s))) for t in TERM_NAMES]
    checks += [("msm_loss", check_msm), ("decoder_forward", check_decoder)]
    return checks


def run_suite(seeds=DEFAULT_SEEDS, names=None, progress=None) -> list[CheckResult]:
    results = []
    for name, fn in all_checks():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            t0 = time.perf_counter()
            err = fn(seed)
            res = CheckResult(name, seed, float(err), time.perf_counter() - t0)
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def summarize(results) -> dict:
    """Worst error and seed count per op name."""
    out = {}
    for r in results:
        entry = out.setdefault(r.name, {"max_error": 0.0, "seeds": 0, "passed": True})
        entry["max_error"] = max(entry["max_error"], r.error)
        entry["seeds"] += 1
        entry["passed"] = entry["passed"] and r.passed
    return out
