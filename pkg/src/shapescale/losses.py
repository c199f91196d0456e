"""Target assignment, prediction heads and the composite detection objective."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import CapacityError, InvalidTargetError, NumericalGuardError
from .msm import focal_loss_rows
from .sampling import FeatureMap, QuerySet, bilinear_sample, bilinear_sample_backward
from .tensor import Linear, as_array, sigmoid

TERM_NAMES = ("class", "2dsize", "xy3d", "giou", "3dsize", "angle", "depth")


@dataclass
class ObjectTarget:
    class_id: int
    box_lrtb: np.ndarray
    center3d_proj: np.ndarray
    size3d: np.ndarray
    depth: float
    angle: float
    focal_length: float

    def __post_init__(self):
        self.box_lrtb = as_array(self.box_lrtb)
        self.center3d_proj = as_array(self.center3d_proj)
        self.size3d = as_array(self.size3d)
        l, r, t, b = self.box_lrtb
        if not (l + r > 0 and t + b > 0):
            raise InvalidTargetError(f"degenerate 2D box {self.box_lrtb}")
        if not (self.depth > 0 and self.focal_length > 0 and np.all(self.size3d > 0)):
            raise InvalidTargetError("depth, focal length and 3D size must be positive")

    @property
    def box_xyxy(self) -> np.ndarray:
        l, r, t, b = self.box_lrtb
        cx, cy = self.center3d_proj
        return np.array([cx - l, cy - t, cx + r, cy + b])

    @property
    def center2d(self) -> np.ndarray:
        x1, y1, x2, y2 = self.box_xyxy
        return np.array([(x1 + x2) / 2, (y1 + y2) / 2])

    @property
    def area(self) -> float:
        l, r, t, b = self.box_lrtb
        return float((l + r) * (t + b))


@dataclass
class QueryPrediction:
    """Per-query outputs, stacked over the N queries."""

    class_logits: np.ndarray
    box_lrtb: np.ndarray
    center3d_proj: np.ndarray
    d_reg: np.ndarray
    log_sigma: np.ndarray
    size3d: np.ndarray
    angle_sincos: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @classmethod
    def zeros_like(cls, other: "QueryPrediction") -> "QueryPrediction":
        return cls(**{f.name: np.zeros_like(getattr(other, f.name)) for f in fields(cls)})


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, ...] = (2.0, 5.0, 10.0, 2.0, 1.0, 1.0, 1.0)
    lambda_msm: float = 0.1

    def __post_init__(self):
        if len(self.lambdas) != 7:
            raise ValueError("seven query-loss weights expected")
        if not all(np.isfinite(x) and x >= 0 for x in (*self.lambdas, self.lambda_msm)):
            raise ValueError("loss weights must be finite and nonnegative")


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

# output layout of the fused head after the class logits
_SLICES = {"box_lrtb": 4, "center3d_proj": 2, "d_reg": 1, "log_sigma": 1, "size3d": 3, "angle_sincos": 2}


class PredictionHeads:
    """One linear map C -> (classes + background + 13 regression outputs).

    ``box_lrtb`` is a sigmoid fraction of the image size so ``t+b`` stays
    positive; ``center3d_proj`` is the reference position plus a normalized
    offset, both scaled to image pixels.
    """

    def __init__(self, channels: int, n_classes: int, rng=None, name: str = "heads",
                 depth_init: float = 30.0, size_init=(1.5, 1.6, 3.9)):
        self.n_logits = n_classes + 1
        width = self.n_logits + sum(_SLICES.values())
        self.linear = Linear(name, channels, width, rng)
        if rng is not None:
            self.linear.weight.value *= 0.1
        bias = self.linear.bias.value
        s = self._spans()
        bias[s["box_lrtb"]] = -2.0
        bias[s["d_reg"]] = depth_init
        bias[s["size3d"]] = size_init
        bias[s["angle_sincos"]] = (0.0, 1.0)

    def _spans(self):
        spans = {"class_logits": slice(0, self.n_logits)}
        start = self.n_logits
        for name, n in _SLICES.items():
            spans[name] = slice(start, start + n)
            start += n
        return spans

    def parameters(self):
        return self.linear.parameters()

    def forward(self, features: np.ndarray, positions: np.ndarray, image_size):
        z = self.linear(features)
        s = self._spans()
        iw, ih = image_size
        box_frac = sigmoid(z[:, s["box_lrtb"]])
        pred = QueryPrediction(
            class_logits=z[:, s["class_logits"]],
            box_lrtb=box_frac * np.array([iw, iw, ih, ih]),
            center3d_proj=(positions + z[:, s["center3d_proj"]]) * np.array([iw, ih]),
            d_reg=z[:, s["d_reg"]][:, 0],
            log_sigma=z[:, s["log_sigma"]][:, 0],
            size3d=z[:, s["size3d"]],
            angle_sincos=z[:, s["angle_sincos"]],
        )
        return pred, (features, box_frac, image_size)

    def backward(self, dpred: QueryPrediction, cache) -> np.ndarray:
        features, box_frac, (iw, ih) = cache
        s = self._spans()
        dz = np.zeros((features.shape[0], self.linear.weight.shape[1]))
        dz[:, s["class_logits"]] = dpred.class_logits
        dz[:, s["box_lrtb"]] = dpred.box_lrtb * np.array([iw, iw, ih, ih]) * box_frac * (1 - box_frac)
        dz[:, s["center3d_proj"]] = dpred.center3d_proj * np.array([iw, ih])
        dz[:, s["d_reg"]] = dpred.d_reg[:, None]
        dz[:, s["log_sigma"]] = dpred.log_sigma[:, None]
        dz[:, s["size3d"]] = dpred.size3d
        dz[:, s["angle_sincos"]] = dpred.angle_sincos
        return self.linear.backward(dz, features)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def match_queries(queries, targets, image_size) -> list[tuple[int, int]]:
    """Greedy one-to-one assignment, larger targets choose first.

    Each target, in descending 2D-area order (ties by input order), claims the
    unclaimed query whose reference position is nearest to the target's 2D
    box center in normalized coordinates.
    """
    positions = queries.positions if isinstance(queries, QuerySet) else as_array(queries)
    if len(targets) > len(positions):
        raise CapacityError(f"{len(targets)} targets but only {len(positions)} queries")
    iw, ih = image_size
    order = sorted(range(len(targets)), key=lambda t: -targets[t].area)
    free = np.ones(len(positions), dtype=bool)
    matches = []
    for t in order:
        center = targets[t].center2d / np.array([iw, ih])
        dist = np.linalg.norm(positions - center, axis=1)
        dist[~free] = np.inf
        q = int(np.argmin(dist))
        free[q] = False
        matches.append((q, t))
    return sorted(matches)


# ---------------------------------------------------------------------------
# GIoU on center-offset boxes
# ---------------------------------------------------------------------------

def giou_loss_and_grad(pred_lrtb: np.ndarray, target_lrtb: np.ndarray):
    """Row-wise ``1 - GIoU`` for boxes sharing a center; returns ``(loss, d_pred)``."""
    p = np.atleast_2d(as_array(pred_lrtb))
    g = np.atleast_2d(as_array(target_lrtb))
    pl, pr, pt, pb = p.T
    gl, gr, gt, gb = g.T
    wp, hp = pl + pr, pt + pb
    area_g = (gl + gr) * (gt + gb)
    degenerate = (wp <= 0) | (hp <= 0)
    area_p = np.where(degenerate, 0.0, wp * hp)

    iw_raw = np.minimum(pr, gr) + np.minimum(pl, gl)
    ih_raw = np.minimum(pb, gb) + np.minimum(pt, gt)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = np.where(degenerate, 0.0, iw * ih)
    union = area_p + area_g - inter
    ew = np.maximum(pr, gr) + np.maximum(pl, gl)
    eh = np.maximum(pb, gb) + np.maximum(pt, gt)
    encl = ew * eh
    loss = 2.0 - inter / union - union / encl

    d_union = inter / union ** 2 - 1.0 / encl
    d_inter = -1.0 / union - d_union
    d_area_p = np.where(degenerate, 0.0, d_union)
    d_inter = np.where(degenerate, 0.0, d_inter)
    d_encl = union / encl ** 2

    d_iw = d_inter * ih * (iw_raw > 0)
    d_ih = d_inter * iw * (ih_raw > 0)
    d_ew = d_encl * eh
    d_eh = d_encl * ew
    d_wp = d_area_p * hp
    d_hp = d_area_p * wp
    grad = np.stack([
        d_wp + d_iw * (pl < gl) + d_ew * (pl > gl),
        d_wp + d_iw * (pr < gr) + d_ew * (pr > gr),
        d_hp + d_ih * (pt < gt) + d_eh * (pt > gt),
        d_hp + d_ih * (pb < gb) + d_eh * (pb > gb),
    ], axis=1)
    return loss, grad


def giou_loss(pred_lrtb, target_lrtb, center=(0.0, 0.0)) -> float:
    """``1 - GIoU``; the shared center does not affect the value."""
    del center
    return float(giou_loss_and_grad(pred_lrtb, target_lrtb)[0][0])


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

def geometric_depth(focal_length, h3d, t, b):
    height = np.asarray(t) + np.asarray(b)
    if np.any(height <= 0):
        raise NumericalGuardError("predicted 2D box height must be positive for geometric depth")
    return focal_length * np.asarray(h3d) / height


def _depth_plane(depth_map: FeatureMap) -> np.ndarray:
    return depth_map.data[:, :, :1]


def _center_to_feature(center_px: np.ndarray, depth_map: FeatureMap) -> np.ndarray:
    return np.atleast_2d(center_px) / depth_map.stride_to_image - 0.5


def depth_components(pred: QueryPrediction, target: ObjectTarget, depth_map: FeatureMap, query: int = 0):
    """Returns ``(d_reg, d_geo, d_map, d_pre)`` for one query.

    ``d_map`` reads channel 0 of the depth map, which carries metric depth.
    """
    l, r, t, b = pred.box_lrtb[query]
    d_reg = float(pred.d_reg[query])
    d_geo = float(geometric_depth(target.focal_length, pred.size3d[query, 0], t, b))
    coords = _center_to_feature(pred.center3d_proj[query], depth_map)
    d_map = float(bilinear_sample(_depth_plane(depth_map), coords)[0, 0])
    return d_reg, d_geo, d_map, (d_reg + d_geo + d_map) / 3.0


def laplacian_depth_loss(d_pre, d_gt, log_sigma) -> float:
    sigma = np.exp(log_sigma)
    return float(2.0 / sigma * abs(d_gt - d_pre) + log_sigma)


def laplacian_depth_grad(d_pre, d_gt, log_sigma):
    """Returns ``(d/d d_pre, d/d log_sigma)``."""
    sigma = np.exp(log_sigma)
    delta = d_gt - d_pre
    return -2.0 * np.sign(delta) / sigma, 1.0 - 2.0 * np.abs(delta) / sigma


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------

@dataclass
class QueryLossResult:
    total: float
    terms: dict
    grads: QueryPrediction = field(repr=False)


def query_loss(matches, preds: QueryPrediction, targets, depth_map: FeatureMap,
               weights: LossWeights = LossWeights(), gamma: float = 2.0) -> QueryLossResult:
    """Seven-term weighted detection loss with its gradient w.r.t. ``preds``.

    Classification runs over all queries (unmatched ones target the trailing
    background class). The regression terms average over matched queries; 2D
    quantities are normalized by the image size, implied by the depth map.
    """
    lam = dict(zip(TERM_NAMES, weights.lambdas))
    grads = QueryPrediction.zeros_like(preds)
    n, n_logits = preds.class_logits.shape
    background = n_logits - 1
    iw = depth_map.width * depth_map.stride_to_image
    ih = depth_map.height * depth_map.stride_to_image

    cls_target = np.full(n, background)
    for q, t in matches:
        cls_target[q] = targets[t].class_id
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    losses, g = focal_loss_rows(preds.class_logits, cls_target, gamma)
    terms["class"] = float(losses.sum() / n)
    grads.class_logits[:] = lam["class"] * g / n

    m = len(matches)
    if m:
        qs = np.array([q for q, _ in matches])
        tg = [targets[t] for _, t in matches]
        box_t = np.stack([t.box_lrtb for t in tg])
        ctr_t = np.stack([t.center3d_proj for t in tg])
        size_t = np.stack([t.size3d for t in tg])
        ang_t = np.stack([[np.sin(t.angle), np.cos(t.angle)] for t in tg])
        depth_t = np.array([t.depth for t in tg])
        focal = np.array([t.focal_length for t in tg])
        g_box = np.zeros((m, 4))
        g_ctr = np.zeros((m, 2))
        g_size = np.zeros((m, 3))

        box_norm = np.array([iw, iw, ih, ih])
        diff = (preds.box_lrtb[qs] - box_t) / box_norm
        terms["2dsize"] = float(np.abs(diff).sum() / m)
        g_box += lam["2dsize"] * np.sign(diff) / box_norm / m

        ctr_norm = np.array([iw, ih])
        diff = (preds.center3d_proj[qs] - ctr_t) / ctr_norm
        terms["xy3d"] = float(np.abs(diff).sum() / m)
        g_ctr += lam["xy3d"] * np.sign(diff) / ctr_norm / m

        gl, gg = giou_loss_and_grad(preds.box_lrtb[qs], box_t)
        terms["giou"] = float(gl.sum() / m)
        g_box += lam["giou"] * gg / m

        diff = preds.size3d[qs] - size_t
        terms["3dsize"] = float(np.abs(diff).sum() / m)
        g_size += lam["3dsize"] * np.sign(diff) / m

        diff = preds.angle_sincos[qs] - ang_t
        terms["angle"] = float(np.abs(diff).sum() / m)
        grads.angle_sincos[qs] = lam["angle"] * np.sign(diff) / m

        box_p = preds.box_lrtb[qs]
        height = box_p[:, 2] + box_p[:, 3]
        h3d = preds.size3d[qs, 0]
        d_geo = geometric_depth(focal, h3d, box_p[:, 2], box_p[:, 3])
        coords = _center_to_feature(preds.center3d_proj[qs], depth_map)
        plane = _depth_plane(depth_map)
        d_map = bilinear_sample(plane, coords)[:, 0]
        d_pre = (preds.d_reg[qs] + d_geo + d_map) / 3.0
        ls = preds.log_sigma[qs]
        terms["depth"] = float(np.sum(2.0 / np.exp(ls) * np.abs(depth_t - d_pre) + ls) / m)
        g_pre, g_ls = laplacian_depth_grad(d_pre, depth_t, ls)
        w_depth = lam["depth"] / m
        g_pre = w_depth * g_pre / 3.0
        grads.log_sigma[qs] = w_depth * g_ls
        grads.d_reg[qs] = g_pre
        g_size[:, 0] += g_pre * focal / height
        g_h = -g_pre * focal * h3d / height ** 2
        g_box[:, 2] += g_h
        g_box[:, 3] += g_h
        _, dcoords = bilinear_sample_backward(g_pre[:, None], plane, coords)
        g_ctr += dcoords / depth_map.stride_to_image

        grads.box_lrtb[qs] = g_box
        grads.center3d_proj[qs] = g_ctr
        grads.size3d[qs] = g_size

    total = float(sum(lam[k] * terms[k] for k in TERM_NAMES))
    return QueryLossResult(total, terms, grads)


def total_loss(query_loss_value: float, msm_loss_value: float, lambda_msm: float) -> float:
    return query_loss_value + lambda_msm * msm_loss_value
