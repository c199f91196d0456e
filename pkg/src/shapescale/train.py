"""Model assembly, optimizers, the training loop and held-out evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .decoder import (DecoderLayer, DeformableConfig, LayerConfig, LayerOutput, decoder_backward,
                      decoder_forward)
from .errors import NonFiniteLossError, NumericalGuardError
from .losses import (TERM_NAMES, LossWeights, PredictionHeads, QueryPrediction, match_queries,
                     query_loss, total_loss)
from .metrics import MetricsReport, PrecisionCounts, keypoint_counts
from .msm import MSMConfig, generate_category_label, msm_loss, truth_from_box
from .sampling import QuerySet
from .scene import SyntheticScene, generate_scene
from .tensor import Parameter

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


def train_seed(cfg: RunConfig, step: int, item: int):
    return (cfg.seed, TRAIN_STREAM, step, item)


def eval_seed(cfg: RunConfig, index: int):
    return (cfg.seed, EVAL_STREAM, index)


@dataclass
class Forward:
    scene: SyntheticScene
    queries: QuerySet
    outputs: list
    pred: QueryPrediction
    head_cache: tuple
    matches: list
    labels: list

    @property
    def last(self) -> LayerOutput:
        return self.outputs[-1]


@dataclass
class StepResult:
    total: float
    query_total: float
    terms: dict
    msm: float
    forward: Forward = field(repr=False)


class Model:
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng((cfg.seed if seed is None else seed, 99))
        self.presets = cfg.preset_table
        self.query_embed = Parameter(rng.normal(0, 1.0, (cfg.n_queries, cfg.channels)), "query_embed")
        layer_cfg = LayerConfig(cfg.n_queries, cfg.channels, self.presets, cfg.attn_heads,
                                DeformableConfig(cfg.deform_heads, cfg.points_per_head,
                                                 cfg.offset_init_scale),
                                cfg.ffn_hidden)
        self.layers = [DecoderLayer(layer_cfg, rng, f"layer{j}") for j in range(cfg.layers)]
        self.heads = PredictionHeads(cfg.channels, len(cfg.classes), rng)
        self.weights = LossWeights(cfg.lambdas, cfg.lambda_msm)
        self.msm_cfg = MSMConfig(cfg.w1, cfg.w2, cfg.gamma, cfg.lambda_msm)

    def parameters(self) -> list[Parameter]:
        params = [self.query_embed]
        for layer in self.layers:
            params += layer.parameters()
        return params + self.heads.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: saved shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]

    def save(self, path):
        np.savez(path, **self.state_dict())

    @classmethod
    def load(cls, path, cfg: RunConfig) -> "Model":
        model = cls(cfg)
        with np.load(path) as data:
            model.load_state_dict({k: data[k] for k in data.files})
        return model

    # -- forward / loss -----------------------------------------------------

    def forward(self, scene: SyntheticScene) -> Forward:
        queries = QuerySet(self.query_embed.value, scene.query_positions)
        current, _, _, outputs = decoder_forward(scene.map_v, scene.map_d, queries, self.layers)
        pred, head_cache = self.heads.forward(current.features, queries.positions, scene.image_size)
        matches = match_queries(queries, scene.targets, scene.image_size)
        labels = [(q, generate_category_label(truth_from_box(*scene.targets[t].box_lrtb),
                                              self.presets, self.msm_cfg))
                  for q, t in matches]
        return Forward(scene, queries, outputs, pred, head_cache, matches, labels)

    def loss(self, scene: SyntheticScene, backward: bool = True, scale: float = 1.0) -> StepResult:
        """Composite loss on one scene; with ``backward`` accumulates ``scale * grad``."""
        try:
            fwd = self.forward(scene)
            qres = query_loss(fwd.matches, fwd.pred, scene.targets, scene.map_d, self.weights, self.cfg.gamma)
        except NumericalGuardError as exc:
            raise NonFiniteLossError(f"numerical failure on scene {scene.seed}: {exc}",
                                     dump={"seed": scene.seed}) from exc
        n_layers = len(self.layers)
        msm_total = 0.0
        dlogits = []
        for out in fwd.outputs:
            value, d = (msm_loss(out.distribution, fwd.labels, self.cfg.gamma) if fwd.labels
                        else (0.0, np.zeros_like(out.distribution.p)))
            msm_total += value / n_layers
            dlogits.append(scale * self.cfg.lambda_msm * d / n_layers)
        total = total_loss(qres.total, msm_total, self.cfg.lambda_msm)
        if not np.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite loss on scene {scene.seed}",
                dump={"seed": scene.seed, "terms": qres.terms, "msm": msm_total})
        if backward:
            grads = qres.grads
            if scale != 1.0:
                grads = QueryPrediction(**{k: v * scale for k, v in vars(grads).items()})
            dfeat = self.heads.backward(grads, fwd.head_cache)
            dq, _, _ = decoder_backward(self.layers, fwd.outputs, dfeat, dlogits, map_grads=False)
            self.query_embed.accumulate(dq)
        return StepResult(total, qres.total, qres.terms, msm_total, fwd)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= self.lr * v


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.value
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in params)))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def lr_at(cfg: RunConfig, step: int) -> float:
    """Cosine decay from ``cfg.lr`` to ``cfg.lr * cfg.lr_floor`` over the run."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))


def make_optimizer(cfg: RunConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

def evaluate(model: Model, scenes, step: int = 0) -> MetricsReport:
    counts = PrecisionCounts()
    correct = labeled = 0
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    total = msm = 0.0
    for scene in scenes:
        res = model.loss(scene, backward=False)
        fwd = res.forward
        counts += keypoint_counts(fwd.last.keypoints, fwd.matches, scene.targets)
        pred_cat = fwd.last.distribution.p.argmax(axis=1)
        for q, label in fwd.labels:
            correct += int(pred_cat[q] == label.index)
            labeled += 1
        total += res.total
        msm += res.msm
        for k in TERM_NAMES:
            terms[k] += res.terms[k]
    n = max(len(scenes), 1)
    return MetricsReport(
        step=step,
        position_precision=counts.position_precision,
        weighted_position_precision=counts.weighted_position_precision,
        matching_accuracy=correct / labeled if labeled else float("nan"),
        total_loss=total / n,
        msm_loss=msm / n,
        terms={k: v / n for k, v in terms.items()},
        empty=counts.empty,
    )


def eval_scenes(cfg: RunConfig, count: int | None = None):
    count = cfg.eval_scenes if count is None else count
    return [generate_scene(cfg, eval_seed(cfg, i)) for i in range(count)]


@dataclass
class TrainResult:
    model: Model
    reports: list
    loss_trace: list


def train_loop(cfg: RunConfig, scenes=None, held_out=None, model: Model | None = None) -> TrainResult:
    """Train for ``cfg.steps`` steps; evaluates every ``eval_interval`` steps and at the end.

    ``scenes`` optionally fixes the training data: a list cycled through in
    order instead of freshly drawn scenes.
    """
    cfg.validate()
    model = model or Model(cfg)
    opt = make_optimizer(cfg, model.parameters())
    held_out = eval_scenes(cfg) if held_out is None else held_out
    reports, trace = [], []
    fusion_excursions = 0
    for step in range(cfg.steps):
        model.zero_grad()
        batch_loss = 0.0
        for b in range(cfg.batch_size):
            if scenes is not None:
                scene = scenes[(step * cfg.batch_size + b) % len(scenes)]
            else:
                scene = generate_scene(cfg, train_seed(cfg, step, b))
            batch_loss += model.loss(scene, scale=1.0 / cfg.batch_size).total / cfg.batch_size
        trace.append(batch_loss)
        if cfg.grad_clip:
            clip_grad_norm(opt.params, cfg.grad_clip)
        opt.lr = lr_at(cfg, step)
        opt.step()
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
            excursions = sum(layer.fusion.outside_unit_interval() for layer in model.layers)
            if excursions and not fusion_excursions:
                log.info("step %d: %d fusion weights left [0, 1]", step + 1, excursions)
            fusion_excursions = excursions
            if held_out:
                reports.append(evaluate(model, held_out, step + 1))
    return TrainResult(model, reports, trace)


def ablate_lambda(cfg: RunConfig, values, seeds, progress=None) -> dict:
    """Final held-out report for every ``(lambda_msm, seed)`` pair.

    Held-out scenes depend only on the seed, so every lambda is scored on the
    same scenes.
    """
    results = {}
    for seed in seeds:
        base = cfg.replace(seed=int(seed))
        held_out = eval_scenes(base)
        for lam in values:
            run = base.replace(lambda_msm=float(lam))
            rep = train_loop(run, held_out=held_out).reports[-1]
            results[(float(lam), int(seed))] = rep
            if progress is not None:
                progress(float(lam), int(seed), rep)
    return results
