"""Seeded synthetic scenes standing in for the backbone and encoders.

The visual map stamps each object's pixels with a pattern built from a
class code, an aspect-ratio code, angle and instance codes plus pixel
noise. The depth map carries metric depth in channel 0 and a smooth depth
code in the remaining channels (none on the background). Because 3D widths
are near-constant per class, depth is what reveals an object's 2D scale, and
the visual pattern reveals its shape.

Query reference positions are emitted per scene: one proposal per object,
jittered inside its box, plus background proposals away from all objects.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import CATEGORY_DIMENSIONS, RunConfig
from .losses import ObjectTarget
from .sampling import FeatureMap

STRIDE = 16
BACKGROUND_DEPTH = 90.0


@dataclass
class SyntheticScene:
    map_v: FeatureMap
    map_d: FeatureMap
    targets: list
    query_positions: np.ndarray
    seed: object

    @property
    def image_size(self) -> tuple[int, int]:
        return self.map_v.width * STRIDE, self.map_v.height * STRIDE

    def tobytes(self) -> bytes:
        parts = [self.map_v.data.tobytes(), self.map_d.data.tobytes(), self.query_positions.tobytes()]
        for t in self.targets:
            parts += [np.array([t.class_id, t.depth, t.angle, t.focal_length]).tobytes(),
                      t.box_lrtb.tobytes(), t.center3d_proj.tobytes(), t.size3d.tobytes()]
        return b"".join(parts)


class Appearance:
    """Fixed code vectors shared by every scene drawn from one world seed."""

    def __init__(self, world_seed: int, channels: int, n_classes: int):
        rng = np.random.default_rng(world_seed)
        unit = 1.0 / np.sqrt(channels)
        self.class_codes = rng.normal(0, unit, (n_classes, channels)) * 2.0
        self.shape_centers = np.linspace(np.log(0.25), np.log(4.0), 9)
        self.shape_codes = rng.normal(0, unit, (9, channels)) * 4.0
        self.angle_codes = rng.normal(0, unit, (2, channels))
        self.depth_centers = np.linspace(np.log(5.0), np.log(120.0), 10)
        self.depth_codes = rng.normal(0, 1.0 / np.sqrt(channels - 1), (10, channels - 1)) * 4.0

    def shape_code(self, ratio: float) -> np.ndarray:
        act = np.exp(-0.5 * ((np.log(ratio) - self.shape_centers) / 0.35) ** 2)
        return act @ self.shape_codes

    def depth_code(self, depth) -> np.ndarray:
        d = np.log(np.atleast_1d(depth))[:, None]
        act = np.exp(-0.5 * ((d - self.depth_centers) / 0.3) ** 2)
        return act @ self.depth_codes


@lru_cache(maxsize=8)
def _appearance(world_seed: int, channels: int, n_classes: int) -> Appearance:
    return Appearance(world_seed, channels, n_classes)


def appearance_for(cfg: RunConfig) -> Appearance:
    return _appearance(cfg.world_seed, cfg.channels, len(cfg.classes))


def _draw_shape_scale(rng, cfg: RunConfig):
    presets = cfg.preset_table.as_array()
    if rng.random() < cfg.off_preset_fraction:
        r = np.exp(rng.uniform(np.log(presets[:, 0].min() * 0.8), np.log(presets[:, 0].max() * 1.25)))
        w = rng.uniform(0.75, presets[:, 1].max() + 1.0)
    else:
        r, w = presets[rng.integers(len(presets))]
        r *= np.exp(rng.normal(0, cfg.preset_jitter))
        w *= np.exp(rng.normal(0, cfg.preset_jitter))
    return float(r), float(w)


def _overlaps(box, boxes, margin):
    x1, y1, x2, y2 = box
    return any(x1 < b[2] + margin and b[0] - margin < x2 and y1 < b[3] + margin and b[1] - margin < y2
               for b in boxes)


def _pixel_mask(box, fw, fh):
    xs = np.arange(fw) * STRIDE + STRIDE / 2
    ys = np.arange(fh) * STRIDE + STRIDE / 2
    mask = ((ys[:, None] >= box[1]) & (ys[:, None] < box[3])
            & (xs[None, :] >= box[0]) & (xs[None, :] < box[2]))
    if not mask.any():
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        mask[min(int(cy // STRIDE), fh - 1), min(int(cx // STRIDE), fw - 1)] = True
    return mask


def generate_scene(cfg: RunConfig, seed, objects=None) -> SyntheticScene:
    """Draw a scene deterministically from ``seed`` (an int or a tuple of ints).

    ``objects`` optionally fixes the objects as ``(r, w)`` or
    ``(r, w, class_index)`` tuples instead of drawing 1..max of them.
    """
    rng = np.random.default_rng(seed)
    app = appearance_for(cfg)
    fw, fh = cfg.feature_size
    iw, ih = cfg.image_size
    c = cfg.channels
    f = cfg.focal_length

    map_v = rng.normal(0, cfg.background_noise, (fh, fw, c))
    map_d = np.empty((fh, fw, c))
    map_d[:, :, 0] = BACKGROUND_DEPTH
    # background pixels carry no depth code, only noise
    map_d[:, :, 1:] = rng.normal(0, 0.1, (fh, fw, c - 1))

    if objects is None:
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        requests = [(*_draw_shape_scale(rng, cfg), int(rng.integers(len(cfg.classes))))
                    for _ in range(count)]
    else:
        requests = [(float(o[0]), float(o[1]), int(o[2]) if len(o) > 2 else 0) for o in objects]

    targets, boxes = [], []
    for r, w, cls in requests:
        bw, bh = w * STRIDE, r * w * STRIDE
        if bw > iw - 2 or bh > ih - 2:
            continue
        placed = None
        for _ in range(50):
            x1 = rng.uniform(1, iw - 1 - bw)
            y1 = rng.uniform(1, ih - 1 - bh)
            box = (x1, y1, x1 + bw, y1 + bh)
            if not _overlaps(box, boxes, STRIDE / 2):
                placed = box
                break
        if placed is None:
            continue
        boxes.append(placed)
        x1, y1, x2, y2 = placed
        name = cfg.classes[cls]
        h_mean, w_mean, l_mean = CATEGORY_DIMENSIONS[name]
        w3d = w_mean * np.exp(rng.normal(0, 0.04))
        depth = f * w3d / bw
        h3d = depth * bh / f
        l3d = l_mean * np.exp(rng.normal(0, 0.05))
        angle = rng.uniform(-np.pi, np.pi)
        cx = (x1 + x2) / 2 + rng.uniform(-0.1, 0.1) * bw
        cy = (y1 + y2) / 2 + rng.uniform(-0.1, 0.1) * bh
        targets.append(ObjectTarget(
            class_id=cls, box_lrtb=[cx - x1, x2 - cx, cy - y1, y2 - cy], center3d_proj=[cx, cy],
            size3d=[h3d, w3d, l3d], depth=depth, angle=angle, focal_length=f))

        mask = _pixel_mask(placed, fw, fh)
        pattern = (app.class_codes[cls] + app.shape_code(r)
                   + np.sin(angle) * app.angle_codes[0] + np.cos(angle) * app.angle_codes[1]
                   + rng.normal(0, 0.3 / np.sqrt(c), c))
        npix = int(mask.sum())
        map_v[mask] = pattern + rng.normal(0, cfg.object_noise, (npix, c))
        map_d[mask, 0] = depth
        map_d[mask, 1:] = app.depth_code(depth)[0] + rng.normal(0, 0.1, (npix, c - 1))

    positions = _proposals(rng, cfg, boxes)
    return SyntheticScene(FeatureMap(map_v, 16), FeatureMap(map_d, 16), targets, positions, seed)


def _proposals(rng, cfg: RunConfig, boxes) -> np.ndarray:
    iw, ih = cfg.image_size
    n = cfg.n_queries
    pts = np.empty((n, 2))
    slots = rng.permutation(n)
    for slot, (x1, y1, x2, y2) in zip(slots, boxes):
        jx, jy = rng.uniform(-cfg.proposal_jitter, cfg.proposal_jitter, 2)
        pts[slot] = ((x1 + x2) / 2 + jx * (x2 - x1), (y1 + y2) / 2 + jy * (y2 - y1))
    for slot in slots[len(boxes):]:
        for _ in range(100):
            p = rng.uniform((8, 8), (iw - 8, ih - 8))
            if not _overlaps((p[0], p[1], p[0], p[1]), boxes, STRIDE):
                break
        pts[slot] = p
    return pts / np.array([iw, ih])
