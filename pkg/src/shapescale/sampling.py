"""Mask lattices and bilinear sampling over feature maps.

Coordinates are ``(x, y)`` in feature pixels, ``x`` along the width axis.
Normalized query positions use the pixel-center convention: a normalized
``u`` maps to ``u * width - 0.5`` on a map of that width, so the same
normalized position addresses maps of any stride.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError, EmptyLatticeError, NumericalGuardError, PresetError
from .tensor import DTYPE, as_array

VALID_STRIDES = (16, 64)


@dataclass
class FeatureMap:
    data: np.ndarray
    stride_to_image: int = 16

    def __post_init__(self):
        self.data = as_array(self.data)
        if self.data.ndim != 3 or min(self.data.shape[:2]) < 1:
            raise DimensionError(f"feature map must be HxWxC with H,W >= 1, got {self.data.shape}")
        if self.stride_to_image not in VALID_STRIDES:
            raise DimensionError(f"stride_to_image must be one of {VALID_STRIDES}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def denormalize(self, positions: np.ndarray) -> np.ndarray:
        positions = as_array(positions)
        return positions * np.array([self.width, self.height]) - 0.5


@dataclass
class QuerySet:
    features: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.features = as_array(self.features)
        self.positions = as_array(self.positions)
        if self.features.ndim != 2 or self.positions.shape != (self.features.shape[0], 2):
            raise DimensionError(
                f"query features {self.features.shape} and positions {self.positions.shape} disagree")
        if np.any(self.positions < 0) or np.any(self.positions > 1):
            raise ValueError("query positions must lie in [0, 1]^2")

    @property
    def count(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ShapeScalePreset:
    """Ordered (aspect ratio, width) pairs; width in feature pixels."""

    entries: tuple[tuple[float, float], ...]

    def __post_init__(self):
        entries = tuple((float(r), float(w)) for r, w in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise PresetError("a preset list needs at least one entry")
        for r, w in entries:
            validate_preset_entry(r, w)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=DTYPE)


def validate_preset_entry(r: float, w: float) -> int:
    """Return the integral row extent ``r*w`` or raise."""
    if r <= 0 or w < 1:
        raise PresetError(f"preset ({r}, {w}) needs r > 0 and w >= 1")
    if float(w) != int(w):
        raise PresetError(f"preset width {w} must be integral")
    rows = r * w
    if abs(rows - round(rows)) > 1e-9 or round(rows) < 1:
        raise PresetError(f"preset ({r}, {w}): r*w = {rows} is not a positive integer")
    return int(round(rows))


def lattice_offsets(r: float, w: float) -> np.ndarray:
    """Unit-spaced ``(r*w+1) x (w+1)`` offsets around the origin, as (x, y)."""
    return _lattice_offsets(float(r), float(w)).copy()


@lru_cache(maxsize=256)
def _lattice_offsets(r: float, w: float) -> np.ndarray:
    rows = validate_preset_entry(r, w)
    w = int(w)
    xs = np.arange(w + 1) - w / 2.0
    ys = np.arange(rows + 1) - rows / 2.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def mask_lattice(r: float, w: float, center) -> np.ndarray:
    return lattice_offsets(r, w) + as_array(center)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _data(map_or_array) -> np.ndarray:
    return map_or_array.data if isinstance(map_or_array, FeatureMap) else as_array(map_or_array)


def _taps(coords: np.ndarray, height: int, width: int):
    if not np.all(np.isfinite(coords)):
        raise NumericalGuardError("non-finite sampling coordinates")
    x = np.clip(coords[:, 0], 0, width - 1)
    y = np.clip(coords[:, 1], 0, height - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_sample(feature_map, coords) -> np.ndarray:
    """Sample ``(K, 2)`` coordinates from an ``HxWxC`` map, clamping to the border."""
    data = _data(feature_map)
    coords = as_array(coords).reshape(-1, 2)
    h, w, c = data.shape
    x0, x1, y0, y1, fx, fy = _taps(coords, h, w)
    flat = data.reshape(-1, c)
    fx = fx[:, None]
    fy = fy[:, None]
    top = (1 - fx) * flat[y0 * w + x0] + fx * flat[y0 * w + x1]
    bottom = (1 - fx) * flat[y1 * w + x0] + fx * flat[y1 * w + x1]
    return (1 - fy) * top + fy * bottom


def bilinear_sample_backward(dout: np.ndarray, feature_map, coords):
    """Return ``(d_map, d_coords)`` for :func:`bilinear_sample`.

    The coordinate gradient is zero where a coordinate was clamped.
    """
    data = _data(feature_map)
    coords = as_array(coords).reshape(-1, 2)
    h, w, c = data.shape
    x0, x1, y0, y1, fx, fy = _taps(coords, h, w)

    dmap = np.zeros((h * w, c))
    wts = np.concatenate(((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx))
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    np.add.at(dmap, np.concatenate((i00, i01, i10, i11)), wts[:, None] * np.tile(dout, (4, 1)))

    flat = data.reshape(-1, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    fxc = fx[:, None]
    fyc = fy[:, None]
    ddx = ((1 - fyc) * (v01 - v00) + fyc * (v11 - v10)) * dout
    ddy = ((1 - fxc) * (v10 - v00) + fxc * (v11 - v01)) * dout
    inside_x = (coords[:, 0] >= 0) & (coords[:, 0] <= w - 1)
    inside_y = (coords[:, 1] >= 0) & (coords[:, 1] <= h - 1)
    dcoords = np.stack([ddx.sum(axis=1) * inside_x, ddy.sum(axis=1) * inside_y], axis=1)
    return dmap.reshape(h, w, c), dcoords


def local_feature_average(samples: np.ndarray) -> np.ndarray:
    samples = as_array(samples)
    if samples.shape[0] == 0:
        raise EmptyLatticeError("cannot average an empty lattice")
    return samples.mean(axis=0)


# ---------------------------------------------------------------------------
# per-query local features and point samples
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _stacked_offsets(presets: ShapeScalePreset):
    """All preset lattices concatenated, plus the per-point preset index and weight 1/K_i."""
    offs = [_lattice_offsets(r, w) for r, w in presets]
    owner = np.concatenate([np.full(len(o), i) for i, o in enumerate(offs)])
    inv = np.concatenate([np.full(len(o), 1.0 / len(o)) for o in offs])
    return np.concatenate(offs), owner, inv


def _pooling_matrix(presets: ShapeScalePreset) -> np.ndarray:
    _, owner, inv = _stacked_offsets(presets)
    pool = np.zeros((len(presets), len(owner)))
    pool[owner, np.arange(len(owner))] = inv
    return pool


def _lattice_coords(feature_map: FeatureMap, positions: np.ndarray, presets: ShapeScalePreset):
    offsets = _stacked_offsets(presets)[0]
    centers = feature_map.denormalize(positions)
    return (centers[:, None, :] + offsets[None]).reshape(-1, 2)


def extract_local_features(feature_map: FeatureMap, positions, presets: ShapeScalePreset) -> np.ndarray:
    """Average the mask-lattice samples around each query, one mask per preset.

    Returns an ``N x I x C`` stack. ``positions`` may be a :class:`QuerySet`
    or an ``N x 2`` array of normalized positions.
    """
    if isinstance(positions, QuerySet):
        positions = positions.positions
    if feature_map.stride_to_image != 16:
        raise DimensionError("local features are extracted from stride-16 maps")
    positions = as_array(positions)
    n = positions.shape[0]
    samples = bilinear_sample(feature_map, _lattice_coords(feature_map, positions, presets))
    samples = samples.reshape(n, -1, feature_map.channels)
    return np.einsum("ik,nkc->nic", _pooling_matrix(presets), samples)


def extract_local_features_backward(dlocal: np.ndarray, feature_map: FeatureMap, positions,
                                    presets: ShapeScalePreset) -> np.ndarray:
    """Gradient of :func:`extract_local_features` w.r.t. the map values."""
    if isinstance(positions, QuerySet):
        positions = positions.positions
    positions = as_array(positions)
    dsamples = np.einsum("ik,nic->nkc", _pooling_matrix(presets), dlocal)
    coords = _lattice_coords(feature_map, positions, presets)
    return bilinear_sample_backward(dsamples.reshape(-1, feature_map.channels), feature_map, coords)[0]


def sample_queries_from_map(feature_map: FeatureMap, positions) -> np.ndarray:
    if isinstance(positions, QuerySet):
        positions = positions.positions
    return bilinear_sample(feature_map, feature_map.denormalize(positions))


def sample_queries_backward(dout: np.ndarray, feature_map: FeatureMap, positions) -> np.ndarray:
    if isinstance(positions, QuerySet):
        positions = positions.positions
    return bilinear_sample_backward(dout, feature_map, feature_map.denormalize(positions))[0]
