"""Run configuration and per-category preset tables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigurationError, PresetError
from .sampling import ShapeScalePreset

CATEGORY_PRESETS = {
    "Car": ((1, 1), (1, 2), (1, 4), (1, 6), (0.5, 4), (0.5, 8)),
    "Pedestrian": ((2, 2), (2, 4), (3, 2)),
    "Cyclist": ((1, 2), (1, 4), (2, 2)),
}
# appended to the Car list when several categories are trained jointly
JOINT_EXTRA = ((2, 2), (3, 2), (2, 4))

# mean (h, w, l) in meters
CATEGORY_DIMENSIONS = {
    "Car": (1.53, 1.63, 3.88),
    "Pedestrian": (1.76, 0.66, 0.84),
    "Cyclist": (1.74, 0.60, 1.76),
}


def category_presets(category: str, joint: bool = False) -> ShapeScalePreset:
    try:
        entries = CATEGORY_PRESETS[category]
    except KeyError:
        raise ConfigurationError(f"unknown category {category!r}") from None
    if joint and category == "Car":
        entries = entries + JOINT_EXTRA
    return ShapeScalePreset(entries)


@dataclass
class RunConfig:
    classes: tuple[str, ...] = ("Car",)
    presets: tuple[tuple[float, float], ...] | None = None
    n_queries: int = 16
    channels: int = 32
    attn_heads: int = 8
    deform_heads: int = 8
    points_per_head: int = 4
    offset_init_scale: float = 1.0
    ffn_hidden: int | None = None
    layers: int = 1

    lambdas: tuple[float, ...] = (2.0, 5.0, 10.0, 2.0, 1.0, 1.0, 1.0)
    lambda_msm: float = 0.1
    w1: float = 2.0
    w2: float = 1.0
    gamma: float = 2.0

    seed: int = 0
    world_seed: int = 20240229
    steps: int = 2000
    batch_size: int = 1
    optimizer: str = "adam"
    lr: float = 4e-3
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    lr_schedule: str = "cosine"
    lr_floor: float = 0.05
    weight_decay: float = 0.0
    eval_interval: int = 500
    eval_scenes: int = 200

    image_size: tuple[int, int] = (384, 384)
    focal_length: float = 700.0
    min_objects: int = 1
    max_objects: int = 5
    off_preset_fraction: float = 0.2
    preset_jitter: float = 0.1
    proposal_jitter: float = 0.2
    background_noise: float = 0.3
    object_noise: float = 0.3

    output_dir: str = "runs"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.image_size = tuple(int(x) for x in self.image_size)
        if self.presets is not None:
            self.presets = tuple((float(r), float(w)) for r, w in self.presets)

    # -- derived ------------------------------------------------------------

    @property
    def preset_table(self) -> ShapeScalePreset:
        if self.presets is not None:
            return ShapeScalePreset(self.presets)
        if len(self.classes) == 1:
            return category_presets(self.classes[0])
        return category_presets("Car", joint=True)

    @property
    def feature_size(self) -> tuple[int, int]:
        """(width, height) of the stride-16 maps."""
        return self.image_size[0] // 16, self.image_size[1] // 16

    # -- validation and io --------------------------------------------------

    def validate(self) -> "RunConfig":
        problems = []
        try:
            presets = self.preset_table
        except (PresetError, ConfigurationError) as exc:
            problems.append(str(exc))
            presets = None
        for c in self.classes:
            if c not in CATEGORY_DIMENSIONS:
                problems.append(f"unknown class {c!r}")
        if self.channels % self.attn_heads:
            problems.append("channels must be divisible by attn_heads")
        if self.channels % self.deform_heads:
            problems.append("channels must be divisible by deform_heads")
        if self.points_per_head < 1 or self.layers < 1:
            problems.append("points_per_head and layers must be >= 1")
        if self.n_queries < self.max_objects:
            problems.append("n_queries must be at least max_objects")
        if not 0 <= self.min_objects <= self.max_objects:
            problems.append("need 0 <= min_objects <= max_objects")
        if len(self.lambdas) != 7 or any(x < 0 for x in self.lambdas) or self.lambda_msm < 0:
            problems.append("seven nonnegative query-loss weights and a nonnegative lambda_msm required")
        if self.w1 <= 0 or self.w2 <= 0 or self.gamma < 0:
            problems.append("w1, w2 must be positive and gamma nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            problems.append("optimizer must be 'sgd' or 'adam'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("grad_clip must be positive or null")
        if self.lr_schedule not in ("constant", "cosine") or not 0 <= self.lr_floor <= 1:
            problems.append("lr_schedule must be 'constant' or 'cosine' with lr_floor in [0, 1]")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            problems.append("lr > 0, steps >= 0 and batch_size >= 1 required")
        if self.eval_interval < 1 or self.eval_scenes < 0:
            problems.append("eval_interval >= 1 and eval_scenes >= 0 required")
        fw, fh = self.feature_size
        if fw < 3 or fh < 3 or self.image_size[0] % 16 or self.image_size[1] % 16:
            problems.append("image size must be a multiple of 16 and at least 48 px")
        if presets is not None and fw < max(w for _, w in presets) + 1:
            problems.append("image too narrow for the widest preset")
        if not 0 <= self.off_preset_fraction <= 1:
            problems.append("off_preset_fraction must lie in [0, 1]")
        if problems:
            raise ConfigurationError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)

