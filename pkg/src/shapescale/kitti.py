"""KITTI object label ingestion and shape/scale statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import LabelParseError
from .msm import FEATURE_STRIDE, MSMConfig, ShapeScaleTruth, generate_category_label, weighted_distances
from .sampling import ShapeScalePreset

N_FIELDS = 15
DONT_CARE = "DontCare"

# histogram edges; the last bin is open-ended
RATIO_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0)
SCALE_EDGES = (0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 20.0)
SCALE_RANGE = (1.0, 14.0)
TIE_TOL = 1e-12


@dataclass(frozen=True)
class KittiLabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float

    @property
    def dont_care(self) -> bool:
        return self.type == DONT_CARE

    @property
    def width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    @property
    def valid_box(self) -> bool:
        return self.width > 0 and self.height > 0

    def truth(self) -> ShapeScaleTruth:
        return ShapeScaleTruth(self.height / self.width, self.width / FEATURE_STRIDE)


def parse_line(line: str, path="<string>", line_no: int = 1) -> KittiLabelRecord:
    parts = line.split()
    if len(parts) != N_FIELDS:
        raise LabelParseError(path, line_no, f"expected {N_FIELDS} fields, got {len(parts)}")
    try:
        nums = [float(x) for x in parts[1:]]
        occluded = int(parts[2])
    except ValueError as exc:
        raise LabelParseError(path, line_no, str(exc)) from None
    return KittiLabelRecord(
        type=parts[0], truncated=nums[0], occluded=occluded, alpha=nums[2],
        bbox=tuple(nums[3:7]), dimensions=tuple(nums[7:10]), location=tuple(nums[10:13]),
        rotation_y=nums[13])


def parse_kitti_labels(path) -> list[KittiLabelRecord]:
    """One record per non-blank line; DontCare lines are kept and flagged."""
    path = Path(path)
    records = []
    with path.open() as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_line(line, path, no))
    return records


def parse_label_dir(directory) -> list[KittiLabelRecord]:
    directory = Path(directory)
    if directory.is_file():
        return parse_kitti_labels(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such label directory: {directory}")
    records = []
    for f in sorted(directory.glob("*.txt")):
        records += parse_kitti_labels(f)
    return records


def fixture_dir() -> Path:
    return Path(str(resources.files("shapescale") / "data" / "kitti_fixture"))


def _histogram(values, edges) -> list[int]:
    bins = np.append(np.asarray(edges, dtype=float), np.inf)
    counts, _ = np.histogram(values, bins=bins)
    return [int(c) for c in counts]


def label_stats(records, presets: ShapeScalePreset, cfg: MSMConfig | None = None,
                categories=None) -> dict:
    """Per-category shape/scale statistics of ``records``.

    Records with a degenerate box are counted as ``invalid`` and otherwise
    ignored. Ties are records whose two best presets are within 1e-12.
    """
    cfg = cfg or MSMConfig()
    if categories is None:
        categories = sorted({r.type for r in records if not r.dont_care})
    report = {"presets": [list(p) for p in presets], "w1": cfg.w1, "w2": cfg.w2,
              "ratio_edges": list(RATIO_EDGES), "scale_edges": list(SCALE_EDGES), "categories": {}}
    for cat in categories:
        recs = [r for r in records if r.type == cat and not r.dont_care]
        valid = [r for r in recs if r.valid_box]
        ratios = np.array([r.truth().r_hat for r in valid])
        scales = np.array([r.truth().w_hat for r in valid])
        assign = [0] * len(presets)
        ties = 0
        for r in valid:
            truth = r.truth()
            d = np.sort(weighted_distances(truth, presets, cfg))
            if len(d) > 1 and d[1] - d[0] <= TIE_TOL:
                ties += 1
            assign[generate_category_label(truth, presets, cfg).index] += 1
        lo, hi = SCALE_RANGE
        in_range = int(np.sum((scales >= lo) & (scales <= hi)))
        report["categories"][cat] = {
            "count": len(recs),
            "invalid": len(recs) - len(valid),
            "ratio_hist": _histogram(ratios, RATIO_EDGES),
            "scale_hist": _histogram(scales, SCALE_EDGES),
            "scale_in_range": in_range,
            "scale_in_range_fraction": in_range / len(valid) if valid else float("nan"),
            "preset_counts": assign,
            "ties": ties,
        }
    return report


def format_report(report: dict) -> str:
    """Deterministic JSON text of a :func:`label_stats` report."""
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"
