"""CSV and JSON report files.

Floats are written with ``repr`` so a report round-trips exactly and two
identical runs produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .losses import TERM_NAMES
from .metrics import MetricsReport

CSV_COLUMNS = ("step", "total_loss", *TERM_NAMES, "msm_loss", "matching_accuracy",
               "position_precision", "weighted_position_precision")
ABLATION_COLUMNS = ("lambda_msm", "seeds", "matching_accuracy", "position_precision",
                    "weighted_position_precision", "total_loss", "msm_loss")


def fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_row(rep: MetricsReport) -> list[str]:
    values = [rep.step, rep.total_loss, *(rep.terms[k] for k in TERM_NAMES), rep.msm_loss,
              rep.matching_accuracy, rep.position_precision, rep.weighted_position_precision]
    return [fmt(float(v)) if not isinstance(v, int) else str(v) for v in values]


def write_rows(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


def write_metrics_csv(path, reports) -> Path:
    return write_rows(path, CSV_COLUMNS, [report_row(r) for r in reports])


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rows]


def _clean(obj):
    """NaN becomes null so the JSON stays standard."""
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")
    return path


def report_dict(rep: MetricsReport) -> dict:
    return {"step": rep.step, "total_loss": rep.total_loss, "terms": dict(rep.terms),
            "msm_loss": rep.msm_loss, "matching_accuracy": rep.matching_accuracy,
            "position_precision": rep.position_precision,
            "weighted_position_precision": rep.weighted_position_precision, "empty": rep.empty}
