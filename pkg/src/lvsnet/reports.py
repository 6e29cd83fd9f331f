"""Confusion overlays, ROC plot-data files and metric record files."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import METRIC_COLUMNS, MetricReport, RocCurve, curve_auc


@dataclass(frozen=True)
class OverlaySpec:
    tp_color: Tuple[int, int, int] = (0, 255, 0)
    fp_color: Tuple[int, int, int] = (255, 0, 0)
    fn_color: Tuple[int, int, int] = (0, 0, 255)
    background: str = "image"  # "image" (dimmed to 50%) or "black"

    def __post_init__(self):
        if len({self.tp_color, self.fp_color, self.fn_color}) != 3:
            raise ValueError("TP, FP and FN colours must be pairwise distinct")
        if self.background not in ("image", "black"):
            raise ValueError("background must be 'image' or 'black'")


def render_overlay(pred_binary, truth, base: Optional[np.ndarray] = None, spec: OverlaySpec = OverlaySpec()) -> np.ndarray:
    """Colour each pixel by its confusion outcome: TP green, FP red, FN blue.

    TN pixels show the base image at half intensity, or black when there is
    no base or ``spec.background == "black"``.
    """
    pred = np.asarray(pred_binary).astype(bool)
    gt = np.asarray(truth).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"overlay needs two equal 2-D masks, got {pred.shape} and {gt.shape}")
    out = np.zeros(pred.shape + (3,), np.uint8)
    if base is not None and spec.background == "image":
        base = np.asarray(base)
        if base.ndim == 2:
            base = np.repeat(base[..., None], 3, axis=2)
        if base.shape[:2] != pred.shape:
            raise ValueError(f"base image {base.shape[:2]} does not match masks {pred.shape}")
        out[:] = base[..., :3] // 2
    out[pred & gt] = spec.tp_color
    out[pred & ~gt] = spec.fp_color
    out[~pred & gt] = spec.fn_color
    return out


def _disambiguate(labels: Sequence[str]) -> List[str]:
    seen: Counter = Counter()
    out = []
    for label in labels:
        seen[label] += 1
        out.append(label if seen[label] == 1 else f"{label}#{seen[label]}")
    return out


ROC_FIELDS = ("label", "auc", "threshold", "fpr", "tpr")


def export_roc(curves: Sequence[Tuple[str, RocCurve]], path) -> Dict[str, float]:
    """Write ``label, auc, threshold, fpr, tpr`` rows; returns AUC per (unique) label."""
    if not curves:
        raise ValueError("no ROC curves to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = _disambiguate([label for label, _ in curves])
    aucs = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROC_FIELDS)
        for label, (_, curve) in zip(labels, curves):
            auc = curve_auc(curve)
            aucs[label] = auc
            for thr, fpr, tpr in curve.points:
                w.writerow([label, repr(auc), repr(thr), repr(fpr), repr(tpr)])
    return aucs


def read_roc(path) -> Dict[str, Dict[str, np.ndarray]]:
    """Inverse of :func:`export_roc`: ``{label: {"auc", "threshold", "fpr", "tpr"}}``."""
    out: Dict[str, Dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["label"], {"auc": float(row["auc"]), "threshold": [], "fpr": [], "tpr": []})
            for k in ("threshold", "fpr", "tpr"):
                d[k].append(float(row[k]))
    return {k: {**v, **{f: np.array(v[f]) for f in ("threshold", "fpr", "tpr")}} for k, v in out.items()}


def write_metric_records(rows: Sequence[Tuple[str, MetricReport]], path, columns=METRIC_COLUMNS) -> Path:
    """One record per row id with the report column headers, plus flags."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id",) + tuple(columns) + ("flags",))
        for rid, report in rows:
            vals = report.as_row()
            w.writerow([rid] + [f"{vals[c]:.6f}" for c in columns] + [";".join(report.flags)])
    return path
