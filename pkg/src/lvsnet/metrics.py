"""Dice loss, confusion counts, scalar metrics, ROC/AUC and F1 thresholding.

Everything here is a pure function.  Binarization is always
``score >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

# exact unique-value sweep up to this many pixels, quantile grid beyond
EXACT_SWEEP_LIMIT = 2**16
MAX_THRESHOLDS = 1024

METRIC_COLUMNS = ("Acc", "Dice", "J", "Sn", "Sp", "AUC")


@dataclass(frozen=True)
class DiceLossParams:
    class_weights: Optional[Tuple[float, ...]] = None  # None -> uniform
    smoothing: float = 1e-6

    def __post_init__(self):
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if (w < 0).any():
                raise ValueError("class weights must be non-negative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"class weights must sum to 1, got {w.sum()}")

    def weights(self, num_classes: int) -> Tuple[float, ...]:
        if self.class_weights is None:
            return (1.0 / num_classes,) * num_classes
        if len(self.class_weights) != num_classes:
            raise ValueError(f"{len(self.class_weights)} weights for {num_classes} classes")
        return tuple(self.class_weights)


def dice_loss(pred: torch.Tensor, truth: torch.Tensor, params: Optional[DiceLossParams] = None) -> torch.Tensor:
    """Weighted soft dice loss with squared-magnitude denominators.

    ``pred`` and ``truth`` are ``(N, K, H, W)``, ``(K, H, W)`` or ``(H, W)``;
    for each class k the sums run over every pixel of every sample.
    """
    params = params or DiceLossParams()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if not torch.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary per class")
    truth = truth.to(pred.dtype)
    if pred.dim() == 4:
        s, g = pred.transpose(0, 1).flatten(1), truth.transpose(0, 1).flatten(1)
    elif pred.dim() == 3:
        s, g = pred.flatten(1), truth.flatten(1)
    else:
        s, g = pred.reshape(1, -1), truth.reshape(1, -1)
    w = torch.tensor(params.weights(s.shape[0]), dtype=pred.dtype, device=pred.device)
    overlap = 2.0 * (s * g).sum(dim=1)
    denom = (s * s).sum(dim=1) + (g * g).sum(dim=1) + params.smoothing
    return 1.0 - (w * overlap / denom).sum()


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def _as_bool(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be a binary mask")
        a = a.astype(bool)
    return a


def confusion(pred_binary, truth, valid_region=None) -> ConfusionCounts:
    pred = _as_bool(pred_binary, "pred_binary")
    gt = _as_bool(truth, "truth")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {gt.shape}")
    if valid_region is not None:
        valid = _as_bool(valid_region, "valid_region")
        if valid.shape != gt.shape:
            raise ValueError(f"valid_region shape {valid.shape} != {gt.shape}")
        pred, gt = pred[valid], gt[valid]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float
    auc: Optional[float] = None
    flags: Tuple[str, ...] = ()

    def as_row(self) -> Dict[str, float]:
        """Values keyed by the report column headers."""
        return {
            "Acc": self.accuracy,
            "Dice": self.dice,
            "J": self.jaccard,
            "Sn": self.sensitivity,
            "Sp": self.specificity,
            "AUC": float("nan") if self.auc is None else self.auc,
        }

    def with_auc(self, auc: Optional[float]) -> "MetricReport":
        return replace(self, auc=auc)


def _ratio(num: int, den: int, name: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(f"{name}:undefined-defaulted")
        return 1.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> MetricReport:
    """Accuracy, dice, Jaccard, sensitivity and specificity from one set of counts.

    A metric whose denominator is zero is vacuously perfect: it is reported
    as 1.0 and flagged rather than raising, so batch evaluation never aborts.
    """
    if c.total <= 0:
        raise ValueError("no pixels to evaluate")
    flags: List[str] = []
    return MetricReport(
        accuracy=(c.tp + c.tn) / c.total,
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice", flags),
        jaccard=_ratio(c.tp, c.tp + c.fp + c.fn, "jaccard", flags),
        sensitivity=_ratio(c.tp, c.tp + c.fn, "sensitivity", flags),
        specificity=_ratio(c.tn, c.tn + c.fp, "specificity", flags),
        flags=tuple(flags),
    )


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Arithmetic mean of each field; AUC averaged over reports that have one."""
    if not reports:
        raise ValueError("nothing to average")
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
    aucs = [r.auc for r in reports if r.auc is not None and not math.isnan(r.auc)]
    flags = sorted({f for r in reports for f in r.flags})
    return MetricReport(
        accuracy=mean("accuracy"),
        dice=mean("dice"),
        jaccard=mean("jaccard"),
        sensitivity=mean("sensitivity"),
        specificity=mean("specificity"),
        auc=float(np.mean(aucs)) if aucs else None,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered by decreasing threshold, from (0, 0) to (1, 1).

    The first point carries threshold ``+inf`` (nothing predicted positive).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    undefined: bool = False

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _pool(scores, truth, valid_region=None) -> Tuple[np.ndarray, np.ndarray]:
    """Flatten one map or a sequence of maps into pooled (scores, labels)."""
    if isinstance(scores, (list, tuple)):
        if not isinstance(truth, (list, tuple)) or len(truth) != len(scores):
            raise ValueError("scores and truth sequences must pair up")
        valids = valid_region if valid_region is not None else [None] * len(scores)
        parts = [_pool(s, t, v) for s, t, v in zip(scores, truth, valids)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    s = np.asarray(scores, dtype=np.float64)
    g = _as_bool(truth, "truth")
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: scores {s.shape} vs truth {g.shape}")
    if valid_region is not None:
        v = _as_bool(valid_region, "valid_region")
        return s[v], g[v]
    return s.ravel(), g.ravel()


def _levels(s: np.ndarray, exact_limit: int, max_thresholds: int) -> np.ndarray:
    """Ascending candidate levels: every unique score, or rank quantiles."""
    if s.size <= exact_limit:
        return np.unique(s)
    # method="lower" picks actual order statistics, so the grid lives in rank space
    q = np.quantile(s, np.linspace(0.0, 1.0, max_thresholds), method="lower")
    return np.unique(q)


def _counts_at(pos_sorted: np.ndarray, neg_sorted: np.ndarray, thresholds: np.ndarray):
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    return tp, fp


def roc_curve(
    scores,
    truth,
    valid_region=None,
    exact_limit: int = EXACT_SWEEP_LIMIT,
    max_thresholds: int = MAX_THRESHOLDS,
) -> RocCurve:
    s, g = _pool(scores, truth, valid_region)
    levels = _levels(s, exact_limit, max_thresholds)[::-1]
    pos, neg = np.sort(s[g]), np.sort(s[~g])
    tp, fp = _counts_at(pos, neg, levels)
    undefined = pos.size == 0 or neg.size == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr = tp / pos.size if pos.size else np.zeros_like(tp, dtype=float)
        fpr = fp / neg.size if neg.size else np.zeros_like(fp, dtype=float)
    return RocCurve(
        thresholds=np.concatenate([[np.inf], levels]),
        fpr=np.concatenate([[0.0], fpr.astype(float)]),
        tpr=np.concatenate([[0.0], tpr.astype(float)]),
        undefined=undefined,
    )


def curve_auc(curve: RocCurve) -> float:
    if curve.undefined:
        return float("nan")
    return float(np.trapezoid(curve.tpr, curve.fpr))


def roc_auc(scores, truth, valid_region=None, **kw) -> Tuple[RocCurve, float]:
    """ROC curve and trapezoidal AUC; AUC is NaN (and ``curve.undefined``) for one-class truth."""
    curve = roc_curve(scores, truth, valid_region, **kw)
    return curve, curve_auc(curve)


def binarize(scores, threshold: float) -> np.ndarray:
    return np.asarray(scores) >= threshold


def threshold_grid(levels: np.ndarray) -> np.ndarray:
    """Cut points for an ascending level set: the lowest level plus midpoints.

    Thresholding at a midpoint separates the two neighbouring levels, so
    every distinct non-empty partition is represented once.  0.5 is always
    included.
    """
    mids = (levels[:-1] + levels[1:]) / 2.0
    # adjacent floats can round the midpoint onto the lower level
    mids = np.where(mids <= levels[:-1], levels[1:], mids)
    return np.unique(np.concatenate([levels[:1], mids, [0.5]]))


def f1_threshold(
    scores,
    truth,
    valid_region=None,
    exact_limit: int = EXACT_SWEEP_LIMIT,
    max_thresholds: int = MAX_THRESHOLDS,
) -> float:
    """Threshold maximizing pooled dice over the given map(s); ties go to the larger threshold."""
    s, g = _pool(scores, truth, valid_region)
    pos, neg = np.sort(s[g]), np.sort(s[~g])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("F1 thresholding needs both positive and negative pixels")
    grid = threshold_grid(_levels(s, exact_limit, max_thresholds))
    tp, fp = _counts_at(pos, neg, grid)
    fn = pos.size - tp
    dice = 2.0 * tp / (2.0 * tp + fp + fn)
    best = np.flatnonzero(dice == dice.max())
    return float(grid[best[-1]])


CLASS_NAMES = {0: "background", 1: "artery", 2: "vein"}


@dataclass(frozen=True)
class MulticlassReport:
    per_class: Dict[str, MetricReport]
    average_with_background: MetricReport
    average_without_background: MetricReport


def multiclass_report(pred, truth, valid_region=None) -> MulticlassReport:
    """One-vs-rest reports for background / artery / vein plus two averages."""
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    for name, arr in (("pred", p), ("truth", t)):
        bad = np.setdiff1d(np.unique(arr), list(CLASS_NAMES))
        if bad.size:
            raise ValueError(f"unknown class labels in {name}: {bad.tolist()}")
    per_class = {
        name: metrics_from_counts(confusion(p == k, t == k, valid_region))
        for k, name in CLASS_NAMES.items()
    }
    return MulticlassReport(
        per_class=per_class,
        average_with_background=average_reports(list(per_class.values())),
        average_without_background=average_reports([per_class["artery"], per_class["vein"]]),
    )
