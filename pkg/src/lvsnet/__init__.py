"""lvsnet: a lightweight encoder-decoder for retinal vessel segmentation."""

from .audit import ComplexityAudit, audit_complexity
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, FeatureMapSpec, ModelConfig, ShapeError, TrainConfig
from .metrics import (
    MetricReport,
    confusion,
    dice_loss,
    f1_threshold,
    metrics_from_counts,
    multiclass_report,
    roc_auc,
    roc_curve,
)
from .model import LVSNet, build_model

__all__ = [
    "ComplexityAudit",
    "ConfigError",
    "FeatureMapSpec",
    "LVSNet",
    "MetricReport",
    "ModelConfig",
    "ShapeError",
    "TrainConfig",
    "audit_complexity",
    "build_model",
    "confusion",
    "dice_loss",
    "f1_threshold",
    "load_checkpoint",
    "metrics_from_counts",
    "multiclass_report",
    "roc_auc",
    "roc_curve",
    "save_checkpoint",
]
