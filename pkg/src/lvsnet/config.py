"""Configuration records shared by the model, trainer and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(ValueError):
    """A feature map does not match the shape a block expects."""


SFRB_CONV_MODES = ("full", "separable", "depthwise")
SFRB_ATTENTION_MODES = ("dense", "channelwise")
ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class FeatureMapSpec:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeError(f"feature map dims must be >= 1, got {self.as_tuple()}")

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @classmethod
    def of(cls, tensor) -> "FeatureMapSpec":
        """Shape of an (N, C, H, W) tensor."""
        _, c, h, w = tensor.shape
        return cls(int(h), int(w), int(c))


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters and ablation toggles.

    The block-internal knobs (``sfrb_conv``, ``sfrb_attention``, FMAM widths)
    select between block variants; the defaults give a model of about
    0.74 M parameters.  ``sfrb_conv="full"`` with ``sfrb_attention="dense"``
    is the dense-convolution variant.
    """

    input_height: int = 512
    input_width: int = 512
    input_channels: int = 3
    base_channels: int = 24
    stage_channels: Tuple[int, ...] = (24, 48, 96)
    focal_levels: int = 3
    focal_kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    fmam_activation: str = "gelu"
    dropout_rate: float = 0.5
    num_classes: int = 1
    head_relu_enabled: bool = True
    multiscale_encoder: bool = True
    enable_sfrb_skip: bool = True
    enable_sfrb_bottleneck: bool = True
    enable_fmam_bottleneck: bool = True
    enable_sfrb_decoder: bool = True
    enable_fmam_skip: bool = False
    skip_attention: str = "none"
    sfrb_conv: str = "depthwise"
    sfrb_attention: str = "channelwise"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        # tuples survive JSON round trips as lists
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "focal_kernel_sizes", tuple(int(k) for k in self.focal_kernel_sizes))
        self.validate()

    def validate(self) -> None:
        if self.input_height % 8 or self.input_width % 8:
            raise ConfigError(
                f"input dims must be divisible by 8, got {self.input_height}x{self.input_width}"
            )
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        sc = self.stage_channels
        if len(sc) != 3:
            raise ConfigError(f"stage_channels needs three entries, got {sc}")
        if any(b <= a for a, b in zip(sc, sc[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {sc}")
        if sc[0] != self.base_channels:
            raise ConfigError("stage_channels[0] must equal base_channels")
        if self.focal_levels < 1:
            raise ConfigError("focal_levels must be >= 1")
        if len(self.focal_kernel_sizes) != self.focal_levels:
            raise ConfigError(
                f"need {self.focal_levels} focal kernel sizes, got {self.focal_kernel_sizes}"
            )
        if any(k < 3 or k % 2 == 0 for k in self.focal_kernel_sizes):
            raise ConfigError(f"focal kernels must be odd and >= 3, got {self.focal_kernel_sizes}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1]")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.fmam_activation not in ACTIVATIONS:
            raise ConfigError(f"fmam_activation must be one of {ACTIVATIONS}")
        if self.sfrb_conv not in SFRB_CONV_MODES:
            raise ConfigError(f"sfrb_conv must be one of {SFRB_CONV_MODES}")
        if self.sfrb_attention not in SFRB_ATTENTION_MODES:
            raise ConfigError(f"sfrb_attention must be one of {SFRB_ATTENTION_MODES}")
        if self.skip_attention not in ("none", "cbam"):
            raise ConfigError("skip_attention must be 'none' or 'cbam'")

    @property
    def input_spec(self) -> FeatureMapSpec:
        return FeatureMapSpec(self.input_height, self.input_width, self.input_channels)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["focal_kernel_sizes"] = list(self.focal_kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        return cls(**_known(cls, d))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 10
    ablation_row: str = "Full"
    # no schedule and no early stopping by default; hooks only
    lr_schedule: str = "none"
    early_stopping_patience: int = 0
    target_dice: Optional[float] = None  # stop once validation dice reaches this

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_schedule != "none":
            raise ConfigError("only lr_schedule='none' is supported")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        return cls(**_known(cls, d))


def _known(cls, d: Dict[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in d.items() if k in names}


def load_config_file(path) -> Tuple[ModelConfig, TrainConfig]:
    """Read a flat JSON object whose keys are ModelConfig/TrainConfig fields.

    ``seed`` is shared by both records.  Unknown keys are an error so typos
    do not pass silently.
    """
    if str(path) == "default":
        return ModelConfig(), TrainConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    known = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return ModelConfig.from_dict(raw), TrainConfig.from_dict(raw)
