"""Network blocks and the assembled segmentation model.

Tensors are NCHW throughout.  Each block checks the shapes it depends on
and raises :class:`ShapeError` instead of letting a broadcast or a conv
silently produce the wrong geometry.
"""

from __future__ import annotations

from typing import Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, FeatureMapSpec, ModelConfig, ShapeError


def _bn(channels: int, cfg: ModelConfig) -> nn.BatchNorm2d:
    # torch momentum weights the new batch; cfg.bn_momentum weights the running value
    return nn.BatchNorm2d(channels, eps=cfg.bn_eps, momentum=1.0 - cfg.bn_momentum)


def _check_pool(x: torch.Tensor, where: str) -> None:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"{where}: cannot halve odd spatial dims {h}x{w}")


class Stem(nn.Module):
    """First multi-scale block: ``s1`` from a 1x1 conv, ``f1`` = [3x3 branch, s1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        k = 1 if cfg.multiscale_encoder else 3
        self.conv1x1 = nn.Conv2d(cfg.input_channels, c, k, padding=k // 2)
        self.conv3x3 = nn.Conv2d(cfg.input_channels, c, 3, padding=1)

    def forward(self, img: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        got = FeatureMapSpec.of(img)
        if got != self.cfg.input_spec:
            raise ShapeError(f"stem expects {self.cfg.input_spec.as_tuple()}, got {got.as_tuple()}")
        s1 = F.relu(self.conv1x1(img))
        f1 = torch.cat([F.relu(self.conv3x3(img)), s1], dim=1)
        return s1, f1


class Downsample(nn.Module):
    """BN followed by 2x2 max pooling, optionally with dropout after the pool."""

    def __init__(self, channels: int, cfg: ModelConfig, dropout: float = 0.0):
        super().__init__()
        self.bn = _bn(channels, cfg)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_pool(x, "downsample")
        return self.dropout(F.max_pool2d(self.bn(x), 2, 2))


class EncoderStage(nn.Module):
    """Parallel 1x1 / 3x3 branches concatenated to ``2 * out_channels``, then downsampled."""

    def __init__(self, in_channels: int, out_channels: int, apply_dropout: bool, cfg: ModelConfig):
        super().__init__()
        self.in_channels = in_channels
        k = 1 if cfg.multiscale_encoder else 3
        self.conv1x1 = nn.Conv2d(in_channels, out_channels, k, padding=k // 2)
        self.conv3x3 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.down = Downsample(2 * out_channels, cfg, cfg.dropout_rate if apply_dropout else 0.0)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder stage expects {self.in_channels} channels, got {x.shape[1]}")
        f = torch.cat([F.relu(self.conv1x1(x)), F.relu(self.conv3x3(x))], dim=1)
        return f, self.down(f)


class FMAM(nn.Module):
    """Focal modulation: gated multi-level depth-wise context modulating a query.

    Levels ``1..L`` come from stacked depth-wise convs over a projected
    context; level ``L+1`` is the spatial mean of the last level.  Each level
    has its own single-channel gate map.
    """

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        if cfg.focal_levels < 1:
            raise ConfigError("FMAM needs at least one focal level")
        c, levels = channels, cfg.focal_levels
        self.channels = channels
        self.levels = levels
        self.query = nn.Conv2d(c, c, 1)
        self.context = nn.Conv2d(c, c, 1)
        self.gate = nn.Conv2d(c, levels + 1, 1)
        self.focal = nn.ModuleList(
            nn.Conv2d(c, c, k, padding=k // 2, groups=c, bias=False) for k in cfg.focal_kernel_sizes
        )
        self.act = nn.GELU() if cfg.fmam_activation == "gelu" else nn.ReLU()
        self.modulator = nn.Conv2d(c, c, 1)
        self.proj = nn.Conv2d(c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"FMAM expects {self.channels} channels, got {x.shape[1]}")
        q = self.query(x)
        z = self.context(x)
        gates = self.gate(x)
        agg = torch.zeros_like(z)
        for level, conv in enumerate(self.focal):
            z = self.act(conv(z))
            agg = agg + gates[:, level : level + 1] * z
        z_global = z.mean(dim=(2, 3), keepdim=True)
        agg = agg + gates[:, self.levels :] * z_global
        return self.proj(q * self.modulator(agg))


class SFRB(nn.Module):
    """Spatial feature refinement: conv, parallel avg/max pooling, channel attention, residual."""

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        c = channels
        self.channels = c
        self.conv_mode = cfg.sfrb_conv
        if cfg.sfrb_conv == "full":
            self.conv1 = nn.Conv2d(c, c, 3, padding=1)
            self.conv2 = nn.Conv2d(2 * c, c, 3, padding=1)
        elif cfg.sfrb_conv == "separable":
            self.conv1 = nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1, groups=c, bias=False), nn.Conv2d(c, c, 1)
            )
            self.conv2 = nn.Sequential(
                nn.Conv2d(2 * c, 2 * c, 3, padding=1, groups=2 * c, bias=False),
                nn.Conv2d(2 * c, c, 1),
            )
        else:
            self.conv1 = nn.Conv2d(c, c, 3, padding=1, groups=c)
            # one group per channel sees that channel's (avg, max) pair
            self.conv2 = nn.Conv2d(2 * c, c, 3, padding=1, groups=c)
        self.bn1 = _bn(c, cfg)
        self.bn2 = _bn(c, cfg)
        groups = c if cfg.sfrb_attention == "channelwise" else 1
        self.attn = nn.Conv2d(c, c, 1, groups=groups)
        self.bn_attn = _bn(c, cfg)

    def _pooled(self, i1: torch.Tensor) -> torch.Tensor:
        avg = F.avg_pool2d(i1, 3, stride=1, padding=1, count_include_pad=False)
        mx = F.max_pool2d(i1, 3, stride=1, padding=1)
        if self.conv_mode == "depthwise":
            return torch.stack([avg, mx], dim=2).flatten(1, 2)
        return torch.cat([avg, mx], dim=1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel coefficients in (0, 1), shape (N, C, 1, 1)."""
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.bn_attn(self.attn(pooled)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SFRB expects {self.channels} channels, got {x.shape[1]}")
        i1 = F.relu(self.bn1(self.conv1(x)))
        i2 = F.relu(self.bn2(self.conv2(self._pooled(i1))))
        return self.attention(x) * i2 + x


class Bottleneck(nn.Module):
    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.fmam = FMAM(channels, cfg) if cfg.enable_fmam_bottleneck else nn.Identity()
        self.sfrb = SFRB(channels, cfg) if cfg.enable_sfrb_bottleneck else nn.Identity()

    def forward(self, s4: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.sfrb(self.fmam(s4)), s4], dim=1)


class DecoderStage(nn.Module):
    """Exact 2x transposed-conv upsampling, refined and joined with a refined skip."""

    def __init__(self, in_channels: int, out_channels: int, cfg: ModelConfig):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.tconv = nn.ConvTranspose2d(
            in_channels, out_channels, 3, stride=2, padding=1, output_padding=1
        )
        self.sfrb_up = SFRB(out_channels, cfg) if cfg.enable_sfrb_decoder else nn.Identity()
        skip = []
        if cfg.enable_fmam_skip:
            skip.append(FMAM(out_channels, cfg))
        if cfg.skip_attention == "cbam":
            raise ConfigError("CBAM skip attention is a config slot only; no block is provided")
        if cfg.enable_sfrb_skip:
            skip.append(SFRB(out_channels, cfg))
        self.skip = nn.Sequential(*skip)

    def forward(self, d_prev: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if d_prev.shape[1] != self.in_channels:
            raise ShapeError(f"decoder expects {self.in_channels} channels, got {d_prev.shape[1]}")
        h, w = d_prev.shape[-2:]
        if tuple(skip.shape[-2:]) != (2 * h, 2 * w):
            raise ShapeError(
                f"skip must be {(2 * h, 2 * w)} to match upsampled {(h, w)}, got {tuple(skip.shape[-2:])}"
            )
        if skip.shape[1] != self.out_channels:
            raise ShapeError(f"skip needs {self.out_channels} channels, got {skip.shape[1]}")
        up = self.sfrb_up(F.relu(self.tconv(d_prev)))
        return torch.cat([up, self.skip(skip)], dim=1)


class Head(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.relu = cfg.head_relu_enabled
        self.conv = nn.Conv2d(in_channels, cfg.num_classes, 1)

    def forward(self, d4: torch.Tensor) -> torch.Tensor:
        logits = self.conv(d4)
        if self.relu:
            logits = F.relu(logits)
        return torch.sigmoid(logits)


class LVSNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        b, c2, c3 = cfg.stage_channels
        s2_ch, s3_ch, s4_ch = 2 * b, 2 * c2, 2 * c3
        self.stem = Stem(cfg)
        self.down1 = Downsample(2 * b, cfg)
        self.enc2 = EncoderStage(s2_ch, c2, False, cfg)
        self.enc3 = EncoderStage(s3_ch, c3, True, cfg)
        self.bottleneck = Bottleneck(s4_ch, cfg)
        self.dec2 = DecoderStage(2 * s4_ch, s3_ch, cfg)
        self.dec3 = DecoderStage(2 * s3_ch, s2_ch, cfg)
        self.dec4 = DecoderStage(2 * s2_ch, b, cfg)
        self.head = Head(2 * b, cfg)

    def taps(self, img: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Every named intermediate of one forward pass, ending with ``out``."""
        t: Dict[str, torch.Tensor] = {}
        t["S1"], t["F1"] = self.stem(img)
        t["S2"] = self.down1(t["F1"])
        t["F2"], t["S3"] = self.enc2(t["S2"])
        t["F3"], t["S4"] = self.enc3(t["S3"])
        t["D1"] = self.bottleneck(t["S4"])
        t["D2"] = self.dec2(t["D1"], t["S3"])
        t["D3"] = self.dec3(t["D2"], t["S2"])
        t["D4"] = self.dec4(t["D3"], t["S1"])
        t["out"] = self.head(t["D4"])
        return t

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.taps(img)["out"]


def build_model(cfg: ModelConfig) -> LVSNet:
    """Construct the network with weights drawn from ``cfg.seed``.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return LVSNet(cfg)


def expected_taps(cfg: ModelConfig) -> Dict[str, FeatureMapSpec]:
    """Channel trace of every tap, derived from the config alone."""
    h, w = cfg.input_height, cfg.input_width
    b, c2, c3 = cfg.stage_channels
    fm = FeatureMapSpec
    return {
        "S1": fm(h, w, b),
        "F1": fm(h, w, 2 * b),
        "S2": fm(h // 2, w // 2, 2 * b),
        "F2": fm(h // 2, w // 2, 2 * c2),
        "S3": fm(h // 4, w // 4, 2 * c2),
        "F3": fm(h // 4, w // 4, 2 * c3),
        "S4": fm(h // 8, w // 8, 2 * c3),
        "D1": fm(h // 8, w // 8, 4 * c3),
        "D2": fm(h // 4, w // 4, 4 * c2),
        "D3": fm(h // 2, w // 2, 4 * b),
        "D4": fm(h, w, 2 * b),
        "out": fm(h, w, cfg.num_classes),
    }


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
