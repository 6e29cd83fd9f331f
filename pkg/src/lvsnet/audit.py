"""Analytic parameter / FLOP / size audit of a model configuration.

The audit walks a layer table derived from :class:`ModelConfig` and never
instantiates the network, so it can be cross-checked against the backend.

Counting conventions:

* conv FLOPs are ``2 * MACs``; bias adds are not counted.
* a conv's MACs are ``out_h * out_w * k * k * (in / groups) * out``.
* a stride-2 transposed conv performs ``in_h * in_w * k * k * in * out``
  MACs (each input pixel scatters one k x k x out kernel slice; the
  inserted zeros of the dilated formulation are not counted).
* elementwise terms, per output element: BN 2, activation 1, sigmoid 1,
  elementwise product / sum 1, k x k pooling k*k, global mean 1 per input
  element.  Concatenation and dropout (inactive at inference) are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

from .config import ModelConfig

BYTES_PER_PARAM = 4

# reference figures the audit is compared against
REFERENCE_PARAMS = 0.71e6
REFERENCE_GFLOPS = 29.60
REFERENCE_MB = 2.74


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str  # conv | tconv | bn
    in_channels: int
    out_channels: int
    kernel: int
    out_h: int
    out_w: int
    groups: int = 1
    bias: bool = True
    in_h: int = 0
    in_w: int = 0

    @property
    def params(self) -> int:
        if self.kind == "bn":
            return 2 * self.out_channels
        w = self.kernel * self.kernel * (self.in_channels // self.groups) * self.out_channels
        return w + (self.out_channels if self.bias else 0)

    @property
    def macs(self) -> int:
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return self.out_h * self.out_w * k2 * (self.in_channels // self.groups) * self.out_channels
        if self.kind == "tconv":
            return self.in_h * self.in_w * k2 * self.in_channels * self.out_channels
        return 0


@dataclass
class ComplexityAudit:
    parameter_count: int
    flops: int
    serialized_bytes: int
    conv_flops: int = 0
    elementwise_flops: int = 0
    layers: List[LayerRecord] = field(default_factory=list, repr=False)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def megabytes(self) -> float:
        return self.serialized_bytes / 2**20


def conv_params(in_channels: int, out_channels: int, kernel: int, groups: int = 1, bias: bool = True) -> int:
    """Learnable parameters of a single 2-D convolution."""
    rec = LayerRecord("conv", "conv", in_channels, out_channels, kernel, 1, 1, groups, bias)
    return rec.params


class _Tracer:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layers: List[LayerRecord] = []
        self.elementwise = 0

    def conv(self, name, cin, cout, k, h, w, groups=1, bias=True):
        self.layers.append(LayerRecord(name, "conv", cin, cout, k, h, w, groups, bias))

    def tconv(self, name, cin, cout, k, h, w):
        self.layers.append(LayerRecord(name, "tconv", cin, cout, k, 2 * h, 2 * w, 1, True, h, w))

    def bn(self, name, c, h, w):
        self.layers.append(LayerRecord(name, "bn", c, c, 1, h, w))
        self.elementwise += 2 * c * h * w

    def ew(self, n_elems, per=1):
        self.elementwise += per * n_elems

    def sfrb(self, name, c, h, w):
        n = c * h * w
        mode = self.cfg.sfrb_conv
        if mode == "full":
            self.conv(f"{name}.conv1", c, c, 3, h, w)
        elif mode == "separable":
            self.conv(f"{name}.conv1.0", c, c, 3, h, w, groups=c, bias=False)
            self.conv(f"{name}.conv1.1", c, c, 1, h, w)
        else:
            self.conv(f"{name}.conv1", c, c, 3, h, w, groups=c)
        self.bn(f"{name}.bn1", c, h, w)
        self.ew(n)  # relu
        self.ew(2 * n, per=9)  # avg + max 3x3 pools
        if mode == "full":
            self.conv(f"{name}.conv2", 2 * c, c, 3, h, w)
        elif mode == "separable":
            self.conv(f"{name}.conv2.0", 2 * c, 2 * c, 3, h, w, groups=2 * c, bias=False)
            self.conv(f"{name}.conv2.1", 2 * c, c, 1, h, w)
        else:
            self.conv(f"{name}.conv2", 2 * c, c, 3, h, w, groups=c)
        self.bn(f"{name}.bn2", c, h, w)
        self.ew(n)  # relu
        self.ew(n)  # global mean
        groups = c if self.cfg.sfrb_attention == "channelwise" else 1
        self.conv(f"{name}.attn", c, c, 1, 1, 1, groups=groups)
        self.bn(f"{name}.bn_attn", c, 1, 1)
        self.ew(c)  # sigmoid
        self.ew(2 * n)  # weighting + residual

    def fmam(self, name, c, h, w):
        n = c * h * w
        levels = self.cfg.focal_levels
        self.conv(f"{name}.query", c, c, 1, h, w)
        self.conv(f"{name}.context", c, c, 1, h, w)
        self.conv(f"{name}.gate", c, levels + 1, 1, h, w)
        for i, k in enumerate(self.cfg.focal_kernel_sizes):
            self.conv(f"{name}.focal.{i}", c, c, k, h, w, groups=c, bias=False)
            self.ew(n)  # activation
            self.ew(2 * n)  # gate product + accumulate
        self.ew(n)  # global mean
        self.ew(2 * n)  # global level gate + accumulate
        self.conv(f"{name}.modulator", c, c, 1, h, w)
        self.ew(n)  # query modulation
        self.conv(f"{name}.proj", c, c, 1, h, w)

    def decoder(self, name, cin, cout, h, w):
        cfg = self.cfg
        self.tconv(f"{name}.tconv", cin, cout, 3, h, w)
        H, W = 2 * h, 2 * w
        self.ew(cout * H * W)  # relu
        if cfg.enable_sfrb_decoder:
            self.sfrb(f"{name}.sfrb_up", cout, H, W)
        idx = 0
        if cfg.enable_fmam_skip:
            self.fmam(f"{name}.skip.{idx}", cout, H, W)
            idx += 1
        if cfg.enable_sfrb_skip:
            self.sfrb(f"{name}.skip.{idx}", cout, H, W)


def layer_table(cfg: ModelConfig) -> _Tracer:
    t = _Tracer(cfg)
    H, W = cfg.input_height, cfg.input_width
    cin = cfg.input_channels
    b, c2, c3 = cfg.stage_channels
    k1 = 1 if cfg.multiscale_encoder else 3

    t.conv("stem.conv1x1", cin, b, k1, H, W)
    t.conv("stem.conv3x3", cin, b, 3, H, W)
    t.ew(2 * b * H * W)  # relu x2
    t.bn("down1.bn", 2 * b, H, W)
    t.ew(2 * b * (H // 2) * (W // 2), per=4)

    h, w, c_in = H // 2, W // 2, 2 * b
    for name, c in (("enc2", c2), ("enc3", c3)):
        t.conv(f"{name}.conv1x1", c_in, c, k1, h, w)
        t.conv(f"{name}.conv3x3", c_in, c, 3, h, w)
        t.ew(2 * c * h * w)
        t.bn(f"{name}.down.bn", 2 * c, h, w)
        t.ew(2 * c * (h // 2) * (w // 2), per=4)
        h, w, c_in = h // 2, w // 2, 2 * c

    if cfg.enable_fmam_bottleneck:
        t.fmam("bottleneck.fmam", c_in, h, w)
    if cfg.enable_sfrb_bottleneck:
        t.sfrb("bottleneck.sfrb", c_in, h, w)

    d_ch = 2 * c_in
    for name, cout in (("dec2", 2 * c2), ("dec3", 2 * b), ("dec4", b)):
        t.decoder(name, d_ch, cout, h, w)
        h, w, d_ch = 2 * h, 2 * w, 2 * cout

    t.conv("head.conv", d_ch, cfg.num_classes, 1, H, W)
    t.ew(2 * cfg.num_classes * H * W)  # relu (or not) + sigmoid
    return t


def audit_complexity(cfg: ModelConfig) -> ComplexityAudit:
    t = layer_table(cfg)
    params = sum(layer.params for layer in t.layers)
    conv_flops = 2 * sum(layer.macs for layer in t.layers)
    return ComplexityAudit(
        parameter_count=params,
        flops=conv_flops + t.elementwise,
        serialized_bytes=BYTES_PER_PARAM * params,
        conv_flops=conv_flops,
        elementwise_flops=t.elementwise,
        layers=t.layers,
    )
