"""Model builders: pre-activation bottleneck ResNets for CIFAR at depth 9n+2,
with the 3x3 bottleneck convolution optionally replaced by an attention layer,
and roto-translation (p4) counterparts with channel counts halved.

Variant naming: [p4]resnet{29,83}[_se|_sasa|_simple_asc|_asc|_asc_se].
Stage planes are (16, 32, 64) with expansion 4 (halved to (8, 16, 32) on p4,
which keeps parameter counts comparable since every map also carries the four
orientations).  Attention layers use 8 heads, window 5, d_k = d_out, and the
stride-2 position is realized as attention followed by 2x2 average pooling.
In attention variants the scaling coefficient of the last batchnorm in each
residual block starts at zero, so blocks are identities at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AscLayer, P4AscLayer, SasaLayer, SimpleAscLayer
from .errors import InvalidConfig, UnknownVariant
from .nn import (BatchNorm, Conv2d, Ctx, GroupConv, LiftingConv, Linear,
                 Module, PointwiseConv, avgpool2, global_pool_and_linear)
from .se import SqueezeExcite
from .tensor import Tensor, seeded_rng

EXPANSION = 4
ATTENTION_KINDS = ("sasa", "simple_asc", "asc")


@dataclass
class ModelConfig:
    variant: str
    num_classes: int = 10
    n: int | None = None          # blocks per stage; default from the variant name
    seed: int = 0

    def resolved_n(self) -> int:
        if self.n is not None:
            return self.n
        return 9 if "83" in self.variant else 3


@dataclass
class ParamAudit:
    layers: dict[str, int] = field(default_factory=dict)
    total: int = 0

    def format(self) -> str:
        lines = [f"{name}  {count}" for name, count in self.layers.items()]
        lines.append(f"TOTAL  {self.total}")
        return "\n".join(lines)


def parse_variant(variant: str) -> tuple[bool, str, bool]:
    """-> (p4, mid_kind in {conv,sasa,simple_asc,asc}, se)."""
    name = variant
    p4 = name.startswith("p4")
    if p4:
        name = name[2:]
    if not (name.startswith("resnet29") or name.startswith("resnet83")):
        raise UnknownVariant(f"unknown variant {variant!r}")
    rest = name[len("resnet29"):]
    mid, se = "conv", False
    if rest == "":
        pass
    elif rest == "_se":
        se = True
    elif rest == "_sasa":
        mid = "sasa"
    elif rest == "_simple_asc":
        mid = "simple_asc"
    elif rest == "_asc":
        mid = "asc"
    elif rest == "_asc_se":
        mid, se = "asc", True
    else:
        raise UnknownVariant(f"unknown variant {variant!r}")
    if p4 and mid in ("sasa", "simple_asc"):
        raise UnknownVariant(f"{variant!r}: p4 variants exist for conv/se/asc only")
    return p4, mid, se


class Bottleneck(Module):
    """Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-mid, BN-ReLU-1x1 (+SE)."""

    def __init__(self, rng, cin: int, planes: int, p4: bool, mid_kind: str,
                 downsample: bool, se_reduction: int | None):
        super().__init__()
        cout = planes * EXPANSION
        self.downsample = downsample
        self.project = downsample or cin != cout
        self.attention = mid_kind in ATTENTION_KINDS
        self.bn1 = self.child("bn1", BatchNorm(cin))
        if p4:
            self.conv1 = self.child("conv1", GroupConv(rng, cin, planes, 1))
        else:
            self.conv1 = self.child("conv1", PointwiseConv(rng, cin, planes))
        self.bn2 = self.child("bn2", BatchNorm(planes))
        stride = 2 if downsample else 1
        if mid_kind == "conv":
            if p4:
                self.mid = self.child("mid", GroupConv(rng, planes, planes, 3, stride=stride))
            else:
                self.mid = self.child("mid", Conv2d(rng, planes, planes, 3, stride=stride))
        elif mid_kind == "sasa":
            self.mid = self.child("mid", SasaLayer(rng, planes, planes))
        elif mid_kind == "simple_asc":
            self.mid = self.child("mid", SimpleAscLayer(rng, planes, planes))
        elif mid_kind == "asc":
            layer = P4AscLayer(rng, planes, planes) if p4 else AscLayer(rng, planes, planes)
            self.mid = self.child("mid", layer)
        else:
            raise UnknownVariant(f"unknown mid layer {mid_kind!r}")
        self.bn3 = self.child("bn3", BatchNorm(planes, gamma_init=0.0 if self.attention else 1.0))
        if p4:
            self.conv3 = self.child("conv3", GroupConv(rng, planes, cout, 1))
        else:
            self.conv3 = self.child("conv3", PointwiseConv(rng, planes, cout))
        if se_reduction is not None:
            self.se = self.child("se", SqueezeExcite(rng, cout, se_reduction))
        else:
            self.se = None
        if self.project:
            if p4:
                sc_stride = 1 if (downsample and self.attention) else stride
                self.shortcut = self.child("shortcut", GroupConv(rng, cin, cout, 1, stride=sc_stride))
            elif downsample and not self.attention:
                self.shortcut = self.child("shortcut", Conv2d(rng, cin, cout, 1, stride=stride))
            else:
                self.shortcut = self.child("shortcut", PointwiseConv(rng, cin, cout))
        else:
            self.shortcut = None

    def forward(self, x, ctx):
        h = T.relu(self.bn1(x, ctx))
        y = self.conv1(h, ctx)
        y = self.mid(T.relu(self.bn2(y, ctx)), ctx)
        if self.downsample and self.attention:
            y = avgpool2(y)
        y = self.conv3(T.relu(self.bn3(y, ctx)), ctx)
        if self.se is not None:
            y = self.se(y, ctx)
        if self.shortcut is not None:
            s = self.shortcut(h, ctx)
            if self.downsample and self.attention:
                s = avgpool2(s)
        else:
            s = x
        return T.add(y, s)


class ResNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        p4, mid_kind, se = parse_variant(cfg.variant)
        if cfg.num_classes not in (10, 100):
            raise InvalidConfig(f"num_classes must be 10 or 100, got {cfg.num_classes}")
        n = cfg.resolved_n()
        if n < 1:
            raise InvalidConfig(f"blocks per stage must be >= 1, got {n}")
        rng = seeded_rng(cfg.seed)
        self.cfg = cfg
        self.p4 = p4
        stem_ch = 8 if p4 else 16
        planes = (8, 16, 32) if p4 else (16, 32, 64)
        se_reduction = (4 if p4 else 16) if se else None
        if p4:
            self.stem = self.child("stem", LiftingConv(rng, 3, stem_ch, 3))
        else:
            self.stem = self.child("stem", Conv2d(rng, 3, stem_ch, 3))
        cin = stem_ch
        self.blocks: list[Bottleneck] = []
        for s, p in enumerate(planes):
            for b in range(n):
                block = Bottleneck(rng, cin, p, p4, mid_kind,
                                   downsample=(s > 0 and b == 0),
                                   se_reduction=se_reduction)
                self.child(f"stage{s + 1}.block{b}", block)
                self.blocks.append(block)
                cin = p * EXPANSION
        self.bn_final = self.child("bn_final", BatchNorm(cin))
        self.head = self.child("head", Linear(rng, cin, cfg.num_classes))

    def forward(self, x, ctx):
        y = self.stem(x, ctx)
        for block in self.blocks:
            y = block(y, ctx)
        y = T.relu(self.bn_final(y, ctx))
        return global_pool_and_linear(y, self.head.w, self.head.b)

    def decay_exempt(self) -> set[str]:
        """Parameter names excluded from weight decay (batchnorm affine)."""
        exempt = set()
        for mname, mod in self.named_modules():
            if isinstance(mod, BatchNorm):
                prefix = mname + "." if mname else ""
                exempt.update(prefix + p for p in ("gamma", "beta"))
        return exempt


def build_model(cfg: ModelConfig) -> ResNet:
    return ResNet(cfg)


def count_params(model: Module) -> ParamAudit:
    audit = ParamAudit()
    for name, p in model.named_parameters():
        audit.layers[name] = p.size
        audit.total += p.size
    return audit
