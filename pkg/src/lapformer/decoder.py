"""The light CNN decoder head.

Dataflow for the full head::

    f_i --FRM--> x_i --upsample to H/4--> progressive fusion y_4..y_1
        --> cat[y_1..y_4] --> feature selection --> (+ y_1) --> 1x1 conv --> x4 upsample

The ablation switches in :class:`DecoderConfig` rebuild the intermediate
heads compared in the component study (SegFormer MLP head, PFF only, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

ABLATIONS: dict[str, dict[str, bool]] = {
    "segformer": dict(pff=False, aggregate=False, select=False, skip=False, refine=False),
    "pff": dict(pff=True, aggregate=False, select=False, skip=False, refine=False),
    "pff_a": dict(pff=True, aggregate=True, select=False, skip=False, refine=False),
    "pff_a_fsm": dict(pff=True, aggregate=True, select=True, skip=False, refine=False),
    "pff_a_fsm_skip": dict(pff=True, aggregate=True, select=True, skip=True, refine=False),
    "lapformer": dict(pff=True, aggregate=True, select=True, skip=True, refine=True),
}


@dataclass
class DecoderConfig:
    in_channels: tuple[int, ...] = (64, 128, 320, 512)
    embed_dim: int = 256
    num_classes: int = 1
    upsample_mode: str = "bilinear"
    fsm_reduction: int = 16
    # ablation switches; all on is the full head
    pff: bool = True
    aggregate: bool = True
    select: bool = True
    skip: bool = True
    refine: bool = True

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)
        self.validate()

    def validate(self) -> None:
        c = self.in_channels
        if len(c) < 2:
            raise ConfigError(f"decoder.in_channels needs at least 2 levels, got {list(c)}")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ConfigError(f"decoder.in_channels must be strictly increasing, got {list(c)}")
        if self.embed_dim <= 0:
            raise ConfigError(f"decoder.embed_dim must be positive, got {self.embed_dim}")
        if self.num_classes < 1:
            raise ConfigError(f"decoder.num_classes must be >= 1, got {self.num_classes}")
        if self.upsample_mode != "bilinear":
            raise ConfigError(f"decoder.upsample_mode must be 'bilinear', got {self.upsample_mode!r}")
        agg_width = len(c) * self.embed_dim
        if self.fsm_reduction < 1 or agg_width % self.fsm_reduction:
            raise ConfigError(
                f"decoder.fsm_reduction {self.fsm_reduction} must divide the aggregated width {agg_width}")
        if not self.pff and (self.aggregate or self.select or self.skip or self.refine):
            raise ConfigError("decoder: aggregate/select/skip/refine need pff=True")
        if self.select and not self.aggregate:
            raise ConfigError("decoder.select needs decoder.aggregate=True")

    @property
    def ablation(self) -> str | None:
        flags = {k: getattr(self, k) for k in ("pff", "aggregate", "select", "skip", "refine")}
        for name, preset in ABLATIONS.items():
            if preset == flags:
                return name
        return None


@dataclass
class DecoderState:
    refined: list[torch.Tensor]
    fused: list[torch.Tensor]
    aggregated: torch.Tensor | None
    selected: torch.Tensor
    logits: torch.Tensor
    weights: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class Resize(nn.Module):
    """Bilinear, corner-unaligned resize to a target size."""

    def forward(self, x, size):
        return upsample(x, size)

    def extra_flops(self, inputs, output):
        if tuple(inputs[0].shape[-2:]) == tuple(output.shape[-2:]):
            return {}
        return {"resample": output.numel()}


class FeatureRefinement(nn.Module):
    """3x3 conv -> BatchNorm -> ReLU, one instance per pyramid level."""

    def __init__(self, in_ch: int, embed_dim: int, level: int = 0):
        super().__init__()
        self.in_ch = in_ch
        self.level = level
        self.conv = nn.Conv2d(in_ch, embed_dim, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(embed_dim)
        self.act = nn.ReLU()

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ConfigError(
                f"level {self.level}: expected {self.in_ch} input channels, got {x.shape[1]}")
        return self.act(self.bn(self.conv(x)))


class Lateral(nn.Module):
    """Plain 1x1 projection used by the heads without refinement."""

    def __init__(self, in_ch: int, embed_dim: int, level: int = 0):
        super().__init__()
        self.in_ch = in_ch
        self.level = level
        self.proj = nn.Conv2d(in_ch, embed_dim, 1)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ConfigError(
                f"level {self.level}: expected {self.in_ch} input channels, got {x.shape[1]}")
        return self.proj(x)


class ProgressiveFusion(nn.Module):
    """Top-down fusion y_i = Linear([y_{i+1}, x_i]) with every map at the
    finest resolution. Returns ``[y_1, ..., y_n]``."""

    def __init__(self, embed_dim: int, num_levels: int = 4):
        super().__init__()
        self.embed_dim = embed_dim
        self.num_levels = num_levels
        self.resize = Resize()
        # fuse[i] produces y_{i+1} (0-based level i)
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * embed_dim, embed_dim, 1) for _ in range(num_levels - 1))

    def forward(self, refined: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(refined) != self.num_levels:
            raise DimensionError(f"expected {self.num_levels} maps, got {len(refined)}")
        widths = [x.shape[1] for x in refined]
        if any(w != self.embed_dim for w in widths):
            raise ConfigError(f"all refined maps need {self.embed_dim} channels, got {widths}")
        size = refined[0].shape[-2:]
        up = [self.resize(x, size) for x in refined]
        fused = [up[-1]]
        for i in range(self.num_levels - 2, -1, -1):
            fused.append(self.fuse[i](torch.cat([fused[-1], up[i]], dim=1)))
        return fused[::-1]


def aggregate(fused: Sequence[torch.Tensor], num_levels: int = 4) -> torch.Tensor:
    """Channel concatenation in order [y_1, ..., y_n] (low to high semantic)."""
    if len(fused) != num_levels:
        raise DimensionError(f"aggregation takes {num_levels} maps, got {len(fused)}")
    shapes = {tuple(y.shape[-2:]) for y in fused}
    if len(shapes) != 1:
        raise DimensionError(f"aggregated maps must share a spatial size, got {sorted(shapes)}")
    return torch.cat(list(fused), dim=1)


class FeatureSelection(nn.Module):
    """Channel gate w = hardsigmoid(fc2(relu(fc1(avgpool(X))))), then a 1x1
    channel-reducing conv on w * X. With ``gate=False`` only the conv runs."""

    def __init__(self, in_ch: int, out_ch: int, reduction: int = 16, gate: bool = True):
        super().__init__()
        self.in_ch = in_ch
        self.gate = gate
        if gate:
            self.pool = nn.AdaptiveAvgPool2d(1)
            self.fc1 = nn.Linear(in_ch, in_ch // reduction)
            self.relu = nn.ReLU()
            self.fc2 = nn.Linear(in_ch // reduction, in_ch)
            self.hsig = nn.Hardsigmoid()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)
        self.last_weights: torch.Tensor | None = None

    def weights(self, x):
        z = self.fc2(self.relu(self.fc1(self.pool(x).flatten(1))))
        return self.hsig(z)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise DimensionError(f"feature selection expects {self.in_ch} channels, got {x.shape[1]}")
        if self.gate:
            w = self.weights(x)
            self.last_weights = w
            x = x * w[:, :, None, None]
        return self.proj(x)

    def extra_flops(self, inputs, output):
        return {"elementwise": inputs[0].numel()} if self.gate else {}


class SkipAdd(nn.Module):
    def forward(self, selected, lowest):
        return fuse_low_level(selected, lowest)

    def extra_flops(self, inputs, output):
        return {"elementwise": output.numel()}


def fuse_low_level(selected: torch.Tensor, lowest: torch.Tensor) -> torch.Tensor:
    if selected.shape != lowest.shape:
        raise DimensionError(
            f"skip connection shape mismatch: {tuple(selected.shape)} vs {tuple(lowest.shape)}")
    return selected + lowest


class PredictionHead(nn.Module):
    """1x1 conv to class logits followed by x4 bilinear upsampling."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, num_classes, 1)
        self.resize = Resize()

    def forward(self, x, out_size):
        h, w = x.shape[-2:]
        if tuple(out_size) != (4 * h, 4 * w):
            raise DimensionError(f"out_size {tuple(out_size)} is not 4x the input size {(h, w)}")
        return self.resize(self.conv(x), out_size)


class SegFormerFusion(nn.Module):
    """All-MLP baseline: concat the upsampled laterals, 1x1 conv + BN + ReLU."""

    def __init__(self, embed_dim: int, num_levels: int = 4):
        super().__init__()
        self.resize = Resize()
        self.conv = nn.Conv2d(num_levels * embed_dim, embed_dim, 1, bias=False)
        self.bn = nn.BatchNorm2d(embed_dim)
        self.act = nn.ReLU()

    def forward(self, refined):
        size = refined[0].shape[-2:]
        up = [self.resize(x, size) for x in refined]
        return up, self.act(self.bn(self.conv(torch.cat(up, dim=1))))


class LAPDecoder(nn.Module):
    def __init__(self, config: DecoderConfig | None = None):
        super().__init__()
        config = config or DecoderConfig()
        config.validate()
        self.config = config
        n, e = len(config.in_channels), config.embed_dim
        block = FeatureRefinement if config.refine else Lateral
        self.refine = nn.ModuleList(block(c, e, i + 1) for i, c in enumerate(config.in_channels))
        if config.pff:
            self.pff = ProgressiveFusion(e, n)
            if config.aggregate:
                self.fsm = FeatureSelection(n * e, e, config.fsm_reduction, gate=config.select)
            if config.skip:
                self.skip = SkipAdd()
        else:
            self.mlp_fuse = SegFormerFusion(e, n)
        self.predict = PredictionHead(e, config.num_classes)

    def forward_state(self, pyramid: Sequence[torch.Tensor], out_size=None) -> DecoderState:
        levels = list(pyramid)
        if len(levels) != len(self.refine):
            raise DimensionError(f"decoder expects {len(self.refine)} levels, got {len(levels)}")
        refined = [m(f) for m, f in zip(self.refine, levels)]
        h, w = refined[0].shape[-2:]
        out_size = tuple(out_size) if out_size is not None else (4 * h, 4 * w)
        cfg = self.config
        aggregated = weights = None
        if cfg.pff:
            fused = self.pff(refined)
            x = fused[0]
            if cfg.aggregate:
                aggregated = aggregate(fused, len(fused))
                x = self.fsm(aggregated)
                weights = self.fsm.last_weights
            if cfg.skip:
                x = self.skip(x, fused[0])
        else:
            fused, x = self.mlp_fuse(refined)
        logits = self.predict(x, out_size)
        return DecoderState(refined, fused, aggregated, x, logits, weights)

    def forward(self, pyramid, out_size=None):
        return self.forward_state(pyramid, out_size).logits


def feature_refine(f: torch.Tensor, embed_dim: int) -> torch.Tensor:
    m = FeatureRefinement(f.shape[1], embed_dim)
    return m(f)


def progressive_fuse(refined: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    m = ProgressiveFusion(refined[0].shape[1], len(refined))
    return m(refined)


def decode(pyramid, config: DecoderConfig) -> torch.Tensor:
    levels = list(pyramid)
    got = tuple(f.shape[1] for f in levels)
    if got != tuple(config.in_channels):
        raise ConfigError(f"pyramid channels {list(got)} do not match decoder.in_channels "
                          f"{list(config.in_channels)}")
    return LAPDecoder(config)(levels)
