"""Hierarchical Mix-Transformer encoder.

Four stages, each an overlapping patch embedding followed by a stack of
transformer blocks with spatially-reduced attention and a Mix-FFN (a 3x3
depthwise convolution between the two MLP layers replaces positional
encoding). Stage ``i`` (1-based) emits a map of size ``H/2**(i+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

NUM_STAGES = 4


@dataclass
class EncoderConfig:
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (64, 128, 320, 512)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratios: tuple[int, ...] = (4, 4, 4, 4)
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    drop_path_rate: float = 0.1

    def __post_init__(self):
        for name in ("stage_depths", "stage_channels", "heads", "sr_ratios",
                     "mlp_ratios", "patch_sizes", "patch_strides"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != NUM_STAGES:
                raise ConfigError(f"encoder.{name} needs {NUM_STAGES} entries, got {len(value)}")
            setattr(self, name, value)
        self.drop_path_rate = float(self.drop_path_rate)
        self.validate()

    def validate(self) -> None:
        c = self.stage_channels
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ConfigError(f"encoder.stage_channels must be strictly increasing, got {list(c)}")
        if self.patch_strides != (4, 2, 2, 2):
            raise ConfigError(f"encoder.patch_strides must be [4, 2, 2, 2], got {list(self.patch_strides)}")
        sr = self.sr_ratios
        if any(r < 1 for r in sr) or any(b > a for a, b in zip(sr, sr[1:])):
            raise ConfigError(f"encoder.sr_ratios must be >= 1 and non-increasing, got {list(sr)}")
        for i, (ch, h) in enumerate(zip(c, self.heads)):
            if h < 1 or ch % h:
                raise ConfigError(f"encoder stage {i + 1}: channels {ch} not divisible by heads {h}")
        for i, (p, s) in enumerate(zip(self.patch_sizes, self.patch_strides)):
            if s > p:
                raise ConfigError(f"encoder stage {i + 1}: stride {s} exceeds patch size {p}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"encoder.stage_depths must be >= 1, got {list(self.stage_depths)}")
        if any(m < 1 for m in self.mlp_ratios):
            raise ConfigError(f"encoder.mlp_ratios must be >= 1, got {list(self.mlp_ratios)}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"encoder.drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")


def mit_config(name: str, drop_path_rate: float = 0.1) -> EncoderConfig:
    """Stage layout of the MiT-B0..B5 family (only B1-B3 are exercised)."""
    depths = {
        "b0": (2, 2, 2, 2),
        "b1": (2, 2, 2, 2),
        "b2": (3, 4, 6, 3),
        "b3": (3, 4, 18, 3),
        "b4": (3, 8, 27, 3),
        "b5": (3, 6, 40, 3),
    }
    key = name.lower().replace("mit-", "").replace("mit_", "")
    if key not in depths:
        raise ConfigError(f"unknown MiT variant {name!r}")
    channels = (32, 64, 160, 256) if key == "b0" else (64, 128, 320, 512)
    return EncoderConfig(stage_depths=depths[key], stage_channels=channels,
                         drop_path_rate=drop_path_rate)


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    input_size: tuple[int, int]
    channels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.levels) != NUM_STAGES:
            raise DimensionError(f"a feature pyramid has {NUM_STAGES} levels, got {len(self.levels)}")
        h, w = self.input_size
        for i, f in enumerate(self.levels, start=1):
            expected = (h // 2 ** (i + 1), w // 2 ** (i + 1))
            if tuple(f.shape[-2:]) != expected:
                raise DimensionError(f"level {i} has spatial size {tuple(f.shape[-2:])}, expected {expected}")
        if not self.channels:
            self.channels = tuple(f.shape[1] for f in self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


class DropPath(nn.Module):
    """Per-sample stochastic depth; identity in eval mode or at rate 0."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep

    def extra_repr(self):
        return f"p={self.p}"

    def extra_flops(self, inputs, output):
        return {}


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class OverlapPatchEmbed(nn.Module):
    """Strided conv with ``patch // 2`` padding, then channel LayerNorm.

    ``min_size`` is the smallest accepted input side; it defaults to the patch
    size. Inner stages pass the stride instead, since their padded input may
    legitimately be smaller than the kernel (a 2x2 map at stage 4 of a 32px
    image).
    """

    def __init__(self, in_ch: int, out_ch: int, patch: int, stride: int, min_size: int | None = None):
        super().__init__()
        if stride > patch:
            raise ConfigError(f"patch stride {stride} exceeds patch size {patch}")
        self.patch = patch
        self.stride = stride
        self.min_size = patch if min_size is None else min_size
        self.proj = nn.Conv2d(in_ch, out_ch, patch, stride, padding=patch // 2)
        self.norm = ChannelLayerNorm(out_ch)

    def forward(self, x):
        if x.shape[-2] < self.min_size or x.shape[-1] < self.min_size:
            raise DimensionError(
                f"input of shape {tuple(x.shape)} is smaller than {self.min_size} "
                f"(patch {self.patch}, stride {self.stride})")
        return self.norm(self.proj(x))


class AttentionCore(nn.Module):
    """softmax(q k^T / sqrt(d)) v over heads. Kept as its own module so the
    FLOP counter can attribute the two matmuls."""

    def __init__(self, heads: int):
        super().__init__()
        self.heads = heads
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, q, k, v):
        b, n, c = q.shape
        d = c // self.heads
        q = q.reshape(b, n, self.heads, d).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, d).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, d).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * d ** -0.5
        attn = attn.softmax(dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = attn @ v
        return out.transpose(1, 2).reshape(b, n, c)

    def extra_flops(self, inputs, output):
        q, k, _ = inputs
        b, n, c = q.shape
        m = k.shape[1]
        # q k^T and attn v, plus the softmax over the score matrix
        return {"attention_matmul": 2 * b * n * m * c, "attention_softmax": b * self.heads * n * m}


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention whose keys/values come from a map shrunk by a
    strided ``sr x sr`` convolution."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.dim = dim
        self.sr_ratio = sr_ratio
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        for lin in (self.q, self.kv, self.proj):
            lin.flops_category = "attention_proj"
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)
        self.core = AttentionCore(heads)

    def forward(self, x, h: int, w: int):
        b, n, c = x.shape
        q = self.q(x)
        if self.sr_ratio > 1:
            kv_in = x.transpose(1, 2).reshape(b, c, h, w)
            kv_in = self.sr(kv_in).flatten(2).transpose(1, 2)
            kv_in = self.sr_norm(kv_in)
        else:
            kv_in = x
        k, v = self.kv(kv_in).chunk(2, dim=-1)
        return self.proj(self.core(q, k, v))


class MixFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h: int, w: int):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x)).

    Accepts and returns a (B, C, h, w) map.
    """

    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, dim * mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.drop_path(self.attn(self.norm1(t), h, w))
        t = t + self.drop_path(self.ffn(self.norm2(t), h, w))
        return t.transpose(1, 2).reshape(b, c, h, w)

    def extra_flops(self, inputs, output):
        return {"elementwise": 2 * output.numel()}


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, patch, stride, depth, heads, sr_ratio, mlp_ratio, drop_paths,
                 first: bool = False):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_ch, out_ch, patch, stride,
                                             min_size=None if first else stride)
        self.blocks = nn.ModuleList(
            TransformerBlock(out_ch, heads, sr_ratio, mlp_ratio, dp) for dp in drop_paths)
        self.norm = ChannelLayerNorm(out_ch)

    def forward(self, x):
        x = self.patch_embed(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class MixTransformer(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        config = config or EncoderConfig()
        config.validate()
        self.config = config
        total = sum(config.stage_depths)
        rates = torch.linspace(0, config.drop_path_rate, total).tolist() if total > 1 else [0.0]
        stages, in_ch, k = [], 3, 0
        for i in range(NUM_STAGES):
            d = config.stage_depths[i]
            stages.append(EncoderStage(
                in_ch, config.stage_channels[i], config.patch_sizes[i], config.patch_strides[i],
                d, config.heads[i], config.sr_ratios[i], config.mlp_ratios[i], rates[k:k + d],
                first=i == 0))
            in_ch = config.stage_channels[i]
            k += d
        self.stages = nn.ModuleList(stages)
        self.apply(init_weights)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected an image batch (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise DimensionError(f"input H and W must be divisible by 32, got {h}x{w}")
        levels, x = [], image
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels, (h, w), tuple(self.config.stage_channels))


def init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d)):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def patch_embed(x: torch.Tensor, patch: int, stride: int, out_ch: int) -> torch.Tensor:
    """Freshly initialised overlapping patch embedding applied to ``x``."""
    layer = OverlapPatchEmbed(x.shape[1], out_ch, patch, stride)
    layer.apply(init_weights)
    return layer(x)


def encode(image: torch.Tensor, config: EncoderConfig) -> FeaturePyramid:
    """Run a freshly initialised encoder in eval mode."""
    return MixTransformer(config).eval()(image)
