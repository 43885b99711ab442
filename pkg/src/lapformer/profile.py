"""Analytic FLOP counting by forward hooks.

Every leaf module must have a counting rule; an unknown leaf raises
:class:`UnsupportedOpError` rather than being skipped. Modules that do
functional work of their own (residual adds, attention matmuls, resizing)
report it through an ``extra_flops(inputs, output) -> {category: count}``
method.

Counts are multiply-accumulates (one per MAC) for learned layers and one per
output element for normalisation, activations, resampling and elementwise
ops. Two conventions select which categories are summed:

``"toolbox"``
    Everything except the attention projections (q, kv, out), the two
    attention matmuls and the softmax between them. This is what hook-based
    counters such as the one in mmcv report for MiT, where attention runs
    inside one opaque multi-head-attention module that has no counting hook.
    It matches the reference complexity figures and is the default.
``"full"``
    Every category.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import DimensionError, UnsupportedOpError

CONVENTIONS = {
    "toolbox": frozenset({"attention_proj", "attention_matmul", "attention_softmax"}),
    "full": frozenset(),
}


def _conv(m: nn.Conv2d, inputs, output):
    k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
    macs = output.numel() * k
    if m.bias is not None:
        macs += output.numel()
    return macs


def _linear(m: nn.Linear, inputs, output):
    macs = output.numel() * m.in_features
    if m.bias is not None:
        macs += output.numel()
    return macs


def _norm(m, inputs, output):
    n = inputs[0].numel()
    affine = getattr(m, "elementwise_affine", getattr(m, "affine", False))
    return 2 * n if affine else n


def _elementwise(m, inputs, output):
    return output.numel()


def _pool(m, inputs, output):
    return inputs[0].numel()


def _zero(m, inputs, output):
    return 0


# leaf type -> (category, rule)
LEAF_RULES = {
    nn.Conv2d: ("conv", _conv),
    nn.Linear: ("linear", _linear),
    nn.LayerNorm: ("norm", _norm),
    nn.BatchNorm2d: ("norm", _norm),
    nn.ReLU: ("act", _elementwise),
    nn.GELU: ("act", _elementwise),
    nn.Hardsigmoid: ("act", _elementwise),
    nn.AdaptiveAvgPool2d: ("pool", _pool),
    nn.Identity: ("none", _zero),
    nn.Dropout: ("none", _zero),
}


def _rule_for(m: nn.Module):
    for cls in type(m).__mro__:
        if cls in LEAF_RULES:
            return LEAF_RULES[cls]
    return None


@dataclass
class FlopReport:
    by_category: dict[str, int] = field(default_factory=dict)
    by_module: dict[str, int] = field(default_factory=dict)
    convention: str = "toolbox"
    input_size: tuple[int, int] = (352, 352)

    @property
    def total(self) -> int:
        excluded = CONVENTIONS[self.convention]
        return sum(v for k, v in self.by_category.items() if k not in excluded)

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def count_flops(model: nn.Module, input_size=(352, 352), convention: str = "toolbox",
                example: torch.Tensor | None = None) -> FlopReport:
    """Run one hooked forward pass. ``example`` replaces the default zero
    image batch, e.g. for profiling a single layer."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}; choose from {sorted(CONVENTIONS)}")
    if example is None:
        h, w = input_size
        if h % 32 or w % 32:
            raise DimensionError(f"input H and W must be divisible by 32, got {h}x{w}")
        example = torch.zeros(1, 3, h, w)
    else:
        h, w = example.shape[-2:]
    report = FlopReport(convention=convention, input_size=(h, w))
    cats: dict[str, int] = defaultdict(int)
    mods: dict[str, int] = defaultdict(int)
    excluded = CONVENTIONS[convention]
    handles = []

    def make_hook(name, module):
        rule = _rule_for(module)
        has_children = any(True for _ in module.children())
        extra = getattr(module, "extra_flops", None)
        if rule is None and extra is None and not has_children:
            raise UnsupportedOpError(f"no FLOP rule for {type(module).__name__} at {name or '<root>'}")

        def hook(mod, inputs, output):
            counts = {}
            if rule is not None:
                cat = getattr(mod, "flops_category", rule[0])
                counts[cat] = rule[1](mod, inputs, output)
            if extra is not None:
                for k, v in extra(inputs, output).items():
                    counts[k] = counts.get(k, 0) + v
            for k, v in counts.items():
                cats[k] += v
                if k not in excluded:
                    mods[name] += v

        return hook

    for name, module in model.named_modules():
        handles.append(module.register_forward_hook(make_hook(name, module)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(example)
    finally:
        for hd in handles:
            hd.remove()
        model.train(was_training)
    cats.pop("none", None)
    report.by_category = dict(cats)
    report.by_module = {k: v for k, v in mods.items() if v}
    return report


def estimate_flops(model: nn.Module, input_size=(352, 352), convention: str = "toolbox") -> float:
    """GFLOPs (MAC-based) of one forward pass at ``input_size``."""
    return count_flops(model, input_size, convention).gflops


def format_profile(params: int, gflops: float, size: int) -> str:
    return f"params={params / 1e6:.2f}M flops={gflops:.2f}G @{size}"
