"""Grad-CAM and channel-mean heatmaps of decoder features."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError

# named decoder tensors, resolved from DecoderState rather than module hooks
STATE_LAYERS = ("pff.y1", "pff.y2", "pff.y3", "pff.y4", "aggregated", "selected")
DEFAULT_LAYERS = ("pff.y1", "pff.y2", "pff.y3", "pff.y4", "decoder.fsm")


def normalize(x: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not np.isfinite(hi - lo) or hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def mean_activation_map(feature, out_size=None) -> np.ndarray:
    """Per-location channel mean of a (C, h, w) map, min-max normalised and
    optionally bilinearly resized to ``out_size``."""
    f = feature.detach().cpu().double().numpy() if torch.is_tensor(feature) else np.asarray(feature, float)
    if f.ndim != 3 or f.shape[0] < 1:
        raise DimensionError(f"expected a (C, h, w) feature map, got shape {f.shape}")
    m = normalize(f.mean(axis=0))
    if out_size is not None and tuple(out_size) != m.shape:
        t = torch.from_numpy(m)[None, None]
        m = F.interpolate(t, size=tuple(out_size), mode="bilinear", align_corners=False)[0, 0].numpy()
    return m


def _state_tensor(state, name):
    if name.startswith("pff."):
        return state.fused[int(name[-1]) - 1]
    return getattr(state, name)


def _capture(model, image, layer):
    """Forward pass returning (logits, activation of ``layer``) with the
    activation kept in the autograd graph."""
    if layer in STATE_LAYERS:
        if layer.startswith("pff.") and not model.config.decoder.pff:
            raise ValueError(f"layer {layer!r} needs a head with progressive fusion")
        state = model.forward_state(image)
        act = _state_tensor(state, layer)
        if act is None:
            raise ValueError(f"layer {layer!r} is not produced by this decoder configuration")
        return state.logits, act
    modules = dict(model.named_modules())
    if layer not in modules:
        raise ValueError(f"unknown layer {layer!r}")
    box = {}
    handle = modules[layer].register_forward_hook(lambda m, i, o: box.__setitem__("act", o))
    try:
        logits = model(image)
    finally:
        handle.remove()
    if "act" not in box:
        raise ValueError(f"layer {layer!r} was not executed in the forward pass")
    return logits, box["act"]


def grad_cam(model, image: torch.Tensor, target_layer: str = "pff.y1", region=None) -> np.ndarray:
    """Grad-CAM heatmap (H, W) in [0, 1] for one (3, H, W) or (1, 3, H, W) image.

    The explained signal is the sum of foreground logits over all pixels, or
    over ``region`` (a binary (H, W) mask) when given.
    """
    x = image if image.ndim == 4 else image[None]
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits, act = _capture(model, x, target_layer)
            if not torch.is_tensor(act) or act.ndim != 4:
                shape = tuple(act.shape) if torch.is_tensor(act) else type(act).__name__
                raise ValueError(f"layer {target_layer!r} is not a spatial feature map: {shape}")
            fg = logits[:, 0]
            if region is not None:
                fg = fg * torch.as_tensor(region, dtype=fg.dtype)
            grads, = torch.autograd.grad(fg.sum(), act, allow_unused=True)
    finally:
        model.train(was_training)
    if grads is None:
        grads = torch.zeros_like(act)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return normalize(cam[0, 0].double().numpy())


def layer_activation(model, image: torch.Tensor, layer: str) -> torch.Tensor:
    x = image if image.ndim == 4 else image[None]
    with torch.no_grad():
        _, act = _capture(model.eval(), x, layer)
    return act[0]


def save_heatmap(heatmap: np.ndarray, path, colormap: str | None = None) -> Path:
    """Write a [0, 1] heatmap as PNG: 8-bit grayscale, or RGB through a
    matplotlib colormap."""
    from PIL import Image

    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    if colormap:
        from matplotlib import colormaps

        rgb = colormaps[colormap](h)[..., :3]
        img = Image.fromarray((rgb * 255).round().astype(np.uint8), "RGB")
    else:
        img = Image.fromarray((h * 255).round().astype(np.uint8), "L")
    path = Path(path)
    img.save(path)
    return path
