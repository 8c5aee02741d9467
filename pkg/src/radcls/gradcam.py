"""Gradient-weighted class activation maps over a chosen feature layer."""

from __future__ import annotations

import numpy as np
import torch

from .imaging import _resample_bilinear
from .network import CbamResNet, default_cam_layer, layer_paths


class ExplainError(ValueError):
    """The explanation request names an unknown layer or class."""


def _raw_cam(model: torch.nn.Module, x: torch.Tensor, target_class: int,
             layer_path: str | None) -> tuple[np.ndarray, str]:
    """Rectified gradient-weighted activation sum, unnormalized."""
    if layer_path is None:
        if isinstance(model, CbamResNet):
            layer_path = default_cam_layer(model)
        else:
            raise ExplainError("layer_path is required for this model")
    modules = dict(model.named_modules())
    if layer_path not in modules:
        known = ", ".join(layer_paths(model) if isinstance(model, CbamResNet)
                          else sorted(k for k in modules if k))
        raise ExplainError(f"unknown layer '{layer_path}' (known layers: {known})")
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one input of shape (1, C, H, W), got {tuple(x.shape)}")
    # a leaf input keeps the captured layer differentiable even when no
    # parameters sit between the input and the hooked layer
    x = x.detach().requires_grad_(True)

    captured: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        captured.append(output)

    handle = modules[layer_path].register_forward_hook(hook)
    try:
        model.eval()
        with torch.enable_grad():
            logits = model(x)
    finally:
        handle.remove()
    if not captured:
        raise ExplainError(f"layer '{layer_path}' produced no output")
    if logits.ndim != 2 or not 0 <= target_class < logits.shape[1]:
        raise ExplainError(
            f"target_class {target_class} out of range for {logits.shape[1]} classes")
    feat = captured[-1]
    if feat.ndim != 4:
        raise ExplainError(
            f"layer '{layer_path}' output is not a feature map stack: "
            f"shape {tuple(feat.shape)}")
    grads = torch.autograd.grad(logits[0, target_class], feat)[0]
    alpha = grads.mean(dim=(2, 3))
    cam = torch.relu((alpha[:, :, None, None] * feat).sum(dim=1))
    return cam[0].detach().cpu().numpy().astype(np.float64), layer_path


def _finish(heat: np.ndarray, x: torch.Tensor,
            out_size: tuple[int, int] | None) -> np.ndarray:
    if out_size is None:
        out_size = (int(x.shape[3]), int(x.shape[2]))
    if heat.shape != (out_size[1], out_size[0]):
        heat = np.maximum(_resample_bilinear(heat, out_size[0], out_size[1]), 0.0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat


def grad_cam(model: torch.nn.Module, x: torch.Tensor, target_class: int,
             layer_path: str | None = None,
             out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Heatmap of evidence for ``target_class`` in a single input.

    The chosen layer's feature maps are weighted by the spatial mean of the
    target logit's gradient, summed, rectified, upsampled to ``out_size =
    (width, height)`` (the input's own size by default), and scaled so the
    maximum is 1 (an all-zero map stays all zero).  ``x`` is one normalized
    input of shape (1, 1, H, W).  Without ``layer_path`` the last stage's
    output is used.
    """
    heat, _ = _raw_cam(model, x, target_class, layer_path)
    return _finish(heat, x, out_size)


def explain_image(model: torch.nn.Module, x: torch.Tensor, target_class: int,
                  layer_path: str | None = None,
                  out_size: tuple[int, int] | None = None) -> tuple[np.ndarray, dict]:
    """grad_cam plus a summary dict for sidecar metadata files."""
    heat, resolved = _raw_cam(model, x, target_class, layer_path)
    info = {
        "target_class": int(target_class),
        "layer_path": resolved,
        "max_activation": float(heat.max()),
    }
    return _finish(heat, x, out_size), info


def overlay(heat: np.ndarray, gray: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] heatmap over a grayscale image; returns RGB uint8."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if heat.shape != gray.shape:
        raise ValueError(f"heatmap shape {heat.shape} != image shape {gray.shape}")
    from matplotlib import colormaps

    colored = colormaps["inferno"](np.clip(heat, 0.0, 1.0))[:, :, :3]
    base = np.repeat(np.asarray(gray, dtype=np.float64)[:, :, None] / 255.0, 3, axis=2)
    blend = alpha * colored + (1.0 - alpha) * base
    return np.clip(np.rint(blend * 255.0), 0, 255).astype(np.uint8)
