"""Grad-CAM heatmaps from the last residual block and PNG overlays."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import resize
from .errors import UsageError
from .tensor import Tensor, backward


@dataclass
class Heatmap:
    values: np.ndarray  # upsampled, normalized to [0, 1]
    raw: np.ndarray  # ReLU(sum_k alpha_k A_k) at feature resolution, before normalization
    source_shape: tuple[int, int]
    upsampled_shape: tuple[int, int]
    target_class: int


def cam_from_activations(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial mean of ``dscore/dA_k``.

    ``acts`` and ``grads`` are ``[K, h, w]``.
    """
    alpha = grads.mean(axis=(1, 2), dtype=np.float64)
    cam = np.tensordot(alpha, acts.astype(np.float64), axes=(0, 0))
    return np.maximum(cam, 0.0)


def normalize_map(cam: np.ndarray) -> np.ndarray:
    peak = cam.max() if cam.size else 0.0
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam(model, image, target_class: int) -> Heatmap:
    """Heatmap for ``target_class`` on one normalized ``[3, H, W]`` image.

    The score is the raw target logit; feature maps are the output of the
    model's last residual block.
    """
    x = np.asarray(getattr(image, "data", image), dtype=np.float32)
    if x.ndim != 3:
        raise UsageError(f"grad_cam expects a single [3, H, W] image, got {x.shape}")
    if not 0 <= target_class < model.out_nodes:
        raise UsageError(f"target class {target_class} outside [0, {model.out_nodes})")
    for p in model.parameters().values():
        p.zero_grad()
    logits, feats = model.forward(Tensor(x[None]), "eval", None, return_features=True)
    feats.retain_grad()
    backward(logits[0, target_class])
    for p in model.parameters().values():
        p.zero_grad()
    raw = cam_from_activations(feats.data[0], feats.grad[0])
    # normalize after upsampling so the peak is exactly 1
    up = normalize_map(np.maximum(resize(raw[None], x.shape[1:])[0], 0.0))
    return Heatmap(up.astype(np.float32), raw, raw.shape, up.shape, target_class)


def jet(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear jet colormap, ``[H, W]`` in [0, 1] -> ``[H, W, 3]`` in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    centres = np.array([0.75, 0.5, 0.25])  # r, g, b peaks
    return np.clip(1.5 - np.abs(4.0 * (v - centres)), 0.0, 1.0)


def blend(heatmap: np.ndarray, image: np.ndarray) -> np.ndarray:
    """uint8 ``[H, W, 3]`` overlay; per-pixel alpha is ``0.5 * heat``.

    ``image`` is ``[3, H, W]`` floats in [0, 1] or ``[H, W, 3]`` uint8.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    h = np.asarray(heatmap, dtype=np.float64)
    if h.shape != img.shape[:2]:
        raise UsageError(f"heatmap {h.shape} must match image {img.shape[:2]}")
    alpha = 0.5 * h[..., None]
    out = (1.0 - alpha) * img + alpha * (jet(h) * 255.0)
    return np.round(out).astype(np.uint8)


def overlay_filename(source_id: str, true_label, pred_label) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]+", "_", Path(source_id).with_suffix("").as_posix())
    return f"{stem}_{true_label}_{pred_label}.png"


def overlay(heatmap, image, out) -> np.ndarray:
    """Write the heatmap/image blend as a PNG at ``out`` and return the blended buffer."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    buf = blend(values, image)
    Image.fromarray(buf, mode="RGB").save(out)
    return buf
