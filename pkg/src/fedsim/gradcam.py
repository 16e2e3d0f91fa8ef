"""Saliency maps over the fine-patch grid via class-discriminative gradients.

The attribution layer is an encoder block output on the fine-patch branch
(default: the last one). For a target class score S, per-location weights

    alpha_k(i,j) = g_k(i,j)^2 / (2 g_k(i,j)^2 + (sum_ab A_k(a,b)) g_k(i,j)^3)

combine with ReLU(g) into channel weights w_k = sum_ij alpha_k relu(g_k),
and the map is ReLU(sum_k w_k A_k), max-normalized to [0, 1]. The higher
order terms use element powers of the first gradient, which is exact when
the score behaves like an exponential of the activations and is the usual
closed form. Locations where the denominator or gradient vanishes get
alpha = 0 instead of a division by zero.

That closed form is derived for non-negative (post-ReLU) activation maps.
Encoder block outputs are signed layer-normed features whose per-channel
sign is arbitrary, so A_k here is the activation magnitude |h_k|: it keeps
the non-negativity the weighting assumes while preserving where a channel
is active. Signed features in the same formula smear the map badly enough
to break localization on data with a known discriminative region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import DualScaleTransformer
from .tensor import Tape, Tensor, backward, slice_axis, tsum

OVERLAY_BLEND = 0.5


@dataclass
class SaliencyMap:
    grid: np.ndarray          # (g, g) in [0, 1]
    target_class: int
    layer: int
    upsampled: np.ndarray     # (H, W) nearest-neighbor expansion
    all_zero: bool


def gradcam_pp(model: DualScaleTransformer, image: Tensor, target_class: int,
               layer: int = -1) -> SaliencyMap:
    """Saliency for one normalized (C, H, W) image and a class index."""
    c = model.config
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {image.shape}")
    if not 0 <= target_class < c.num_classes:
        raise ConfigError(
            f"target class {target_class} out of range [0, {c.num_classes})")
    if c.depth == 0:
        raise ConfigError("saliency needs at least one encoder block")
    resolved = layer if layer >= 0 else c.depth + layer
    if not 0 <= resolved < c.depth:
        raise ConfigError(f"layer {layer} out of range for depth {c.depth}")

    batch = Tensor(image.data[None], requires_grad=True)
    capture: dict = {}
    with Tape() as tape:
        logits = model.forward(batch, capture=capture)
        score = tsum(slice_axis(slice_axis(logits, 0, 0, 1), 1,
                                target_class, target_class + 1))
        backward(score, tape)

    acts = capture["small_blocks"][resolved]
    g = c.grid_small
    feat = acts.data[0, 2:, :].reshape(g, g, -1)          # CT/DT rows excluded
    grad = acts.grad[0, 2:, :].reshape(g, g, -1)

    grid = saliency_grid(feat, grad)
    peak = grid.max()
    all_zero = peak == 0.0
    if not all_zero:
        grid = grid / peak
    return SaliencyMap(grid, target_class, resolved,
                       _upsample(grid, c.patch_small), all_zero)


def saliency_grid(feat: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Unnormalized map ReLU(sum_k w_k A_k) from (g, g, K) features/gradients."""
    if feat.shape != grad.shape or feat.ndim != 3:
        raise ShapeError(f"features {feat.shape} and gradients {grad.shape} "
                         f"must both be (g, g, K)")
    if not np.any(grad):
        return np.zeros(feat.shape[:2])
    amap = np.abs(feat)                  # A_k >= 0, as the closed form assumes
    g2 = grad * grad
    g3 = g2 * grad
    channel_sum = amap.sum(axis=(0, 1))                    # sum_ab A_k
    denom = 2.0 * g2 + channel_sum[None, None, :] * g3
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    alpha[grad == 0] = 0.0
    weights = (alpha * np.maximum(grad, 0.0)).sum(axis=(0, 1))   # w_k
    return np.maximum((amap * weights[None, None, :]).sum(axis=2), 0.0)


def _upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def colormap(values: np.ndarray) -> np.ndarray:
    """Blue (cool, 0) to red (warm, 1): (..., 3) float RGB in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, 0.2 * np.ones_like(v), 1.0 - v], axis=-1)


def export_overlay(smap: SaliencyMap, image: Tensor, path: str) -> None:
    """Blend the colormapped saliency over the raw [0, 1] image, write a PNG."""
    from PIL import Image

    img = image.data
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    if smap.upsampled.shape != (h, w):
        raise ShapeError(f"saliency {smap.upsampled.shape} does not cover "
                         f"image ({h}, {w})")
    rgb = img if img.shape[0] == 3 else np.repeat(img[:1], 3, axis=0)
    base = np.clip(rgb, 0.0, 1.0).transpose(1, 2, 0)
    heat = colormap(smap.upsampled)
    blended = (1.0 - OVERLAY_BLEND) * base + OVERLAY_BLEND * heat
    pixels = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay '{path}': {exc}") from exc
