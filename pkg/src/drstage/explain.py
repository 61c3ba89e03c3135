"""Attention-rollout heatmaps for a regression transformer.

``grad_rollout`` weights each block's attention by the gradient of the
scalar score, reduces heads by their maximum, zeroes the weakest entries,
mixes in the identity (residual path) and accumulates from the first block
to the last, renormalizing rows after every step. ``plain_rollout`` is the
gradient-free baseline with head averaging.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import GeometryError
from .preprocess import MODEL_SIDE, RESIZED, ImageTensor
from .trace import AttentionTrace

__all__ = [
    "AttentionTrace",
    "Heatmap",
    "cls_patch_weights",
    "drop_lowest",
    "grad_rollout",
    "overlay",
    "plain_rollout",
    "rollout_matrix",
]


@dataclass(frozen=True)
class Heatmap:
    patch_grid: np.ndarray  # raw CLS weights on the patch grid, before upsampling
    values: np.ndarray  # upsampled and min-max normalized to [0, 1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


def reduce_heads(mat: np.ndarray, how: str) -> np.ndarray:
    if how == "max":
        return mat.max(axis=0)
    if how == "mean":
        return mat.mean(axis=0)
    raise ValueError(f"unknown head reduction {how!r}")


def drop_lowest(mat: np.ndarray, fraction: float) -> np.ndarray:
    """Zero the ``floor(fraction * mat.size)`` smallest entries.

    Ties are broken by first occurrence in row-major order.
    """
    k = int(math.floor(fraction * mat.size))
    if k <= 0:
        return mat
    out = mat.copy()
    order = np.argsort(out, axis=None, kind="stable")
    out.flat[order[:k]] = 0.0
    return out


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """Divide every row by its L1 norm; all-zero rows stay zero."""
    norms = np.abs(mat).sum(axis=1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def rollout_matrix(
    trace: AttentionTrace,
    drop_fraction: float = 0.10,
    head_reduction: str = "max",
    use_gradients: bool = True,
    weight_first_block: bool = False,
) -> np.ndarray:
    """Accumulated ``s x s`` attribution matrix after the last block.

    The first block seeds the accumulator with its head-reduced attention
    (gradient-weighted only when ``weight_first_block``), without dropping.
    """
    if trace.depth == 0:
        raise ValueError("empty attention trace")
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    s = trace.tokens
    eye = np.eye(s)

    first = trace.attentions[0]
    if use_gradients and weight_first_block:
        first = first * trace.gradients[0]
    acc = normalize_rows(reduce_heads(first, head_reduction))

    for att, grad in zip(trace.attentions[1:], trace.gradients[1:]):
        weighted = att * grad if use_gradients else att
        update = 0.5 * (drop_lowest(reduce_heads(weighted, head_reduction), drop_fraction) + eye)
        acc = normalize_rows(update @ acc)
    return acc


def cls_patch_weights(acc: np.ndarray) -> np.ndarray:
    """Average the classification token's row and column, drop its
    self-entry, and reshape the patch weights to a square grid."""
    s = acc.shape[0]
    side = math.isqrt(s - 1)
    if side * side != s - 1:
        raise GeometryError(f"{s - 1} patch tokens do not form a square grid")
    both = 0.5 * (acc[0, :] + acc[:, 0])
    return both[1:].reshape(side, side)


def upsample(grid: np.ndarray, side: int = MODEL_SIDE) -> np.ndarray:
    up = kernels.resize_bilinear(grid[:, :, None], side, side)[:, :, 0]
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def _heatmap(acc, side):
    grid = cls_patch_weights(acc)
    return Heatmap(grid, upsample(grid, side))


def grad_rollout(
    trace: AttentionTrace,
    drop_fraction: float = 0.10,
    head_reduction: str = "max",
    weight_first_block: bool = False,
    side: int = MODEL_SIDE,
) -> Heatmap:
    acc = rollout_matrix(trace, drop_fraction, head_reduction, True, weight_first_block)
    return _heatmap(acc, side)


def plain_rollout(
    trace: AttentionTrace, head_reduction: str = "mean", side: int = MODEL_SIDE
) -> Heatmap:
    acc = rollout_matrix(trace, 0.0, head_reduction, use_gradients=False)
    return _heatmap(acc, side)


def _colormap(values: np.ndarray, name: str = "jet") -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[name](values)[..., :3] * 255.0


def overlay(heatmap: Heatmap, img: ImageTensor, alpha: float = 0.5, cmap: str = "jet") -> ImageTensor:
    """Alpha-blend the colour-mapped heatmap over a resized fundus image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if img.stage != RESIZED:
        raise ValueError(f"overlay expects a resized image, got stage {img.stage!r}")
    if img.pixels.shape[:2] != heatmap.values.shape:
        raise GeometryError(f"heatmap {heatmap.values.shape} and image {img.pixels.shape[:2]} differ in size")
    if alpha == 0.0:
        return ImageTensor(img.pixels.copy(), RESIZED)
    colored = _colormap(heatmap.values, cmap)
    if alpha == 1.0:
        return ImageTensor(colored, RESIZED)
    return ImageTensor((1.0 - alpha) * img.pixels + alpha * colored, RESIZED)


def _to_uint8(arr):
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def save_heatmap_png(heatmap: Heatmap, path) -> Path:
    path = Path(path)
    Image.fromarray(_to_uint8(heatmap.values * 255.0)).save(path)
    return path


def save_image_png(img: ImageTensor, path) -> Path:
    path = Path(path)
    Image.fromarray(_to_uint8(img.pixels)).save(path)
    return path


def save_patch_grid_csv(heatmap: Heatmap, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in heatmap.patch_grid:
            writer.writerow([repr(float(v)) for v in row])
    return path
