"""Fundus image normalization chain and training-time augmentation.

Deterministic chain: crop black top/bottom rows, pad to a centred square
with black, bilinear resize. Augmentation (flip, contrast, saturation,
hue) draws every random number from an explicitly seeded generator.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .errors import DegenerateImageError, StageError

RAW, CROPPED, PADDED, RESIZED = "raw", "cropped", "padded", "resized"
STAGES = (RAW, CROPPED, PADDED, RESIZED)

MODEL_SIDE = 518
BLACK_THRESHOLD = 10.0
CHAIN_VERSION = "crop-pad-resize/1"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Rec. 601 luma, used for contrast and saturation blending
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray  # H x W x 3, intensities in [0, 255]
    stage: str = RAW

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image has no pixels")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage in (PADDED, RESIZED) and px.shape[0] != px.shape[1]:
            raise StageError(f"{self.stage} image must be square, got {px.shape[:2]}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _require(img: ImageTensor, stage: str, op: str):
    if img.stage != stage:
        raise StageError(f"{op} expects a {stage} image, got stage {img.stage!r}")


def load_image(path) -> ImageTensor:
    """Read a PNG or JPEG file as a raw RGB float64 image."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImageTensor(arr, RAW)


def crop_black_rows(img: ImageTensor, black_threshold: float = BLACK_THRESHOLD) -> ImageTensor:
    """Drop the top and bottom bands of rows whose pixels are all darker
    than ``black_threshold`` (maximum over channels). Interior rows are
    never touched. Idempotent."""
    if img.stage not in (RAW, CROPPED):
        raise StageError(f"crop_black_rows expects a raw image, got stage {img.stage!r}")
    top, bottom = kernels.black_row_bounds(img.pixels, float(black_threshold))
    if bottom <= top:
        raise DegenerateImageError("image is entirely black")
    return ImageTensor(img.pixels[top:bottom].copy(), CROPPED)


def pad_to_square(img: ImageTensor) -> ImageTensor:
    _require(img, CROPPED, "pad_to_square")
    h, w = img.height, img.width
    side = max(h, w)
    out = np.zeros((side, side, 3), dtype=img.pixels.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top : top + h, left : left + w] = img.pixels
    return ImageTensor(out, PADDED)


def resize_bilinear(img: ImageTensor, side: int = MODEL_SIDE) -> ImageTensor:
    """Bilinear resize with half-pixel centres (corner alignment off)."""
    _require(img, PADDED, "resize_bilinear")
    if int(side) <= 0:
        raise ValueError(f"side must be positive, got {side}")
    side = int(side)
    if img.height == side:
        return ImageTensor(np.array(img.pixels, dtype=np.float64), RESIZED)
    return ImageTensor(kernels.resize_bilinear(img.pixels, side, side), RESIZED)


def preprocess(img: ImageTensor, side: int = MODEL_SIDE, black_threshold: float = BLACK_THRESHOLD) -> ImageTensor:
    """Full deterministic chain: crop -> pad -> resize."""
    return resize_bilinear(pad_to_square(crop_black_rows(img, black_threshold)), side)


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    contrast_jitter: float = 0.2
    saturation_jitter: float = 0.2
    hue_jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must lie in [0, 1]")
        for name in ("contrast_jitter", "saturation_jitter", "hue_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.hue_jitter > 0.5:
            raise ValueError("hue_jitter must not exceed half a turn")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, seed)


def augment(img: ImageTensor, cfg: AugmentConfig, draw_seed: int) -> ImageTensor:
    """Flip, contrast, saturation and hue jitter, in that order.

    Four draws are always taken from the generator so that changing one
    amplitude does not shift the others.
    """
    _require(img, RESIZED, "augment")
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, int(draw_seed) & 0xFFFFFFFF])
    flip = rng.random() < cfg.horizontal_flip_prob
    contrast = 1.0 + rng.uniform(-1.0, 1.0) * cfg.contrast_jitter
    saturation = 1.0 + rng.uniform(-1.0, 1.0) * cfg.saturation_jitter
    hue = rng.uniform(-1.0, 1.0) * cfg.hue_jitter

    px = img.pixels
    if flip:
        px = px[:, ::-1]
    px = np.array(px, dtype=np.float64)
    if contrast != 1.0:
        mean = float((px @ _LUMA).mean())
        px = np.clip(contrast * px + (1.0 - contrast) * mean, 0.0, 255.0)
    if saturation != 1.0:
        gray = (px @ _LUMA)[..., None]
        px = np.clip(saturation * px + (1.0 - saturation) * gray, 0.0, 255.0)
    if hue != 0.0:
        px = np.clip(kernels.hue_shift(px, hue), 0.0, 255.0)
    return ImageTensor(px, RESIZED)


def to_model_input(
    img: ImageTensor, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD
) -> np.ndarray:
    """Scale to [0, 1] and standardize per channel. Returns a float32
    ``3 x H x W`` array."""
    _require(img, RESIZED, "to_model_input")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    x = (img.pixels / 255.0 - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def from_model_input(x, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> ImageTensor:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    px = (np.asarray(x, dtype=np.float64).transpose(1, 2, 0) * std + mean) * 255.0
    return ImageTensor(px, RESIZED)


def chain_hash(side: int = MODEL_SIDE, black_threshold: float = BLACK_THRESHOLD) -> str:
    key = f"{CHAIN_VERSION}|side={int(side)}|black={float(black_threshold)!r}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


class PreprocessCache:
    """On-disk cache of preprocessed images keyed by sample id and chain hash.

    Arrays are stored as float32 ``.npy`` files. With ``root=None`` the
    ``DRSTAGE_CACHE`` environment variable is consulted; when that is unset
    only an in-process memo is used.
    """

    def __init__(self, root=None, side: int = MODEL_SIDE, black_threshold: float = BLACK_THRESHOLD):
        if root is None:
            root = os.environ.get("DRSTAGE_CACHE") or None
        self.root = Path(root) if root is not None else None
        self.side = int(side)
        self.black_threshold = float(black_threshold)
        self.version = chain_hash(self.side, self.black_threshold)
        self._memo: dict[str, np.ndarray] = {}

    def _path(self, sample_id: str, image_path: str) -> Optional[Path]:
        if self.root is None:
            return None
        digest = hashlib.sha256(f"{sample_id}|{image_path}".encode()).hexdigest()[:24]
        return self.root / self.version / f"{digest}.npy"

    def get(self, sample_id: str, image_path) -> ImageTensor:
        image_path = str(image_path)
        key = f"{sample_id}|{image_path}"
        arr = self._memo.get(key)
        if arr is None:
            path = self._path(sample_id, image_path)
            if path is not None and path.is_file():
                arr = np.load(path)
            else:
                out = preprocess(load_image(image_path), self.side, self.black_threshold)
                arr = out.pixels.astype(np.float32)
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_name(path.name + ".tmp.npy")
                    np.save(tmp, arr)
                    os.replace(tmp, path)
            self._memo[key] = arr
        return ImageTensor(arr.astype(np.float64), RESIZED)
