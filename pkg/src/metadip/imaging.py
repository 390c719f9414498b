"""Image helpers: validation, metrics, total variation, EMA, noise, and IO.

Images are plain ``H x W x C`` float arrays with ``C`` in ``{1, 3}`` and
values nominally in ``[0, 1]``. Measurements derived from images are allowed to
leave that range; only final reconstructions are clamped.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import DataError, DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
_IMAGE_SUFFIXES = {".png", ".bmp"}


def check_image(img, *, name: str = "image", copy: bool = False) -> np.ndarray:
    """Validate an image and return it as a float64 ``H x W x C`` array.

    A 2-D array is promoted to a single channel image.
    """
    arr = np.array(img, dtype=np.float64, copy=copy) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be H x W x C, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise DimensionError(f"{name} must have 1 or 3 channels, got {arr.shape[2]}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} has an empty spatial extent {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def clamp01(img) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(reference, estimate) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak images, capped at 100 dB."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    _same_shape(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def nmse(reference, estimate) -> float:
    """Normalized squared error ``||est - ref||^2 / ||ref||^2``."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    _same_shape(ref, est)
    denom = float(np.sum(ref**2))
    if denom == 0.0:
        raise DegenerateInputError("nmse is undefined for an all-zero reference")
    return float(np.sum((est - ref) ** 2) / denom)


def total_variation(img):
    """Anisotropic total variation of an ``H x W x C`` image.

    Works on numpy arrays and torch tensors alike, so the same definition is
    used for metrics and for the differentiable penalty in the fitting loss.
    """
    if img.ndim == 2:
        img = img[:, :, None]
    dv = img[1:, :, :] - img[:-1, :, :]
    dh = img[:, 1:, :] - img[:, :-1, :]
    return abs(dv).sum() + abs(dh).sum()


@dataclass
class EmaAccumulator:
    """Exponential moving average of a stream of equally shaped arrays.

    The first update copies its input; later updates blend with weight
    ``1 - decay`` on the newest value.
    """

    decay: float = 0.99
    average: np.ndarray | None = None
    count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {self.decay}")

    def update(self, new) -> "EmaAccumulator":
        new = np.asarray(new, dtype=np.float64)
        if self.count == 0 or self.average is None:
            self.average = new.copy()
        else:
            if new.shape != self.average.shape:
                raise DimensionError(f"EMA shape mismatch: {new.shape} vs {self.average.shape}")
            self.average = self.decay * self.average + (1.0 - self.decay) * new
        self.count += 1
        return self


def ema_update(acc: EmaAccumulator, new) -> EmaAccumulator:
    return acc.update(new)


def add_gaussian_noise(img, sigma_8bit: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise with std ``sigma_8bit / 255``; no clamping."""
    if sigma_8bit < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma_8bit}")
    arr = np.asarray(img, dtype=np.float64)
    if sigma_8bit == 0:
        return arr.copy()
    rng = np.random.default_rng(seed)
    return arr + rng.normal(0.0, sigma_8bit / 255.0, size=arr.shape)


# ---------------------------------------------------------------------------
# 8-bit IO


def to_uint8(img) -> np.ndarray:
    """Clamp to [0, 1] and round half up onto the 0..255 grid."""
    return np.floor(clamp01(img) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img) -> None:
    arr = to_uint8(check_image(img))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(Path(path), format="PNG")


def read_image(path, channels: int = 3) -> np.ndarray:
    mode = "RGB" if channels == 3 else "L"
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return check_image(arr)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} is smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top : top + size, left : left + size]


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class DatasetSource:
    root: str | Path
    crop: str = "center"  # "center" or "random-patch"
    patch_size: int = 128
    seed: int = 0
    patches_per_image: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.crop not in ("center", "random-patch"):
            raise ValueError(f"crop must be 'center' or 'random-patch', got {self.crop!r}")
        if self.patch_size < 1 or self.patches_per_image < 1:
            raise ValueError("patch_size and patches_per_image must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass
class ImageDataset(Sequence):
    """Named, ordered collection of equally sized images."""

    images: list[np.ndarray]
    names: list[str]
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.names):
            raise ValueError("images and names must have equal length")

    def __getitem__(self, idx):
        return self.images[idx]

    def __len__(self):
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        if not self.images:
            raise DataError("dataset is empty")
        return self.images[0].shape

    def split(self, val_fraction: float = 0.1) -> tuple["ImageDataset", "ImageDataset"]:
        """Deterministic train/validation split by hashing item names."""
        train, val = [], []
        for img, name in zip(self.images, self.names):
            bucket = int(hashlib.sha256(name.encode()).hexdigest()[:8], 16) % 1000
            (val if bucket < int(round(val_fraction * 1000)) else train).append((img, name))
        # tiny datasets still need both halves
        if not val and len(train) > 1:
            val.append(train.pop())
        if not train and len(val) > 1:
            train.append(val.pop(0))

        def build(pairs):
            return ImageDataset([p[0] for p in pairs], [p[1] for p in pairs], meta=dict(self.meta))

        return build(train), build(val)

    def as_array(self) -> np.ndarray:
        return np.stack(self.images)


def load_dataset(src: DatasetSource) -> ImageDataset:
    """Load every PNG/BMP under ``src.root`` (sorted), crop, and return them.

    Files that cannot be decoded, or are smaller than the crop, are skipped;
    the number skipped is recorded on the result and warned about once.
    """
    root = Path(src.root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    rng = np.random.default_rng(src.seed)
    images, names, skipped = [], [], 0
    for path in files:
        try:
            img = read_image(path, src.channels)
        except (UnidentifiedImageError, OSError, ValueError):
            skipped += 1
            continue
        h, w = img.shape[:2]
        if h < src.patch_size or w < src.patch_size:
            skipped += 1
            continue
        if src.crop == "center":
            images.append(center_crop(img, src.patch_size))
            names.append(path.name)
        else:
            for k in range(src.patches_per_image):
                top = int(rng.integers(0, h - src.patch_size + 1))
                left = int(rng.integers(0, w - src.patch_size + 1))
                images.append(img[top : top + src.patch_size, left : left + src.patch_size].copy())
                names.append(f"{path.name}#{k}")
    if skipped:
        warnings.warn(f"skipped {skipped} undecodable or undersized file(s) in {root}", stacklevel=2)
    if not images:
        raise DataError(f"no decodable images of size >= {src.patch_size} in {root}")
    return ImageDataset(images, names, skipped=skipped, meta={"root": str(root), "crop": src.crop})
