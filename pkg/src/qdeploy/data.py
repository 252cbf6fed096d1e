"""Datasets, preprocessing statistics and the input-dependent baseline operators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import PreprocParams
from .errors import DataFormatError, InvalidInputError

CIFAR_SHAPE = (32, 32, 3)
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # uint8 [N, H, W, C]
    labels: np.ndarray  # int64 [N]
    split: str = "train"
    classes: int = CIFAR_CLASSES

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise InvalidInputError("images must be a uint8 [N, H, W, C] array")
        if len(self.images) != len(self.labels):
            raise InvalidInputError("image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InvalidInputError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int, split: str | None = None) -> "ImageDataset":
        return ImageDataset(self.images[:n], self.labels[:n], split or self.split, self.classes)


@dataclass(frozen=True)
class PreprocStats:
    mean: np.ndarray  # per channel
    std: np.ndarray  # per channel, population
    mean_image: np.ndarray  # [H, W, C]

    def params(self) -> PreprocParams:
        """Per-channel integer mean and one power-of-2 scale for the whole tensor."""
        mu = np.clip(np.floor(self.mean + 0.5), 0, 255).astype(np.int64)
        return PreprocParams(mu, sigma_shift_for(self.std))

    def mean_image_params(self) -> PreprocParams:
        mu = np.clip(np.floor(self.mean_image + 0.5), 0, 255).astype(np.int64)
        return PreprocParams(mu, sigma_shift_for(self.std))


def sigma_shift_for(std) -> int:
    """round(log2(std)) of the pooled per-channel std, floored at 0, capped at 7."""
    pooled = float(np.sqrt(np.mean(np.square(np.asarray(std, dtype=np.float64)))))
    if pooled <= 0:
        return 0
    return int(min(max(round(math.log2(pooled)), 0), 7))


def _parse_cifar_bytes(raw: bytes, source: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise DataFormatError(
            f"{source}: truncated record at byte offset {offset} "
            f"({len(raw) - offset} of {CIFAR_RECORD} bytes)",
            offset=offset,
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        offset = int(bad[0]) * CIFAR_RECORD
        raise DataFormatError(
            f"{source}: label {labels[bad[0]]} at byte offset {offset} outside 0-9", offset=offset
        )
    # records store planes R, G, B each 32x32 row-major
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10(path, split: str | None = None) -> ImageDataset:
    """Read CIFAR-10 binary records from a file or from the standard batch directory."""
    path = Path(path)
    if path.is_dir():
        split = split or "train"
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise DataFormatError(f"missing CIFAR-10 files: {', '.join(missing)}")
    else:
        files = [path]
        split = split or "train"
    images, labels = [], []
    for f in files:
        im, lb = _parse_cifar_bytes(f.read_bytes(), str(f))
        images.append(im)
        labels.append(lb)
    images = np.concatenate(images) if images else np.zeros((0,) + CIFAR_SHAPE, np.uint8)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    if len(labels) == 0:
        warnings.warn(f"{path}: dataset is empty", stacklevel=2)
    return ImageDataset(images, labels, split)


def write_cifar10(ds: ImageDataset, path) -> None:
    if ds.images.shape[1:] != CIFAR_SHAPE:
        raise InvalidInputError(f"CIFAR records hold {CIFAR_SHAPE} images")
    planes = ds.images.transpose(0, 3, 1, 2).reshape(len(ds), -1)
    records = np.concatenate([ds.labels.astype(np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(records.tobytes())


def compute_preproc_stats(train: ImageDataset) -> PreprocStats:
    if len(train) == 0:
        raise InvalidInputError("cannot compute statistics of an empty dataset")
    x = train.images.astype(np.float64)
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    return PreprocStats(mean, std, x.mean(axis=0))


def per_image_standardization(image) -> np.ndarray:
    """(x - mean) / max(std, 1/sqrt(n)) per image, over all pixels and channels."""
    x = np.asarray(image, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    axes = tuple(range(1, x.ndim))
    n = int(np.prod(x.shape[1:]))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    out = (x - mean) / np.maximum(std, 1.0 / math.sqrt(n))
    return out if batched else out[0]


def mean_image_subtract(image, stats: PreprocStats) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.shape[-3:] != stats.mean_image.shape:
        raise InvalidInputError(
            f"image shape {x.shape[-3:]} does not match mean image {stats.mean_image.shape}"
        )
    return x - stats.mean_image


def stored_bytes(preproc: str, stats: PreprocStats) -> int:
    """Bytes of parameters a preprocessing operator keeps in the deployed model."""
    if preproc == "batch_norm_like":
        return stats.mean.shape[0] + 1  # uint8 mean per channel + one int8 shift
    if preproc == "mean_image":
        return stats.mean_image.size * 4  # float32 per pixel
    if preproc == "per_image_standardization":
        return 0
    raise InvalidInputError(f"unknown preprocessing {preproc!r}")


@dataclass(frozen=True)
class SynthSpec:
    n: int = 256
    height: int = 8
    width: int = 8
    channels: int = 3
    classes: int = 2
    noise: float = 30.0
    separation: float = 60.0
    template_seed: int = 0


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> ImageDataset:
    """Labelled Gaussian-blob images: a smooth per-class template plus pixel noise."""
    rng = np.random.default_rng(seed)
    shape = (spec.height, spec.width, spec.channels)
    # templates come from their own seed so train and test splits share them
    trng = np.random.default_rng(spec.template_seed)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    templates = np.empty((spec.classes,) + shape)
    for c in range(spec.classes):
        cy, cx = trng.uniform(0, spec.height), trng.uniform(0, spec.width)
        sigma = trng.uniform(1.0, max(spec.height, spec.width) / 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        colour = trng.uniform(-1, 1, spec.channels)
        templates[c] = 128 + spec.separation * blob[..., None] * colour
    labels = rng.integers(0, spec.classes, spec.n) if spec.n else np.zeros(0, np.int64)
    noise = rng.normal(0, spec.noise, (spec.n,) + shape)
    images = np.clip(np.floor(templates[labels] + noise + 0.5), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels.astype(np.int64), split, spec.classes)


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool = True,
            crop_pad: int = 0) -> np.ndarray:
    """Random horizontal flip and pad-then-random-crop back to the original size."""
    out = images.copy()
    n, h, w, _ = out.shape
    if flip:
        sel = rng.random(n) < 0.5
        out[sel] = out[sel, :, ::-1]
    if crop_pad:
        p = crop_pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")
        offs = rng.integers(0, 2 * p + 1, (n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, dy : dy + h, dx : dx + w]
    return out
