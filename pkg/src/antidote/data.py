"""CIFAR-10 binary loading, a synthetic shapes dataset, and flip/pad-crop augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, make_rng

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
RECORD_BYTES = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, standardized
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    crop_padding: int = 4
    enabled: bool = True

    def __post_init__(self):
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")


def standardize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=DTYPE).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=DTYPE).reshape(1, -1, 1, 1)
    return ((images - m) / s).astype(DTYPE)


def decode_cifar10_records(raw: bytes) -> tuple:
    """Labels and [0, 1]-scaled CHW images from raw CIFAR-10 binary records."""
    if len(raw) % RECORD_BYTES:
        raise DataFormatError(f"truncated record: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / DTYPE(255.0)
    return labels, images


def load_cifar10_binary(path, max_per_class: Optional[int] = None,
                        mean=CIFAR10_MEAN, std=CIFAR10_STD, split: str = "train") -> Dataset:
    """Load one or more CIFAR-10 ``.bin`` files (a file or a directory of them).

    Records keep file order; ``max_per_class`` keeps the first that many of
    each class.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin files under {path}")
    labels, images = zip(*(decode_cifar10_records(f.read_bytes()) for f in files))
    labels, images = np.concatenate(labels), np.concatenate(images)
    if max_per_class is not None:
        keep = np.zeros(len(labels), dtype=bool)
        for c in range(10):
            keep[np.flatnonzero(labels == c)[:max_per_class]] = True
        labels, images = labels[keep], images[keep]
    return Dataset(standardize(images, mean, std), labels, 10, split)


def load_cifar10_split(root, n_train: int = 2000, n_test: int = 1000) -> tuple:
    """Desk-scale train/test split from an extracted ``cifar-10-batches-bin`` directory."""
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*.bin"))
    if not train_files or not (root / "test_batch.bin").is_file():
        raise FileNotFoundError(f"{root} does not look like cifar-10-batches-bin")
    train = load_cifar10_binary(train_files[0], max_per_class=n_train // 10)
    test = load_cifar10_binary(root / "test_batch.bin", max_per_class=n_test // 10, split="test")
    return train, test


# -- synthetic shapes ---------------------------------------------------------

# Fixed per-channel statistics of the generator's raw [0, 1] output (measured
# over 3000 draws), so every split shares one normalization.
SYNTH_MEAN = 0.306
SYNTH_STD = 0.279

SHAPE_CLASSES = ("hstripes", "vstripes", "dstripes", "square", "disc",
                 "ring", "plus", "cross", "checker", "triangle")


def _draw(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary (size x size) pattern of one class with random placement and scale."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.22, 0.36) * size
    period = rng.uniform(4.0, 7.0)
    phase = rng.uniform(0, period)
    inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    dist = np.hypot(yy - cy, xx - cx)
    thick = rng.uniform(0.12, 0.2) * size / 2
    if kind == "hstripes":
        return inside & (((yy + phase) % period) < period / 2)
    if kind == "vstripes":
        return inside & (((xx + phase) % period) < period / 2)
    if kind == "dstripes":
        d = xx + yy if rng.random() < 0.5 else xx - yy
        return inside & (((d + phase) % period) < period / 2)
    if kind == "square":
        return inside
    if kind == "disc":
        return dist <= r
    if kind == "ring":
        return (dist <= r) & (dist >= r - thick * 1.2)
    if kind == "plus":
        return inside & ((np.abs(yy - cy) <= thick) | (np.abs(xx - cx) <= thick))
    if kind == "cross":
        return inside & ((np.abs((yy - cy) - (xx - cx)) <= thick * 1.4)
                         | (np.abs((yy - cy) + (xx - cx)) <= thick * 1.4))
    if kind == "checker":
        cell = period / 1.4
        return inside & ((((yy + phase) // cell) + ((xx + phase) // cell)) % 2 == 0)
    if kind == "triangle":
        top = cy - r
        half = (yy - top) / 2.0 * 1.1
        return (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= half)
    raise ValueError(kind)


def synth_shapes(n: int, classes: int = 10, seed: int = 0, size: int = 32,
                 channels: int = 3, noise: float = 0.15, split: str = "train") -> Dataset:
    """Balanced, seeded dataset of colored geometric patterns on noisy backgrounds.

    Class ``i`` is pattern ``SHAPE_CLASSES[i]``; labels cycle through the
    classes before being shuffled, so counts differ by at most one.
    """
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_CLASSES)}]")
    rng = make_rng(seed, 0x5A)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, channels, size, size), dtype=DTYPE)
    for i, y in enumerate(labels):
        shape = _draw(SHAPE_CLASSES[y], size, rng)
        fg = rng.uniform(0.55, 1.0, channels)
        bg = rng.uniform(0.0, 0.35, channels)
        img = np.where(shape[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(standardize(images, [SYNTH_MEAN] * channels, [SYNTH_STD] * channels),
                   labels, classes, split)


def synth_split(n_train: int = 2000, n_test: int = 1000, seed: int = 0, **kw) -> tuple:
    train = synth_shapes(n_train, seed=seed, **kw)
    test = synth_shapes(n_test, seed=seed + 100_003, split="test", **kw)
    return train, test


# -- augmentation -------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def pad_crop(img: np.ndarray, pad: int, top: int, left: int) -> np.ndarray:
    """Zero-pad a (C, H, W) image by ``pad`` on all sides and crop back at (top, left)."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top:top + h, left:left + w]


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if not config.enabled:
        return batch
    n = batch.shape[0]
    flips = rng.random(n) < config.hflip_prob
    offsets = rng.integers(0, 2 * config.crop_padding + 1, size=(n, 2))
    out = np.empty_like(batch)
    for i in range(n):
        img = hflip(batch[i]) if flips[i] else batch[i]
        out[i] = pad_crop(img, config.crop_padding, *offsets[i])
    return out
