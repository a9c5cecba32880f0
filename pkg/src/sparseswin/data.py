"""CIFAR binary ingestion, a separable synthetic stand-in, and augmentation.

All randomness is drawn from streams keyed by (seed, epoch, record index), so
any batch can be regenerated without replaying the ones before it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import Rng
from .tensor import Tensor

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_LAYOUT = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes


@dataclass(frozen=True)
class ImageRecord:
    label: int
    pixels: np.ndarray  # uint8, (3, H, W)


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, 3, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be uint8 (N, 3, H, W), got {self.images.dtype} {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(int(self.labels[i]), self.images[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# CIFAR binary format


def read_cifar(paths: str | os.PathLike | Sequence, variant: str = "cifar10") -> Dataset:
    """Read one or more CIFAR-10/100 binary batch files.

    A CIFAR-10 record is 1 label byte + 3072 pixel bytes (R, G and B planes of
    32x32, row-major). CIFAR-100 records carry a coarse and a fine label byte;
    the fine label is used.
    """
    if variant not in CIFAR_LAYOUT:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    n_label, n_classes = CIFAR_LAYOUT[variant]
    rec_size = n_label + CIFAR_PIXELS
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if raw.size == 0 or raw.size % rec_size:
            raise DataError(f"{path}: length {raw.size} is not a positive multiple of the {rec_size}-byte record")
        chunks.append(raw.reshape(-1, rec_size))
    recs = np.concatenate(chunks)
    labels = recs[:, n_label - 1].astype(np.int64)
    if labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise DataError(f"record {bad}: label {labels[bad]} out of range for {variant}")
    images = np.ascontiguousarray(recs[:, n_label:].reshape(-1, 3, 32, 32))
    return Dataset(images, labels, n_classes)


def write_cifar(path: str | os.PathLike, ds: Dataset, variant: str = "cifar10",
                coarse: np.ndarray | None = None) -> None:
    """Write ``ds`` (32x32 images) in the CIFAR binary layout."""
    if variant not in CIFAR_LAYOUT:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    if ds.images.shape[2:] != (32, 32):
        raise DataError(f"CIFAR records are 32x32, got {ds.images.shape[2:]}")
    n_label, _ = CIFAR_LAYOUT[variant]
    n = len(ds)
    out = np.empty((n, n_label + CIFAR_PIXELS), dtype=np.uint8)
    out[:, n_label - 1] = ds.labels
    if n_label == 2:
        out[:, 0] = 0 if coarse is None else coarse
    out[:, n_label:] = ds.images.reshape(n, -1)
    out.tofile(path)


# ---------------------------------------------------------------------------
# synthetic data


def _class_colors(classes: int) -> np.ndarray:
    hues = np.arange(classes) / classes
    # hue wheel at full saturation
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6) % 6
    rgb = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
    return 48 + 160 * rgb  # (classes, 3)


def synthetic_dataset(classes: int, n: int, size: int = 32, seed: int = 0, noise: float = 12.0) -> Dataset:
    """Class ``k`` = hue-wheel colour k plus an oriented stripe pattern, plus noise.

    Labels are assigned round-robin, so every class gets ``n // classes`` or
    one more images.
    """
    if classes < 2:
        raise ConfigError(f"synthetic_dataset needs at least 2 classes, got {classes}")
    rng = Rng(seed).child("synthetic")
    colors = _class_colors(classes)
    yy, xx = np.mgrid[0:size, 0:size] / size
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    for i, k in enumerate(labels):
        angle = np.pi * k / classes
        stripes = 20.0 * np.sin(2 * np.pi * 3 * (np.cos(angle) * xx + np.sin(angle) * yy))
        base = colors[k][:, None, None] + stripes[None]
        img = base + rng.child(i).normal((3, size, size), std=noise)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, classes)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 224
    hflip_prob: float = 0.5
    crop: str = "random_resized"
    scale_range: tuple = (0.08, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)
    pad: int = 4
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "ratio_range", tuple(self.ratio_range))
        object.__setattr__(self, "mean", tuple(self.mean))
        object.__setattr__(self, "std", tuple(self.std))
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if self.crop not in ("random_resized", "pad_crop", "none"):
            raise ConfigError(f"unknown crop mode {self.crop!r}")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("mean/std need three entries with positive std")
        if self.target_size < 1:
            raise ConfigError("target_size must be positive")


def _axis_weights(n_in: int, n_out: int):
    # align_corners=False: source coordinate of output pixel centre
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with bilinear interpolation, half-pixel centres, edge clamp."""
    img = np.asarray(img, dtype=np.float64)
    r0, r1, wr = _axis_weights(img.shape[1], out_h)
    c0, c1, wc = _axis_weights(img.shape[2], out_w)
    rows = img[:, r0] * (1 - wr)[None, :, None] + img[:, r1] * wr[None, :, None]
    return rows[:, :, c0] * (1 - wc) + rows[:, :, c1] * wc


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def random_resized_box(h: int, w: int, cfg: AugmentConfig, rng: Rng) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a crop with random area fraction and aspect ratio."""
    area = h * w
    log_lo, log_hi = np.log(cfg.ratio_range[0]), np.log(cfg.ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.scale_range)
        ratio = np.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _normalize(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean)[:, None, None]
    std = np.asarray(cfg.std)[:, None, None]
    return ((img / 255.0 - mean) / std).astype(np.float32)


def augment(rec: ImageRecord, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Crop, resize to ``target_size``, maybe flip, scale to [0, 1], normalize."""
    img = rec.pixels.astype(np.float64)
    _, h, w = img.shape
    if cfg.crop == "random_resized":
        top, left, ch, cw = random_resized_box(h, w, cfg, rng)
        img = img[:, top : top + ch, left : left + cw]
    elif cfg.crop == "pad_crop":
        p = cfg.pad
        padded = np.pad(img, ((0, 0), (p, p), (p, p)))
        top, left = int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1))
        img = padded[:, top : top + h, left : left + w]
    s = cfg.target_size
    if img.shape[1:] != (s, s):
        img = bilinear_resize(img, s, s)
    if rng.uniform() < cfg.hflip_prob:
        img = hflip(img)
    return _normalize(img, cfg)


def eval_transform(rec: ImageRecord, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic resize to ``target_size`` and normalization."""
    img = rec.pixels.astype(np.float64)
    s = cfg.target_size
    if img.shape[1:] != (s, s):
        img = bilinear_resize(img, s, s)
    return _normalize(img, cfg)


# ---------------------------------------------------------------------------
# batching


def batch_indices(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the permutation depends only on (seed, epoch)."""
    if n == 0:
        raise DataError("dataset is empty")
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    perm = Rng(seed).child("shuffle", epoch).permutation(n)
    return [perm[i : i + batch] for i in range(0, n, batch)]


def make_batch(ds: Dataset, idx: np.ndarray, cfg: AugmentConfig, seed: int, epoch: int,
               train: bool = True) -> tuple[Tensor, np.ndarray]:
    if train:
        root = Rng(seed).child("augment", epoch)
        imgs = [augment(ds[int(i)], cfg, root.child(int(i))) for i in idx]
    else:
        imgs = [eval_transform(ds[int(i)], cfg) for i in idx]
    return Tensor(np.stack(imgs)), ds.labels[idx]


def batches(ds: Dataset, batch: int, seed: int, epoch: int, cfg: AugmentConfig | None = None,
            train: bool = True) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Training batches (shuffled, augmented) or, with ``train=False``, in-order eval batches."""
    cfg = cfg or AugmentConfig()
    if train:
        groups = batch_indices(len(ds), batch, seed, epoch)
    else:
        if len(ds) == 0:
            raise DataError("dataset is empty")
        groups = [np.arange(i, min(i + batch, len(ds))) for i in range(0, len(ds), batch)]
    for idx in groups:
        yield make_batch(ds, idx, cfg, seed, epoch, train)
