# maxprop/data.py
"""
Dataset ingestion (IDX and CIFAR-style binary records), the shift/flip/normalize
augmentation pipeline, batching, and a separable synthetic dataset for quick runs.

Images are held as uint8 N x C x H x W in the raw 0-255 scale; normalization
happens in ``augment`` so every phase sees the same stored pixels.
"""
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    DatasetFormatError,
    LabelRangeError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .layers import Phase
from .tensor import Rng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PIXELS = 3 * 32 * 32
RGB_MEAN = (122.0, 117.0, 104.0)
GRAY_MEAN = (125.0,)
PIXEL_SCALE = 256.0

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    images: np.ndarray  # uint8, N x C x H x W
    labels: np.ndarray  # int64, N
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"{self.name}: images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) == 0:
            raise DatasetFormatError(f"{self.name}: dataset is empty")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError(
                f"{self.name}: labels must lie in [0, {self.num_classes}), found range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, name or self.name)

    def head(self, count: int) -> "Dataset":
        return self.subset(np.arange(min(count, len(self))), f"{self.name}[:{count}]")


def _read_bytes(path: PathLike) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as handle:
        return handle.read()


def _parse_idx(raw: bytes, expected_magic: int, path: PathLike) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise TruncatedFileError(f"{path}: header needs {header_size} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])
    expected = header_size + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes for dims {dims}, file has {len(raw)}")
    if len(raw) > expected:
        raise CountMismatchError(f"{path}: header dims {dims} account for {expected} bytes, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims)


def load_idx(
    images_path: PathLike, labels_path: PathLike, num_classes: int = 10, name: str = "fashion_mnist"
) -> Dataset:
    """
    Reads an IDX image/label file pair (plain or gzip-compressed).

    Args:
        images_path (PathLike): File with magic 0x00000803 and dims (N, H, W).
        labels_path (PathLike): File with magic 0x00000801 and dims (N,).
        num_classes (int): Labels must lie in [0, num_classes).
        name (str): Dataset name carried into logs and reports.

    Returns:
        Dataset: Single-channel images, N x 1 x H x W.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if len(labels) and labels.max() >= num_classes:
        raise LabelRangeError(f"{labels_path}: label {int(labels.max())} outside [0, {num_classes})")
    dataset = Dataset(images[:, None, :, :].copy(), labels.astype(np.int64), num_classes, name)
    logger.info(f"Loaded {name} from IDX: {len(dataset)} images of shape {dataset.images.shape[1:]}")
    return dataset


def load_cifar_binary(
    paths: Sequence[PathLike], fine_labels: bool = False, num_classes: Optional[int] = None, name: str = "cifar"
) -> Dataset:
    """
    Reads CIFAR-style binary batches: 3073-byte records (one label byte) or,
    when ``fine_labels`` is set, 3074-byte records (coarse then fine label byte).
    Pre-converted SVHN uses the 3073-byte layout.
    """
    record = CIFAR_PIXELS + (2 if fine_labels else 1)
    num_classes = num_classes or (100 if fine_labels else 10)
    chunks = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise TruncatedFileError(
                f"{path}: {len(raw)} bytes is not a positive multiple of the {record}-byte record size "
                f"(expected {max(1, -(-len(raw) // record)) * record} bytes)"
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    if not chunks:
        raise DatasetFormatError(f"{name}: no CIFAR batch files given")
    records = np.concatenate(chunks)
    labels = records[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    if labels.max() >= num_classes:
        raise LabelRangeError(f"{name}: label {int(labels.max())} outside [0, {num_classes})")
    images = records[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).copy()
    dataset = Dataset(images, labels, num_classes, name)
    logger.info(f"Loaded {name} from {len(chunks)} CIFAR batch file(s): {len(dataset)} images")
    return dataset


@dataclass(frozen=True)
class AugmentConfig:
    max_shift: int = 4
    flip_horizontal: bool = False
    mean: Tuple[float, ...] = RGB_MEAN
    scale: float = PIXEL_SCALE

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        if self.max_shift < 0:
            raise ValueError(f"max_shift must be >= 0, got {self.max_shift}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @classmethod
    def for_channels(cls, channels: int, max_shift: int = 4, flip_horizontal: bool = False) -> "AugmentConfig":
        """RGB means for 3-channel data, the grayscale mean otherwise."""
        mean = RGB_MEAN if channels == 3 else GRAY_MEAN * channels
        return cls(max_shift=max_shift, flip_horizontal=flip_horizontal, mean=mean)


def shift_image(images: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translates the last two axes by (dy, dx) pixels, filling with zeros."""
    out = np.zeros_like(images)
    h, w = images.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = images[..., src_y, src_x]
    return out


def normalize(images: np.ndarray, cfg: AugmentConfig, dtype=np.float32) -> np.ndarray:
    channels = images.shape[1]
    mean = np.asarray(cfg.mean if len(cfg.mean) != 1 else cfg.mean * channels, dtype=np.float64)
    if mean.shape[0] != channels:
        raise ShapeMismatchError(f"normalize: {len(cfg.mean)} channel means for {channels}-channel images")
    out = (images.astype(np.float64) - mean[None, :, None, None]) / cfg.scale
    return out.astype(dtype)


def augment(
    images: np.ndarray, cfg: AugmentConfig, rng: Optional[Rng], phase: Phase = Phase.TRAIN, dtype=np.float32
) -> np.ndarray:
    """
    Train phase: per-image random shift in [-max_shift, max_shift] on each axis
    with zero fill, optional horizontal flip with p=0.5, then (pixel - mean) / scale.
    Eval phase: normalization only.
    """
    if Phase(phase) == Phase.TRAIN and rng is not None:
        images = np.array(images, copy=True)
        if cfg.max_shift > 0:
            shifts = rng.integers(-cfg.max_shift, cfg.max_shift, size=(len(images), 2))
            for index, (dy, dx) in enumerate(shifts):
                if dy or dx:
                    images[index] = shift_image(images[index], int(dy), int(dx))
        if cfg.flip_horizontal:
            flip = rng.random(len(images)) < 0.5
            images[flip] = images[flip][..., ::-1]
    return normalize(images, cfg, dtype)


def batches(
    dataset: Dataset, batch_size: int, rng: Optional[Rng] = None, shuffle: bool = False
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yields (images, labels) chunks covering every index once; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(dataset)) if shuffle and rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        index = order[start:start + batch_size]
        yield dataset.images[index], dataset.labels[index]


def synthetic_dataset(
    n: int, num_classes: int, seed: int, channels: int = 3, size: int = 8, name: str = "synthetic"
) -> Dataset:
    """
    Class-conditional blob images, linearly separable by construction.

    Every class has its own per-channel intensity level plus a fixed Gaussian blob
    rolled to a class-specific position. Bounded pixel noise stays below half the
    gap between neighbouring levels, so the channel-0 pixel sum alone separates
    the classes. Class counts differ by at most one.
    """
    if n < num_classes:
        raise ValueError(f"synthetic_dataset needs n >= num_classes, got n={n}, num_classes={num_classes}")
    rng = Rng(seed)
    spacing = 200.0 / num_classes
    noise = min(6.0, 0.25 * spacing)
    levels = np.array(
        [[16.0 + spacing * (((k * (2 * c + 1)) % num_classes) + 0.5) for c in range(channels)] for k in range(num_classes)]
    )
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    blob = 24.0 * np.exp(-((yy - centre) ** 2 + (xx - centre) ** 2) / (2.0 * max(1.0, size / 6.0) ** 2))

    labels = (np.arange(n) % num_classes)[rng.permutation(n)]
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    jitter = rng.uniform(-noise, noise, (n, channels, size, size))
    for k in range(num_classes):
        rolled = np.roll(blob, shift=((k * 3) % size, (k * 5) % size), axis=(0, 1))
        members = labels == k
        pixels = levels[k][None, :, None, None] + rolled[None, None] + jitter[members]
        images[members] = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    logger.debug(f"Synthetic dataset: n={n}, classes={num_classes}, shape={images.shape[1:]}, seed={seed}")
    return Dataset(images, labels.astype(np.int64), num_classes, name)
