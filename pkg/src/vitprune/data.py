"""Dataset ingestion: CIFAR-10 binary batches and the raw tensor format.

raw_tensor layout: magic "HIAPDS1\\0", u32 LE count / channels / height /
width, count*C*H*W little-endian float32 pixels, then count u16 LE labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .io import atomic_write_bytes

RAW_TENSOR_MAGIC = b"HIAPDS1\x00"

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels, channel-planar


class DataFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "ImageDataset":
        return ImageDataset(self.images[indices], self.labels[indices],
                            self.num_classes)


def load_dataset(path: str, format: str, num_classes: int = 10) -> ImageDataset:
    if format == "cifar10_binary":
        return _load_cifar10_binary(path, num_classes)
    if format == "raw_tensor":
        return load_raw_tensor(path, num_classes=num_classes)
    raise DataFormatError(f"unknown dataset format {format!r}")


def _load_cifar10_binary(path: str, num_classes: int) -> ImageDataset:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(blob)} is not a positive multiple of "
            f"{CIFAR_RECORD_BYTES}-byte records")
    n = len(blob) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise DataFormatError(
            f"{path}: label {int(labels.max())} >= num_classes {num_classes}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    # per-channel standardization over this file
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    std[std < 1e-6] = 1.0
    images = (images - mean) / std
    return ImageDataset(images.astype(np.float32), labels, num_classes)


def write_cifar10_binary(path: str, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the CIFAR loader; images as (n, 3, 32, 32) uint8."""
    n = len(labels)
    if images_u8.shape != (n, 3, 32, 32) or images_u8.dtype != np.uint8:
        raise DataFormatError("expected (n, 3, 32, 32) uint8 images")
    rec = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images_u8.reshape(n, 3072)
    atomic_write_bytes(path, rec.tobytes())


def load_raw_tensor(path: str, num_classes: int | None = None) -> ImageDataset:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 8 + 16:
        raise DataFormatError(f"{path}: truncated raw_tensor header")
    if blob[:8] != RAW_TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:8]!r}")
    count, channels, height, width = struct.unpack_from("<IIII", blob, 8)
    pixels = count * channels * height * width
    expected = 8 + 16 + pixels * 4 + count * 2
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for {count} samples, got {len(blob)}")
    images = np.frombuffer(blob, dtype="<f4", count=pixels, offset=24)
    images = images.reshape(count, channels, height, width).copy()
    labels = np.frombuffer(blob, dtype="<u2", count=count,
                           offset=24 + pixels * 4).astype(np.int64)
    nc = num_classes if num_classes else int(labels.max(initial=0)) + 1
    if labels.max(initial=0) >= nc:
        raise DataFormatError(
            f"{path}: label {int(labels.max())} >= num_classes {nc}")
    return ImageDataset(images, labels, nc)


def write_raw_tensor(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4:
        raise DataFormatError(f"expected (n, C, H, W) images, got {images.shape}")
    n, c, h, w = images.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataFormatError("labels must be one per image")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise DataFormatError("labels must fit in u16")
    blob = RAW_TENSOR_MAGIC + struct.pack("<IIII", n, c, h, w) \
        + images.tobytes() + labels.astype("<u2").tobytes()
    atomic_write_bytes(path, blob)


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4) -> np.ndarray:
    """Horizontal flip (p=0.5) and random crop after zero padding."""
    n, c, h, w = images.shape
    flip = rng.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = out
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def iterate_batches(dataset: ImageDataset, batch_size: int,
                    rng: np.random.Generator | None = None,
                    augment: bool = False):
    """Yield (images, labels) batches; shuffles when an rng is given."""
    n = len(dataset)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if augment:
            images = augment_batch(images, rng)
        yield images, dataset.labels[idx]
