"""MNIST-family IDX files: parsing, 28->32 preprocessing and seeded batching."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (IDXCountMismatchError, IDXMagicError, IDXTruncatedError, ParameterError)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class RawDataset:
    images: np.ndarray  # N x 28 x 28 uint8
    labels: np.ndarray  # N uint8
    checksum: str


@dataclass
class Dataset:
    images: np.ndarray  # N x 32 x 32 x 1 float64 in [0, 1]
    labels: np.ndarray  # N int64
    split: str = "train"
    checksum: str = ""
    resize: str = "pad"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.checksum, self.resize)


def parse_idx(blob: bytes, magic: int, what: str = "idx") -> np.ndarray:
    if len(blob) < 4:
        raise IDXTruncatedError(f"{what}: file shorter than its magic number")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise IDXMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IDXTruncatedError(f"{what}: header truncated")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise IDXTruncatedError(f"{what}: payload has {len(blob) - header} bytes, expected {size}")
    if len(blob) > header + size:
        raise IDXTruncatedError(f"{what}: {len(blob) - header - size} unexpected trailing bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> Path:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    path = Path(path)
    path.write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())
    return path


def load_idx(images_path, labels_path) -> RawDataset:
    img_blob = Path(images_path).read_bytes()
    lab_blob = Path(labels_path).read_bytes()
    images = parse_idx(img_blob, IMAGES_MAGIC, str(images_path))
    labels = parse_idx(lab_blob, LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise IDXCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    digest = hashlib.sha256(img_blob + lab_blob).hexdigest()
    return RawDataset(images, labels, digest)


def _bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    ys = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    img = images.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw: RawDataset, split: str = "train", resize: str = "pad") -> Dataset:
    """28x28 uint8 -> 32x32x1 float in [0, 1] by zero padding (or bilinear resize)."""
    images = raw.images
    if images.dtype != np.uint8:
        raise ParameterError(f"preprocess expects raw uint8 pixels, got {images.dtype} (already normalised?)")
    if resize == "pad":
        out = np.pad(images, ((0, 0), (2, 2), (2, 2))).astype(np.float64)
    elif resize == "bilinear":
        out = _bilinear_resize(images, 32)
    else:
        raise ParameterError(f"resize must be 'pad' or 'bilinear', got {resize!r}")
    out /= 255.0
    return Dataset(out[..., None], raw.labels.astype(np.int64), split, raw.checksum, resize)


def load_split(directory, split: str = "train", resize: str = "pad") -> Dataset:
    images, labels = FILES[split]
    directory = Path(directory)
    return preprocess(load_idx(directory / images, directory / labels), split, resize)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded Fisher-Yates permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(n_or_ds, batch_size: int, seed: int, epoch: int):
    """Yield index arrays covering a permutation of the data; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    n = n_or_ds if isinstance(n_or_ds, (int, np.integer)) else len(n_or_ds)
    order = batch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
