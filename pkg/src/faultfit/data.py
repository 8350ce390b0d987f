"""MNIST IDX image files, normalisation and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IMAGE_SIDE = 28
DATA_DIR_ENV = "FAULTFIT_DATA_DIR"
TRAIN_IMAGES = "train-images-idx3-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedIdxError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # (N, 784), values in [0, 1]

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
            raise ValueError(f"expected (N, 784) images, got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.images)

    def limit(self, n: int | None) -> ImageDataset:
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise ValueError(f"limit must be positive, got {n}")
        return ImageDataset(self.images[:n])


def _open(path: Path):
    with open(path, "rb") as f:
        gz = f.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def load_idx(path) -> ImageDataset:
    """Read an IDX3 unsigned-byte image file (optionally gzipped)."""
    path = Path(path)
    with _open(path) as f:
        header = f.read(16)
        if len(header) < 4:
            raise TruncatedIdxError(f"{path}: file too short for an IDX header")
        (magic,) = struct.unpack(">I", header[:4])
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
        if len(header) < 16:
            raise TruncatedIdxError(f"{path}: truncated IDX header")
        count, rows, cols = struct.unpack(">III", header[4:])
        if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
            raise IdxDimensionError(f"{path}: images are {rows}x{cols}, expected 28x28")
        if count == 0:
            raise IdxDimensionError(f"{path}: no images")
        expected = count * rows * cols
        body = f.read(expected)
    if len(body) < expected:
        raise TruncatedIdxError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    return ImageDataset(pixels.astype(np.float64) / 255.0)


def write_idx(path, pixels: np.ndarray) -> None:
    """Write (N, 28, 28) or (N, 784) uint8 pixels as an IDX3 file."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(pixels), IMAGE_SIDE, IMAGE_SIDE))
        f.write(pixels.tobytes())


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data/mnist"))


def find_images(name: str, data_dir=None) -> Path:
    """Locate ``name`` or ``name.gz`` in the data directory."""
    base = Path(data_dir) if data_dir is not None else default_data_dir()
    for candidate in (base / name, base / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"{name}[.gz] not found in {base} (set {DATA_DIR_ENV} or pass an explicit path)"
    )


def batch_indices(n: int, batch_size: int,
                  rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index arrays covering ``range(n)`` once; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(ds: ImageDataset, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    return [ds.images[idx] for idx in batch_indices(len(ds), batch_size, rng)]
