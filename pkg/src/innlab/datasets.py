"""Dataset readers: IDX (MNIST layout), CIFAR binary batches, bundled digits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CountMismatchError, FormatMagicError, LabelError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class DatasetHandle:
    images: np.ndarray  # [M, C, H, W] float32 in [0,1]
    labels: np.ndarray  # [M] int64
    N: int
    split: str = "train"
    name: str = "unnamed"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise LabelError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.N):
            raise LabelError(f"labels must lie in [0, {self.N})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DatasetHandle":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetHandle(self.images[idx], self.labels[idx], self.N, split or self.split, self.name)

    def sample(self, n: int, seed: int) -> "DatasetHandle":
        """Seeded subset of at most ``n`` images, in ascending index order."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))


# ---------------------------------------------------------------------------
# IDX


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise ParseError(f"{what}: file too short for an IDX header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatMagicError(f"{what}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{what}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ParseError(f"{what}: expected {count} data bytes after header, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def parse_idx(image_bytes: bytes, label_bytes: bytes, N: int = 10, split: str = "train") -> DatasetHandle:
    images = _parse_idx(image_bytes, IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(label_bytes, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    pixels = (images.astype(np.float32) / np.float32(255))[:, None, :, :]
    return DatasetHandle(pixels, labels.astype(np.int64), N, split, "idx")


def read_idx(images_path, labels_path, N: int = 10, split: str = "train") -> DatasetHandle:
    return parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), N, split)


def render_idx(images_u8: np.ndarray, labels_u8: np.ndarray) -> tuple[bytes, bytes]:
    """Inverse of the parser: uint8 [M,H,W] images and [M] labels to IDX bytes."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    img = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images_u8.shape) + images_u8.tobytes()
    lab = struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels_u8.shape[0]) + labels_u8.tobytes()
    return img, lab


# ---------------------------------------------------------------------------
# CIFAR


def parse_cifar_binary(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise ParseError(
            f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at offset {whole * CIFAR_RECORD}"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    pixels = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return pixels, labels


def read_cifar_binary(paths: Sequence, N: int = 10, split: str = "train") -> DatasetHandle:
    if not paths:
        raise ParseError("no CIFAR batch files given")
    images, labels = [], []
    for p in paths:
        px, lb = parse_cifar_binary(Path(p).read_bytes(), str(p))
        images.append(px)
        labels.append(lb)
    return DatasetHandle(np.concatenate(images), np.concatenate(labels), N, split, "cifar")


# ---------------------------------------------------------------------------
# bundled digits


def load_digits(split: str = "train", upscale: int = 3, test_fraction: float = 0.25, seed: int = 0) -> DatasetHandle:
    """scikit-learn's 8x8 handwritten digits, bilinearly upscaled.

    The train/test split is a seeded permutation, fixed for a given ``seed``.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    imgs = bunch.images.astype(np.float64) / 16.0
    if upscale > 1:
        imgs = np.clip(zoom(imgs, (1, upscale, upscale), order=1), 0.0, 1.0)
    perm = np.random.default_rng(seed).permutation(len(imgs))
    n_test = int(round(test_fraction * len(imgs)))
    idx = perm[n_test:] if split == "train" else perm[:n_test]
    idx = np.sort(idx)
    return DatasetHandle(imgs[idx, None].astype(np.float32), bunch.target[idx], 10, split, "digits")


def load_dataset(fmt: str, paths: Sequence[str] = (), split: str = "train", N: int = 10) -> DatasetHandle:
    """Dispatch on a format tag: ``digits``, ``idx`` (images, labels) or ``cifar``."""
    if fmt == "digits":
        return load_digits(split)
    if fmt == "idx":
        if len(paths) != 2:
            raise ParseError("idx format needs an images path and a labels path")
        return read_idx(paths[0], paths[1], N, split)
    if fmt == "cifar":
        return read_cifar_binary(paths, N, split)
    raise ParseError(f"unknown dataset format {fmt!r}")
