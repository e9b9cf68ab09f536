"""Dataset ingestion (IDX, CIFAR-10 binary), synthetic data, splits and batching."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def sample(self, n: int, seed: int = 42) -> "Dataset":
        """Random subset of ``n`` items (seeded)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} data bytes for dims {dims}, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "") -> Dataset:
    """Load an MNIST-family IDX pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 1
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), k, name or os.path.basename(str(images_path)))


def load_cifar_bin(paths: Sequence, num_classes: int = 10, name: str = "cifar10") -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R, G, B planes) per record."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes, name)


def synthetic_dataset(num_classes: int, per_class: int, height: int = 16, width: int = 16,
                      seed: int = 42, channels: int = 1, noise: float = 0.15) -> Dataset:
    """Gaussian blobs whose centre depends on the class, plus jitter and pixel noise.

    Class centres sit on a circle around the image centre, so the classes are
    separable by location; exactly ``per_class`` items per class, shuffled.
    """
    if num_classes < 1 or per_class < 1:
        raise ContractError("num_classes and per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(n)]
    angle = 2 * np.pi * labels / num_classes
    radius = 0.28 * min(height, width)
    cy = (height - 1) / 2 + radius * np.sin(angle) + rng.normal(0, 0.6, n)
    cx = (width - 1) / 2 + radius * np.cos(angle) + rng.normal(0, 0.6, n)
    sigma = 0.12 * min(height, width) * rng.uniform(0.8, 1.2, n)
    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    blob = np.exp(-d2 / (2 * sigma[:, None, None] ** 2))
    imgs = blob[:, None] * rng.uniform(0.7, 1.0, (n, channels, 1, 1))
    imgs = imgs + rng.normal(0, noise, imgs.shape)
    return Dataset(np.clip(imgs, 0, 1).astype(np.float32), labels.astype(np.int64), num_classes, "synthetic")


@dataclass(frozen=True)
class SplitConfig:
    val_fraction: float = 0.2
    seed: int = 42
    batch_size: int = 128

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ContractError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def _batches(ds: Dataset, order: np.ndarray, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


class TrainLoader:
    """Reshuffles every epoch with seed ``base_seed + epoch``; keeps the final partial batch."""

    def __init__(self, ds: Dataset, indices: np.ndarray, cfg: SplitConfig):
        self.ds, self.indices, self.cfg = ds, indices, cfg
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.indices) // self.cfg.batch_size)

    def batches(self, epoch: int):
        order = self.indices[np.random.default_rng(self.cfg.seed + epoch).permutation(len(self.indices))]
        return _batches(self.ds, order, self.cfg.batch_size)

    def __iter__(self):
        it = self.batches(self.epoch)
        self.epoch += 1
        return it


class EvalLoader:
    def __init__(self, ds: Dataset, indices: np.ndarray, batch_size: int):
        self.ds, self.indices, self.batch_size = ds, indices, batch_size

    def __len__(self) -> int:
        return -(-len(self.indices) // self.batch_size)

    def __iter__(self):
        return _batches(self.ds, self.indices, self.batch_size)


def split_indices(n: int, cfg: SplitConfig) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ContractError("need at least 2 items to split")
    n_val = int(round(n * cfg.val_fraction))
    if n_val == 0 or n_val == n:
        raise ContractError(f"val_fraction {cfg.val_fraction} leaves an empty split for N={n}")
    perm = np.random.default_rng(cfg.seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_and_batch(ds: Dataset, cfg: SplitConfig = SplitConfig()) -> tuple[TrainLoader, EvalLoader]:
    train_idx, val_idx = split_indices(len(ds), cfg)
    return TrainLoader(ds, train_idx, cfg), EvalLoader(ds, val_idx, cfg.batch_size)
