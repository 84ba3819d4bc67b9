"""Datasets: CIFAR-10 binary batches and a seeded synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
_FILE_ID_STRIDE = 1_000_000  # sample id = file index * stride + record index


class FormatError(ValueError):
    """A data file does not match its published byte layout."""


@dataclass
class Dataset:
    """Images in [0, 1], integer class labels, unique per-sample ids."""

    images: np.ndarray  # [n, c, h, w] float32
    labels: np.ndarray  # [n] int64
    ids: np.ndarray  # [n] int64, unique
    split: str
    num_classes: int

    def __post_init__(self):
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels and ids must be one per image")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if len(np.unique(self.ids)) != n:
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.ids[idx],
                       self.split, self.num_classes)


def parse_cifar10_bytes(buf: bytes, file_index: int = 0, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode one CIFAR-10 binary batch into (images, labels, ids)."""
    size = len(buf)
    if size == 0 or size % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{name}: truncated batch, partial record starts at byte offset {size - size % CIFAR_RECORD_BYTES}"
        )
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{name}: label byte {labels[bad[0]]} > 9 in record {bad[0]}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    ids = file_index * _FILE_ID_STRIDE + np.arange(rec.shape[0], dtype=np.int64)
    return images, labels, ids


def _resolve_cifar_dir(data_dir: str | Path) -> Path:
    root = Path(data_dir)
    if (root / "cifar-10-batches-bin").is_dir():
        return root / "cifar-10-batches-bin"
    return root


def load_cifar10(data_dir: str | Path, split: str = "train") -> Dataset:
    """Read the standard CIFAR-10 binary batches from a directory."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got '{split}'")
    root = _resolve_cifar_dir(data_dir)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    paths = [root / n for n in names]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 batch files not found: {missing}")
    images, labels, ids = [], [], []
    for file_index, path in enumerate(paths):
        im, lb, sid = parse_cifar10_bytes(path.read_bytes(), file_index, name=str(path))
        images.append(im)
        labels.append(lb)
        ids.append(sid if split == "train" else sid + len(CIFAR_TRAIN_FILES) * _FILE_ID_STRIDE)
    return Dataset(np.concatenate(images), np.concatenate(labels), np.concatenate(ids),
                   split, CIFAR_CLASSES)


def synth_dataset(seed: int, n: int, classes: int, image_size: int,
                  channels: int = 3, split: str = "train") -> Dataset:
    """Class-conditional Gaussian-blob images, balanced within +-1.

    Each class owns a blob position on a circle plus a color mix; samples
    vary in jitter, blob width, and additive noise so that some need fine
    spatial detail and some do not. The same seed reproduces the tensors
    bit for bit.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class, got n={n} for {classes} classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B, {"train": 0, "test": 1}.get(split, 2)]))
    labels = np.arange(n, dtype=np.int64) % classes
    angles = 2.0 * np.pi * labels / classes
    r = image_size / 4.0
    cx = image_size / 2.0 + r * np.cos(angles) + rng.normal(0, image_size / 24.0, n)
    cy = image_size / 2.0 + r * np.sin(angles) + rng.normal(0, image_size / 24.0, n)
    width = image_size / 8.0 * rng.uniform(0.7, 1.6, n)
    noise_level = rng.uniform(0.0, 0.35, n)

    yy, xx = np.mgrid[0:image_size, 0:image_size]
    blob = np.exp(-(((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
                    / (2.0 * width[:, None, None] ** 2)))
    # per-class channel mix keeps classes linearly separable even at low spatial detail
    mix = 0.25 + 0.75 * rng.random((classes, channels))
    images = blob[:, None, :, :] * mix[labels][:, :, None, None]
    images += noise_level[:, None, None, None] * rng.random((n, channels, image_size, image_size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    ids = np.arange(n, dtype=np.int64) + (10_000_000 if split == "test" else 0)
    return Dataset(images, labels, ids, split, classes)


def load_dataset(cfg, split: str) -> Dataset:
    """Build the dataset a RunConfig's data section describes."""
    if cfg.kind == "cifar10":
        ds = load_cifar10(cfg.dir, split=split)
    else:
        n = cfg.n_train if split == "train" else cfg.n_test
        ds = synth_dataset(seed=0xDA7A, n=n, classes=cfg.classes,
                           image_size=cfg.image_size, split=split)
    if split == "train" and cfg.train_subset is not None and cfg.train_subset < len(ds):
        ds = ds.subset(np.arange(cfg.train_subset))
    return ds
