"""Token-length labels: the smallest sufficient length per sample.

A sample's bitmap records, per schedule index, whether the converged
model predicts it correctly at that length (inference mode, no
distillation token). The label is the largest index i such that every
index j <= i is correct — i.e. the cheapest length that is correct
together with all larger lengths. Samples wrong at the largest length
keep label 0 so they stay in the assigner's training set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabelEntry:
    sample_id: int
    label: int
    bitmap: tuple[int, ...]


@dataclass
class LabelSet:
    entries: list[LabelEntry]
    k: int

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels(), minlength=self.k)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "label_idx", "bitmap"])
            for e in self.entries:
                w.writerow([e.sample_id, e.label, "".join(map(str, e.bitmap))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LabelSet":
        entries = []
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header != ["sample_id", "label_idx", "bitmap"]:
                raise ValueError(f"unexpected label CSV header: {header}")
            for sid, label, bitmap in r:
                entries.append(LabelEntry(int(sid), int(label), tuple(int(b) for b in bitmap)))
        if not entries:
            raise ValueError(f"label CSV {path} holds no entries")
        return cls(entries, k=len(entries[0].bitmap))


def label_from_bitmap(bitmap) -> int:
    """Largest i with bitmap[j] true for all j <= i; 0 if bitmap[0] is false."""
    if not bitmap[0]:
        return 0
    i = 0
    while i + 1 < len(bitmap) and bitmap[i + 1]:
        i += 1
    return i


def correctness_bitmaps(model, dataset, batch_size: int = 256) -> np.ndarray:
    """[n, k] matrix of per-length correctness for every sample."""
    n = len(dataset)
    bitmaps = np.zeros((n, model.k), dtype=np.int8)
    for i in range(model.k):
        for lo in range(0, n, batch_size):
            batch = dataset.images[lo:lo + batch_size]
            pred = model.predict(batch, i)
            bitmaps[lo:lo + batch.shape[0], i] = pred == dataset.labels[lo:lo + batch.shape[0]]
    return bitmaps


def extract_labels(model, dataset, batch_size: int = 256) -> LabelSet:
    bitmaps = correctness_bitmaps(model, dataset, batch_size=batch_size)
    entries = [
        LabelEntry(int(sid), label_from_bitmap(bm), tuple(int(b) for b in bm))
        for sid, bm in zip(dataset.ids, bitmaps)
    ]
    return LabelSet(entries, k=model.k)
