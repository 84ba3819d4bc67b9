"""Adaptive inference, trade-off accounting, and throughput measurement.

Policies: fixed(i) always runs schedule index i; adaptive routes each
image through the token-length assigner; oracle applies the labeling
rule to ground truth (an upper bound on assigner quality). FLOPs are the
analytic per-image counts; the assigner's own cost is charged to the
adaptive policy.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assigner import TokenLengthAssigner, assign, tla_count_flops
from .labeling import correctness_bitmaps, label_from_bitmap
from .model import ReViT, count_flops


def fixed_policy_name(i: int) -> str:
    return f"fixed({i})"


def parse_policy(name: str, k: int) -> tuple[str, int | None]:
    """Returns ("fixed", i) or ("adaptive"|"oracle", None)."""
    if name in ("adaptive", "oracle"):
        return name, None
    if name.startswith("fixed(") and name.endswith(")"):
        i = int(name[6:-1])
        if not 0 <= i < k:
            raise ValueError(f"fixed policy index {i} out of range [0, {k})")
        return "fixed", i
    raise ValueError(f"unknown policy '{name}'")


def all_policy_names(k: int) -> list[str]:
    return [fixed_policy_name(i) for i in range(k)] + ["adaptive", "oracle"]


@dataclass
class TradeoffRow:
    policy: str
    top1: float
    mean_tokens: float
    mean_flops: float
    ips: float
    hist: tuple[int, ...]


@dataclass
class TradeoffReport:
    rows: list[TradeoffRow]

    def row(self, policy: str) -> TradeoffRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(f"no row for policy '{policy}'")


def adaptive_predict(tla: TokenLengthAssigner, model: ReViT, image) -> tuple[int, int, int]:
    """(predicted class, assigned length, analytic FLOPs) for one image."""
    length_idx = int(assign(tla, image)[0])
    pred = int(model.predict(image, length_idx)[0])
    flops = count_flops(model.cfg, length_idx) + tla_count_flops(tla)
    return pred, length_idx, flops


def _batched_predict(model: ReViT, images: np.ndarray, length_idx: int, batch_size: int) -> np.ndarray:
    return np.concatenate([
        model.predict(images[lo:lo + batch_size], length_idx)
        for lo in range(0, images.shape[0], batch_size)
    ])


def _assignments(tla: TokenLengthAssigner, images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([
        assign(tla, images[lo:lo + batch_size])
        for lo in range(0, images.shape[0], batch_size)
    ])


def evaluate(policy: str, model: ReViT, dataset, tla: TokenLengthAssigner | None = None,
             batch_size: int = 256) -> TradeoffRow:
    """Accuracy / token / FLOPs accounting for one policy (ips left at 0)."""
    kind, fixed_i = parse_policy(policy, model.k)
    if kind == "adaptive" and tla is None:
        raise ValueError("adaptive policy requires a trained token-length assigner")
    n = len(dataset)
    tokens = np.array(model.cfg.schedule.token_counts)
    per_len_flops = np.array([count_flops(model.cfg, i) for i in range(model.k)], dtype=np.int64)

    if kind == "fixed":
        lengths = np.full(n, fixed_i, dtype=np.int64)
        pred = _batched_predict(model, dataset.images, fixed_i, batch_size)
        extra = 0
    elif kind == "adaptive":
        lengths = _assignments(tla, dataset.images, batch_size)
        pred = np.empty(n, dtype=np.int64)
        for i in range(model.k):
            mask = lengths == i
            if mask.any():
                pred[mask] = _batched_predict(model, dataset.images[mask], i, batch_size)
        extra = tla_count_flops(tla)
    else:  # oracle: label rule on ground truth
        bitmaps = correctness_bitmaps(model, dataset, batch_size=batch_size)
        lengths = np.array([label_from_bitmap(bm) for bm in bitmaps], dtype=np.int64)
        pred = np.empty(n, dtype=np.int64)
        for i in range(model.k):
            mask = lengths == i
            if mask.any():
                pred[mask] = _batched_predict(model, dataset.images[mask], i, batch_size)
        extra = 0

    hist = np.bincount(lengths, minlength=model.k)
    return TradeoffRow(
        policy=policy,
        top1=float(np.mean(pred == dataset.labels)),
        mean_tokens=float(tokens[lengths].mean()),
        mean_flops=float(per_len_flops[lengths].mean() + extra),
        ips=0.0,
        hist=tuple(int(c) for c in hist),
    )


def evaluate_all(model: ReViT, dataset, tla: TokenLengthAssigner | None = None,
                 policies: list[str] | None = None, batch_size: int = 256) -> TradeoffReport:
    names = policies if policies is not None else all_policy_names(model.k)
    return TradeoffReport([evaluate(p, model, dataset, tla=tla, batch_size=batch_size) for p in names])


def benchmark_throughput(model: ReViT, tla: TokenLengthAssigner | None, dataset,
                         batch_size: int = 32, trials: int = 5, warmup: int = 1,
                         policies: list[str] | None = None) -> dict[str, dict]:
    """Median images/sec per policy over >= 5 timed trials.

    The adaptive policy buckets images by assigned length and runs each
    bucket batched. Also reports the relative spread of the trials as a
    soft stability indicator.
    """
    if trials < 5:
        raise ValueError(f"benchmark needs >= 5 trials, got {trials}")
    names = policies if policies is not None else all_policy_names(model.k)
    names = [p for p in names if p != "oracle"]  # oracle has no runtime story
    images = dataset.images
    n = images.shape[0]
    results: dict[str, dict] = {}

    def run_fixed(i: int) -> None:
        for lo in range(0, n, batch_size):
            model.predict(images[lo:lo + batch_size], i)

    def run_adaptive() -> None:
        lengths = _assignments(tla, images, batch_size)
        for i in range(model.k):
            bucket = images[lengths == i]
            for lo in range(0, bucket.shape[0], batch_size):
                model.predict(bucket[lo:lo + batch_size], i)

    for name in names:
        kind, fixed_i = parse_policy(name, model.k)
        if kind == "adaptive" and tla is None:
            raise ValueError("adaptive policy requires a trained token-length assigner")
        fn = run_adaptive if kind == "adaptive" else (lambda i=fixed_i: run_fixed(i))
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        times = np.array(times)
        med = float(np.median(times))
        results[name] = {
            "ips": n / med,
            "spread": float((times.max() - times.min()) / med),
            "trials": trials,
        }
    return results


CSV_HEADER = ["policy", "top1", "mean_tokens", "mean_flops", "ips", "hist"]


def export_tradeoff(report: TradeoffReport, path: str | Path) -> None:
    """Pinned CSV: fixed header, 6 significant digits, '\\n' line endings."""
    if not report.rows:
        raise ValueError("cannot export an empty trade-off report")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([
                r.policy,
                f"{r.top1:.6g}",
                f"{r.mean_tokens:.6g}",
                f"{r.mean_flops:.6g}",
                f"{r.ips:.6g}",
                ";".join(str(c) for c in r.hist),
            ])


def load_tradeoff(path: str | Path) -> TradeoffReport:
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trade-off CSV header: {header}")
        for policy, top1, tokens, flops, ips, hist in r:
            rows.append(TradeoffRow(policy, float(top1), float(tokens), float(flops),
                                    float(ips), tuple(int(c) for c in hist.split(";"))))
    return TradeoffReport(rows)
