"""Mixed token-length training with in-network self-distillation.

One training step runs the largest length first (cross-entropy against
ground truth, its logits become the teacher), then every smaller length
against the captured teacher logits, accumulating gradients across all
lengths before a single optimizer step. The replica-parallel variant
computes the per-length backwards concurrently on parameter replicas and
reduces gradients onto the largest-length replica in ascending length
order, so its arithmetic matches the sequential path addition for
addition.
"""

from __future__ import annotations

import csv
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import DistillConfig, TrainPlan
from .model import ParamStore, ReViT
from .optim import AdamW
from .tensor import Tensor, backward, cross_entropy, debug_checks_enabled, kl_divergence, softmax

THREADS_ENV = "REVIT_THREADS"


class ConsistencyError(RuntimeError):
    """Replica parameters diverged where they must be identical."""


def distillation_loss(student_class_logits: Tensor, student_distill_logits: Tensor,
                      teacher_logits: Tensor, targets, cfg: DistillConfig) -> Tensor:
    """(1-lam)*CE(class, target) + lam*tau^2*KL(soft teacher || soft student)."""
    if cfg.tau <= 0:
        raise ValueError(f"distillation temperature must be > 0, got {cfg.tau}")
    if not 0.0 <= cfg.lam <= 1.0:
        raise ValueError(f"distillation coefficient must be in [0, 1], got {cfg.lam}")
    teacher = teacher_logits.detach()
    if cfg.lam == 0.0:
        return cross_entropy(student_class_logits, targets)
    kl = kl_divergence(softmax(teacher, temperature=cfg.tau),
                       softmax(student_distill_logits, temperature=cfg.tau))
    soft = (cfg.tau * cfg.tau * cfg.lam) * kl
    if cfg.lam == 1.0:
        return soft
    return (1.0 - cfg.lam) * cross_entropy(student_class_logits, targets) + soft


def _step_rng(plan: TrainPlan, epoch: int, step: int, length_idx: int) -> np.random.Generator:
    # identical dropout masks on the sequential and parallel paths
    return np.random.default_rng(np.random.SeedSequence([plan.seed, 0xD0, epoch, step, length_idx]))


def _length_loss(model: ReViT, images, labels, length_idx: int, teacher_logits,
                 plan: TrainPlan, rng) -> tuple[Tensor, Tensor, float]:
    """Forward at one length; returns (loss, class_logits, batch accuracy)."""
    distilling = length_idx > 0 and plan.self_distill
    with_distill = distilling and not plan.single_head
    logits, dlogits = model.forward(images, length_idx, with_distill=with_distill,
                                    train=True, rng=rng)
    if distilling:
        loss = distillation_loss(logits, dlogits if with_distill else logits,
                                 teacher_logits, labels, plan.distill)
    else:
        loss = cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
    return loss, logits, acc


def mixed_token_train_step(model: ReViT, images, labels, plan: TrainPlan,
                           opt: AdamW, epoch: int = 0, step: int = 0) -> list[dict]:
    """One Algorithm-1 step: zero grads, accumulate over lengths, one update."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("mixed_token_train_step requires a non-empty batch")
    k = model.k
    if k < 2:
        raise ValueError(f"schedule must hold at least 2 token lengths, got {k}")
    opt.zero_grad()
    teacher_logits: Tensor | None = None
    records = []
    for i in range(k):
        rng = _step_rng(plan, epoch, step, i)
        loss, logits, acc = _length_loss(model, images, labels, i, teacher_logits, plan, rng)
        if i == 0:
            teacher_logits = logits.detach()
        backward(loss)
        records.append({"length_idx": i, "loss": float(loss.data), "acc": acc})
    opt.step()
    return records


def make_replicas(model: ReViT, k: int | None = None) -> list[ReViT]:
    """Main model plus per-length copies; index 0 is the main (teacher) replica."""
    k = k if k is not None else model.k
    return [model] + [ReViT(model.cfg, store=model.store.copy()) for _ in range(k - 1)]


def _assert_replicas_identical(replicas: list[ReViT]) -> None:
    main = replicas[0].store
    for r, rep in enumerate(replicas[1:], start=1):
        for name, p in main.items():
            if not np.array_equal(p.data, rep.store[name].data):
                raise ConsistencyError(f"replica {r} diverged from main at '{name}'")


def parallel_train_step(replicas: list[ReViT], images, labels, plan: TrainPlan,
                        opt: AdamW, epoch: int = 0, step: int = 0) -> list[dict]:
    """Fig.-4 step: concurrent per-length backwards on replicas, ascending
    gradient reduction onto the main replica, one update, then broadcast."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("parallel_train_step requires a non-empty batch")
    k = len(replicas)
    if k != replicas[0].k:
        raise ValueError(f"need one replica per token length ({replicas[0].k}), got {k}")
    if debug_checks_enabled():
        _assert_replicas_identical(replicas)

    opt.zero_grad()
    for rep in replicas[1:]:
        for p in rep.store.params.values():
            p.grad = None

    teacher_box: dict = {}
    teacher_ready = threading.Event()

    def work(i: int) -> dict:
        rng = _step_rng(plan, epoch, step, i)
        if i == 0:
            try:
                loss, logits, acc = _length_loss(replicas[0], images, labels, 0, None, plan, rng)
                teacher_box["logits"] = logits.detach()
            except BaseException as exc:
                teacher_box["error"] = exc
                raise
            finally:
                teacher_ready.set()
        else:
            if plan.self_distill:
                teacher_ready.wait()
                if "error" in teacher_box:
                    raise RuntimeError("teacher forward failed") from teacher_box["error"]
            loss, logits, acc = _length_loss(replicas[i], images, labels, i,
                                             teacher_box.get("logits"), plan, rng)
        backward(loss)
        return {"length_idx": i, "loss": float(loss.data), "acc": acc}

    cap = int(os.environ.get(THREADS_ENV, k) or k)
    with ThreadPoolExecutor(max_workers=max(1, min(k, cap))) as pool:
        futures = [pool.submit(work, i) for i in range(k)]
        records = [f.result() for f in futures]

    main = replicas[0].store
    for i in range(1, k):  # fixed ascending reduction order
        for name, p in replicas[i].store.items():
            if p.grad is not None:
                main[name].grad += p.grad
    opt.step()
    for rep in replicas[1:]:
        for name, p in rep.store.items():
            p.data[...] = main[name].data
            p.grad = None
    return records


@dataclass
class LogRow:
    epoch: int
    step: int
    length_idx: int
    loss: float
    acc: float
    wall_ms: float


class TrainLog:
    """Per-epoch, per-length training rows."""

    COLUMNS = ("epoch", "step", "length_idx", "loss", "acc", "wall_ms")

    def __init__(self):
        self.rows: list[LogRow] = []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, r.step, r.length_idx, f"{r.loss:.6g}", f"{r.acc:.6g}", f"{r.wall_ms:.6g}"])

    def values(self) -> list[tuple]:
        """Rows without the timing column (the deterministic part)."""
        return [(r.epoch, r.step, r.length_idx, round(r.loss, 10), round(r.acc, 10)) for r in self.rows]


def train(model: ReViT, dataset, plan: TrainPlan, verbose: bool = False) -> TrainLog:
    """Epochs x batches of mixed (or replica-parallel) steps.

    Deterministic under a fixed plan seed: data order, parameter init,
    and dropout draws are all derived from it. Wall-clock columns are the
    one exception.
    """
    if len(dataset) == 0:
        raise ValueError("train requires a non-empty dataset")
    if model.k < 2:
        raise ValueError("schedule must hold at least 2 token lengths")
    opt = AdamW(model.store.params, lr=plan.lr, betas=plan.betas, eps=plan.eps,
                weight_decay=plan.weight_decay)
    replicas = make_replicas(model) if plan.parallel else None
    log = TrainLog()
    gstep = 0
    for epoch in range(plan.epochs):
        order = np.random.default_rng(np.random.SeedSequence([plan.seed, 0xDA7A, epoch])).permutation(len(dataset))
        sums = np.zeros(model.k)
        hits = np.zeros(model.k)
        batches = 0
        t0 = time.perf_counter()
        for lo in range(0, len(order), plan.batch_size):
            idx = order[lo:lo + plan.batch_size]
            images = dataset.images[idx]
            labels = dataset.labels[idx]
            if plan.parallel:
                records = parallel_train_step(replicas, images, labels, plan, opt, epoch, gstep)
            else:
                records = mixed_token_train_step(model, images, labels, plan, opt, epoch, gstep)
            for r in records:
                sums[r["length_idx"]] += r["loss"]
                hits[r["length_idx"]] += r["acc"]
            batches += 1
            gstep += 1
        wall_ms = (time.perf_counter() - t0) * 1e3
        for i in range(model.k):
            log.rows.append(LogRow(epoch, gstep, i, sums[i] / batches, hits[i] / batches, wall_ms))
        if verbose:
            losses = " ".join(f"L{i}={sums[i] / batches:.4f}" for i in range(model.k))
            print(f"epoch {epoch}: {losses} ({wall_ms:.0f} ms)")
    return log
