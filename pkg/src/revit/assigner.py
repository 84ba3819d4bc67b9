"""Token-Length Assigner: a small conv net routing images to lengths.

Two 3x3 stride-2 convolutions with GELU, global average pooling, and a
linear head over the schedule indices. Deliberately tiny: its analytic
FLOPs must stay a small fraction of the transformer's largest-length
cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TLAPlan
from .labeling import LabelSet
from .optim import AdamW
from .tensor import (
    DimensionError,
    Tensor,
    backward,
    concat,
    cross_entropy,
    gelu,
    index,
    matmul,
    mean,
    pad2d,
    reshape,
    transpose,
)

CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PAD = 1


def _conv_out(size: int) -> int:
    return (size + 2 * CONV_PAD - CONV_KERNEL) // CONV_STRIDE + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 stride-2 convolution via shifted strided slices + matmul.

    weight is [kh, kw, c_in, c_out]; the slice concat order matches its
    (kh, kw, c_in) flattening.
    """
    b, c, h, w = x.shape
    oh, ow = _conv_out(h), _conv_out(w)
    xp = pad2d(x, CONV_PAD)
    cols = []
    for kh in range(CONV_KERNEL):
        for kw in range(CONV_KERNEL):
            cols.append(index(xp, (slice(None), slice(None),
                                   slice(kh, kh + CONV_STRIDE * oh - 1, CONV_STRIDE),
                                   slice(kw, kw + CONV_STRIDE * ow - 1, CONV_STRIDE))))
    stacked = concat(cols, axis=1)  # [b, 9c, oh, ow]
    stacked = reshape(transpose(stacked, (0, 2, 3, 1)), (b, oh * ow, CONV_KERNEL * CONV_KERNEL * c))
    out = matmul(stacked, reshape(weight, (CONV_KERNEL * CONV_KERNEL * c, weight.shape[-1]))) + bias
    return transpose(reshape(out, (b, oh, ow, weight.shape[-1])), (0, 3, 1, 2))


class TokenLengthAssigner:
    def __init__(self, image_size: int, channels: int, num_lengths: int,
                 conv_channels: tuple[int, int] = (16, 32), dtype=np.float32, seed: int = 0):
        if num_lengths < 2:
            raise ValueError(f"assigner needs at least 2 length classes, got {num_lengths}")
        self.image_size = image_size
        self.channels = channels
        self.num_lengths = num_lengths
        self.conv_channels = tuple(conv_channels)
        self.dtype = np.dtype(dtype)
        c1, c2 = self.conv_channels
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x71A]))
        kk = CONV_KERNEL * CONV_KERNEL

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)

        self.params: dict[str, Tensor] = {
            "conv1.weight": Tensor(he((CONV_KERNEL, CONV_KERNEL, channels, c1), kk * channels), requires_grad=True),
            "conv1.bias": Tensor(np.zeros(c1, dtype=self.dtype), requires_grad=True),
            "conv2.weight": Tensor(he((CONV_KERNEL, CONV_KERNEL, c1, c2), kk * c1), requires_grad=True),
            "conv2.bias": Tensor(np.zeros(c2, dtype=self.dtype), requires_grad=True),
            "head.weight": Tensor(he((c2, num_lengths), c2), requires_grad=True),
            "head.bias": Tensor(np.zeros(num_lengths, dtype=self.dtype), requires_grad=True),
        }

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (self.channels, self.image_size, self.image_size):
            raise DimensionError(
                f"expected images [b,{self.channels},{self.image_size},{self.image_size}], got {x.shape}"
            )
        x = gelu(conv2d(x, self.params["conv1.weight"], self.params["conv1.bias"]))
        x = gelu(conv2d(x, self.params["conv2.weight"], self.params["conv2.bias"]))
        pooled = mean(x, axis=(2, 3))
        return matmul(pooled, self.params["head.weight"]) + self.params["head.bias"]

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        if set(tensors) != set(self.params):
            raise ValueError("assigner checkpoint does not match its parameter set")
        for name, arr in tensors.items():
            p = self.params[name]
            if np.asarray(arr).shape != p.data.shape:
                raise ValueError(f"tensor '{name}' shape {np.asarray(arr).shape} != expected {p.data.shape}")
            p.data = np.asarray(arr, dtype=self.dtype)
            p.grad = None


def assign(tla: TokenLengthAssigner, images) -> np.ndarray:
    """Length index per image: argmax of the logits, ties to the smaller
    index (larger token count, the safer prediction)."""
    logits = tla.forward(images).data
    return np.argmax(logits, axis=1)  # np.argmax keeps the first (smallest) index on ties


def tla_count_flops(tla: TokenLengthAssigner) -> int:
    """Analytic FLOPs of one assignment, same accounting style as the model."""
    c1, c2 = tla.conv_channels
    kk = CONV_KERNEL * CONV_KERNEL
    s1 = _conv_out(tla.image_size)
    s2 = _conv_out(s1)
    conv1 = 2 * s1 * s1 * (kk * tla.channels) * c1
    conv2 = 2 * s2 * s2 * (kk * c1) * c2
    head = 2 * c2 * tla.num_lengths
    return conv1 + conv2 + head


@dataclass
class TLAReport:
    train_accuracy: float
    confusion: np.ndarray  # [true k, predicted k]
    precision: np.ndarray
    recall: np.ndarray
    epoch_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_accuracy": self.train_accuracy,
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "epoch_accuracy": self.epoch_accuracy,
        }


def _confusion(true: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


def train_tla(tla: TokenLengthAssigner, labelset: LabelSet, dataset,
              plan: TLAPlan) -> TLAReport:
    """Cross-entropy training of the assigner on (image, length label) pairs."""
    if len(labelset) == 0:
        raise ValueError("train_tla requires a non-empty label set")
    id_to_row = {int(sid): r for r, sid in enumerate(dataset.ids)}
    try:
        rows = np.array([id_to_row[e.sample_id] for e in labelset.entries])
    except KeyError as exc:
        raise ValueError(f"label set references sample id {exc} missing from the dataset") from exc
    targets = labelset.labels()
    k = tla.num_lengths

    weights = None
    if plan.class_weights:
        counts = np.bincount(targets, minlength=k).astype(np.float64)
        weights = len(targets) / (k * np.maximum(counts, 1.0))

    opt = AdamW(tla.params, lr=plan.lr, weight_decay=plan.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 0x71A1]))
    epoch_accuracy = []
    for _ in range(plan.epochs):
        order = rng.permutation(len(rows))
        hit = 0
        for lo in range(0, len(order), plan.batch_size):
            idx = order[lo:lo + plan.batch_size]
            images = dataset.images[rows[idx]]
            t = targets[idx]
            opt.zero_grad()
            logits = tla.forward(images)
            loss = cross_entropy(logits, t, weights=weights)
            backward(loss)
            opt.step()
            hit += int((np.argmax(logits.data, axis=1) == t).sum())
        epoch_accuracy.append(hit / len(order))

    pred = np.concatenate([
        assign(tla, dataset.images[rows[lo:lo + plan.batch_size]])
        for lo in range(0, len(rows), plan.batch_size)
    ])
    confusion = _confusion(targets, pred, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(confusion.sum(0) > 0, np.diag(confusion) / confusion.sum(0), 0.0)
        recall = np.where(confusion.sum(1) > 0, np.diag(confusion) / confusion.sum(1), 0.0)
    return TLAReport(float(np.mean(pred == targets)), confusion, precision, recall, epoch_accuracy)
