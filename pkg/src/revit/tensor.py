"""Reverse-mode autodiff on dense numpy arrays.

Values are float32 by default; float64 is reserved for oracle and
equivalence runs. Gradients accumulate into leaf tensors: running
backward twice on the same loss doubles every leaf gradient, which is
exactly what mixed token-length gradient accumulation relies on.
Forward ops never mutate their inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DEBUG = False

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

KL_CLAMP = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf output checks and distribution validation."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG


@contextmanager
def debug_checks(enabled: bool = True):
    prev = _DEBUG
    set_debug_checks(enabled)
    try:
        yield
    finally:
        set_debug_checks(prev)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense n-d float array with an optional same-shape gradient buffer.

    Leaf tensors (no parents) with ``requires_grad`` receive gradients
    from ``backward``; op results carry closures that route gradients to
    their parents. ``grad`` stays ``None`` until a backward pass reaches
    the leaf, and then accumulates across passes until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("op produced NaN/Inf on finite inputs")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Op nodes of one computation graph in topological order (inputs first).

    A backward pass walks ``nodes`` in reverse and visits each op exactly
    once; leaves are not recorded, they only receive gradient.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._parents is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into leaf ``grad``s."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._parents is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += seed
        return
    tape = Tape(loss)
    flowing: dict[int, np.ndarray] = {id(loss): seed}
    # leaves collect their full per-pass total first and receive a single
    # `grad +=` per pass, so repeated passes accumulate exactly
    leaf_totals: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._parents is None:
                entry = leaf_totals.get(id(parent))
                leaf_totals[id(parent)] = (parent, pg if entry is None else entry[1] + pg)
            else:
                prev = flowing.get(id(parent))
                flowing[id(parent)] = pg if prev is None else prev + pg
    for leaf, total in leaf_totals.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += total


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _from_op(-a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _from_op(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _from_op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _from_op(a.data.transpose(axes), (a,), bwd)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; each output element maps to one input."""
    data = a.data[key]
    if data.base is not None:
        data = data.copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _from_op(data, (a,), bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(data, tuple(parts), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _from_op(data, (a,), bwd)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    data = np.pad(a.data, width)
    key = (Ellipsis, slice(pad, pad + a.shape[-2]), slice(pad, pad + a.shape[-1]))

    def bwd(g):
        return (g[key],)

    return _from_op(data, (a,), bwd)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape).astype(a.dtype, copy=False),)

    return _from_op(data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.shape).astype(a.dtype, copy=False),)

    return _from_op(data, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _from_op(data.astype(a.dtype, copy=False), (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with biased variance, then scale and shift."""
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, gg, gb

    return _from_op(data, (x, gamma, beta), bwd)


def softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Stable softmax of z/temperature; rows on ``axis`` sum to one."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    s = z.data / np.asarray(temperature, dtype=z.dtype)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner) / np.asarray(temperature, dtype=z.dtype),)

    return _from_op(y, (z,), bwd)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target].

    ``weights`` optionally reweights classes (normalized by the summed
    weight of the batch, so uniform weights reproduce the plain mean).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, c = logits.shape
    t = np.asarray(targets)
    if t.shape != (b,):
        raise DimensionError(f"cross_entropy targets must have shape ({b},), got {t.shape}")
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"cross_entropy target out of range [0, {c})")
    sh = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sh).sum(axis=1, keepdims=True))
    logp = sh - lse
    rows = np.arange(b)
    if weights is None:
        w = np.ones(b, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)[t]
    wsum = w.sum()
    data = np.asarray(-(w * logp[rows, t]).sum() / wsum, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g * w / wsum)[:, None],)

    return _from_op(data, (logits,), bwd)


def kl_divergence(p_target: Tensor, q_model: Tensor) -> Tensor:
    """Mean over batch rows of sum(p * log(p / q)); p == 0 terms contribute 0.

    Both arguments must be probability rows. q is clamped below at
    ``KL_CLAMP`` before the log.
    """
    if p_target.shape != q_model.shape or p_target.ndim != 2:
        raise DimensionError(
            f"kl_divergence expects matching [batch, classes] rows, got {p_target.shape} and {q_model.shape}"
        )
    if _DEBUG:
        for name, t in (("p_target", p_target), ("q_model", q_model)):
            if np.any(t.data < 0) or not np.allclose(t.data.sum(axis=1), 1.0, atol=1e-5):
                raise ValueError(f"kl_divergence: {name} rows are not probability distributions")
    b = p_target.shape[0]
    p = p_target.data
    qc = np.maximum(q_model.data, KL_CLAMP)
    pos = p > 0
    terms = np.where(pos, p * (np.log(np.maximum(p, KL_CLAMP)) - np.log(qc)), 0.0)
    data = np.asarray(terms.sum() / b, dtype=p_target.dtype)

    def bwd(g):
        gp = gq = None
        if p_target.requires_grad:
            gp = np.where(pos, np.log(np.maximum(p, KL_CLAMP)) - np.log(qc) + 1.0, 0.0) * (g / b)
            gp = gp.astype(p_target.dtype, copy=False)
        if q_model.requires_grad:
            live = q_model.data > KL_CLAMP
            gq = np.where(pos & live, -p / qc, 0.0) * (g / b)
            gq = gq.astype(q_model.dtype, copy=False)
        return gp, gq

    return _from_op(data, (p_target, q_model), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, dtype=a.dtype)

    def bwd(g):
        return (g * keep,)

    return _from_op(a.data * keep, (a,), bwd)
