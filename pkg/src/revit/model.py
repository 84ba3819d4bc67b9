"""Resizable vision transformer: one trunk, per-length parameter banks.

Every token length in the schedule gets its own patch embedding,
positional table, and LayerNorm parameters at every normalization site;
attention/MLP weights, the class and distillation tokens, and both heads
are shared. Positional tables reserve two leading slots (class token,
distillation token) for every length; the teacher never reads its
distillation slot.
"""

from __future__ import annotations

import numpy as np

from .config import ReViTConfig
from .tensor import (
    DimensionError,
    Tensor,
    broadcast_to,
    concat,
    dropout,
    gelu,
    index,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-5
SPECIAL_SLOTS = 2  # class slot + distillation slot in every positional table


class ParamStore:
    """Named parameter tensors for one ReViT, in a fixed creation order."""

    def __init__(self, cfg: ReViTConfig, dtype=np.float32, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        d = cfg.embed_dim

        def normal(name, shape, std=0.02):
            self._add(name, rng.normal(0.0, std, size=shape))

        normal("cls_token", (d,))
        normal("distill_token", (d,))

        if cfg.share_patch_embed:
            pmax = max(cfg.patch_size(i) for i in range(cfg.schedule.k))
            normal("patch_embed.shared.weight", (pmax, pmax, cfg.channels, d))
            self._add("patch_embed.shared.bias", np.zeros(d))
        else:
            for i in range(cfg.schedule.k):
                p = cfg.patch_size(i)
                normal(f"patch_embed.{i}.weight", (p * p * cfg.channels, d))
                self._add(f"patch_embed.{i}.bias", np.zeros(d))

        if cfg.share_pos_embed:
            normal("pos_embed.shared", (SPECIAL_SLOTS + cfg.schedule.token_counts[0], d))
        else:
            for i, n in enumerate(cfg.schedule.token_counts):
                normal(f"pos_embed.{i}", (SPECIAL_SLOTS + n, d))

        for b in range(cfg.depth):
            for site in ("ln1", "ln2"):
                for i in range(cfg.schedule.k):
                    self._add(f"blocks.{b}.{site}.{i}.gamma", np.ones(d))
                    self._add(f"blocks.{b}.{site}.{i}.beta", np.zeros(d))
            normal(f"blocks.{b}.attn.qkv.weight", (d, 3 * d))
            self._add(f"blocks.{b}.attn.qkv.bias", np.zeros(3 * d))
            normal(f"blocks.{b}.attn.proj.weight", (d, d))
            self._add(f"blocks.{b}.attn.proj.bias", np.zeros(d))
            normal(f"blocks.{b}.mlp.fc1.weight", (d, cfg.hidden_dim))
            self._add(f"blocks.{b}.mlp.fc1.bias", np.zeros(cfg.hidden_dim))
            normal(f"blocks.{b}.mlp.fc2.weight", (cfg.hidden_dim, d))
            self._add(f"blocks.{b}.mlp.fc2.bias", np.zeros(d))

        for i in range(cfg.schedule.k):
            self._add(f"final_ln.{i}.gamma", np.ones(d))
            self._add(f"final_ln.{i}.beta", np.zeros(d))

        normal("head.weight", (d, cfg.num_classes))
        self._add("head.bias", np.zeros(cfg.num_classes))
        normal("distill_head.weight", (d, cfg.num_classes))
        self._add("distill_head.bias", np.zeros(cfg.num_classes))

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array.astype(self.dtype), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def copy(self) -> "ParamStore":
        """Deep copy of the parameter data; gradients start empty."""
        dup = object.__new__(ParamStore)
        dup.cfg = self.cfg
        dup.dtype = self.dtype
        dup.params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        return dup

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        if set(tensors) != set(self.params):
            missing = sorted(set(self.params) - set(tensors))
            extra = sorted(set(tensors) - set(self.params))
            raise ValueError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, arr in tensors.items():
            p = self.params[name]
            arr = np.asarray(arr)
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor '{name}' shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(self.dtype)
            p.grad = None

    def validate(self) -> None:
        cfg = self.cfg
        for b in range(cfg.depth):
            for site in ("ln1", "ln2"):
                banks = [n for n in self.params if n.startswith(f"blocks.{b}.{site}.")]
                if len(banks) != 2 * cfg.schedule.k:
                    raise AssertionError(f"block {b} {site}: expected one LN bank per length")
        if not cfg.share_pos_embed:
            for i, n in enumerate(cfg.schedule.token_counts):
                if self.params[f"pos_embed.{i}"].shape != (SPECIAL_SLOTS + n, cfg.embed_dim):
                    raise AssertionError(f"pos_embed.{i} has wrong length")
        shared = [n for n in self.params if ".attn." in n or ".mlp." in n]
        if len(shared) != 8 * cfg.depth:
            raise AssertionError("shared trunk tensors must appear exactly once")


class ReViT:
    """The resizable transformer; forward paths select a schedule index."""

    def __init__(self, cfg: ReViTConfig, store: ParamStore | None = None,
                 dtype=np.float32, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(cfg, dtype=dtype, seed=seed)

    @property
    def k(self) -> int:
        return self.cfg.schedule.k

    def _check_length(self, length_idx: int) -> None:
        if not 0 <= length_idx < self.k:
            raise IndexError(f"length_idx {length_idx} out of range [0, {self.k})")

    def _patch_bank(self, length_idx: int) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if not cfg.share_patch_embed:
            return self.store[f"patch_embed.{length_idx}.weight"], self.store[f"patch_embed.{length_idx}.bias"]
        kernel = self.store["patch_embed.shared.weight"]
        p = cfg.patch_size(length_idx)
        off = (kernel.shape[0] - p) // 2
        cropped = index(kernel, (slice(off, off + p), slice(off, off + p)))
        return reshape(cropped, (p * p * cfg.channels, cfg.embed_dim)), self.store["patch_embed.shared.bias"]

    def _pos_bank(self, length_idx: int) -> Tensor:
        if self.cfg.share_pos_embed:
            n = self.cfg.schedule.token_counts[length_idx]
            return index(self.store["pos_embed.shared"], slice(0, SPECIAL_SLOTS + n))
        return self.store[f"pos_embed.{length_idx}"]

    def _as_batched_images(self, images) -> Tensor:
        t = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.store.dtype))
        if t.ndim == 3:
            t = reshape(t, (1,) + t.shape)
        cfg = self.cfg
        if t.ndim != 4 or t.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected images [b,{cfg.channels},{cfg.image_size},{cfg.image_size}], got {t.shape}"
            )
        return t

    def patch_embed(self, images, length_idx: int) -> Tensor:
        """Split images into non-overlapping patches and project with bank i."""
        self._check_length(length_idx)
        x = self._as_batched_images(images)
        cfg = self.cfg
        rows, cols = cfg.schedule.grids[length_idx]
        p = cfg.patch_size(length_idx)
        b = x.shape[0]
        x = reshape(x, (b, cfg.channels, rows, p, cols, p))
        x = transpose(x, (0, 2, 4, 3, 5, 1))  # [b, rows, cols, p, p, c]
        patches = reshape(x, (b, rows * cols, p * p * cfg.channels))
        weight, bias = self._patch_bank(length_idx)
        return matmul(patches, weight) + bias

    def assemble_sequence(self, tokens: Tensor, length_idx: int, with_distill: bool) -> Tensor:
        """Prepend special tokens and add the positional table for length i."""
        self._check_length(length_idx)
        b, n, d = tokens.shape
        cls = broadcast_to(reshape(self.store["cls_token"], (1, 1, d)), (b, 1, d))
        parts = [cls]
        if with_distill:
            parts.append(broadcast_to(reshape(self.store["distill_token"], (1, 1, d)), (b, 1, d)))
        parts.append(tokens)
        seq = concat(parts, axis=1)
        pos = self._pos_bank(length_idx)
        if with_distill:
            pos_used = index(pos, slice(0, SPECIAL_SLOTS + n))
        else:
            pos_used = concat([index(pos, slice(0, 1)), index(pos, slice(SPECIAL_SLOTS, SPECIAL_SLOTS + n))], axis=0)
        s = SPECIAL_SLOTS if with_distill else 1
        return seq + reshape(pos_used, (1, n + s, d))

    def _attention(self, h: Tensor, block: int) -> Tensor:
        cfg = self.cfg
        b, n, d = h.shape
        qkv = matmul(h, self.store[f"blocks.{block}.attn.qkv.weight"]) + self.store[f"blocks.{block}.attn.qkv.bias"]
        q = index(qkv, (slice(None), slice(None), slice(0, d)))
        k = index(qkv, (slice(None), slice(None), slice(d, 2 * d)))
        v = index(qkv, (slice(None), slice(None), slice(2 * d, 3 * d)))

        def heads(t):
            return transpose(reshape(t, (b, n, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(cfg.head_dim))
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
        return matmul(out, self.store[f"blocks.{block}.attn.proj.weight"]) + self.store[f"blocks.{block}.attn.proj.bias"]

    def encoder_forward(self, seq: Tensor, length_idx: int, train: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Pre-LN transformer trunk; every LN reads bank[length_idx]."""
        self._check_length(length_idx)
        cfg = self.cfg
        x = seq
        drop = cfg.dropout if train else 0.0
        if drop and rng is not None:
            x = dropout(x, drop, rng)
        for b in range(cfg.depth):
            h = layer_norm(x, self.store[f"blocks.{b}.ln1.{length_idx}.gamma"],
                           self.store[f"blocks.{b}.ln1.{length_idx}.beta"], LN_EPS)
            a = self._attention(h, b)
            if drop and rng is not None:
                a = dropout(a, drop, rng)
            x = x + a
            h = layer_norm(x, self.store[f"blocks.{b}.ln2.{length_idx}.gamma"],
                           self.store[f"blocks.{b}.ln2.{length_idx}.beta"], LN_EPS)
            m = matmul(h, self.store[f"blocks.{b}.mlp.fc1.weight"]) + self.store[f"blocks.{b}.mlp.fc1.bias"]
            m = matmul(gelu(m), self.store[f"blocks.{b}.mlp.fc2.weight"]) + self.store[f"blocks.{b}.mlp.fc2.bias"]
            if drop and rng is not None:
                m = dropout(m, drop, rng)
            x = x + m
        return layer_norm(x, self.store[f"final_ln.{length_idx}.gamma"],
                          self.store[f"final_ln.{length_idx}.beta"], LN_EPS)

    def forward(self, images, length_idx: int, with_distill: bool = False,
                train: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor | None]:
        """Classify at schedule index i; returns (class_logits, distill_logits?)."""
        tokens = self.patch_embed(images, length_idx)
        seq = self.assemble_sequence(tokens, length_idx, with_distill)
        enc = self.encoder_forward(seq, length_idx, train=train, rng=rng)
        cls_out = index(enc, (slice(None), 0))
        class_logits = matmul(cls_out, self.store["head.weight"]) + self.store["head.bias"]
        distill_logits = None
        if with_distill:
            dst_out = index(enc, (slice(None), 1))
            distill_logits = matmul(dst_out, self.store["distill_head.weight"]) + self.store["distill_head.bias"]
        return class_logits, distill_logits

    def predict(self, images, length_idx: int) -> np.ndarray:
        logits, _ = self.forward(images, length_idx, with_distill=False)
        return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# analytic FLOPs accounting (exact integer arithmetic)
# ---------------------------------------------------------------------------


def flops_terms(cfg: ReViTConfig, length_idx: int, with_distill: bool = False) -> dict[str, int]:
    """Per-component FLOPs for one image at schedule index i.

    The attention score term (4*n^2*d per block) is the quadratic-in-n
    component; everything else is linear in the sequence length n.
    """
    if not 0 <= length_idx < cfg.schedule.k:
        raise IndexError(f"length_idx {length_idx} out of range [0, {cfg.schedule.k})")
    d = int(cfg.embed_dim)
    c = int(cfg.channels)
    p = int(cfg.patch_size(length_idx))
    n_patch = int(cfg.schedule.token_counts[length_idx])
    n = n_patch + (2 if with_distill else 1)
    heads = 2 if with_distill else 1
    return {
        "patch": 2 * n_patch * (p * p * c) * d,
        "attn_linear": cfg.depth * 8 * n * d * d,
        "attn_score": cfg.depth * 4 * n * n * d,
        "mlp": cfg.depth * 4 * n * d * d * int(cfg.mlp_ratio),
        "head": heads * 2 * d * int(cfg.num_classes),
    }


def count_flops(cfg: ReViTConfig, length_idx: int, with_distill: bool = False) -> int:
    return sum(flops_terms(cfg, length_idx, with_distill).values())
