import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import revit.tensor as T
from revit.tensor import (
    DimensionError,
    Tensor,
    Tape,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    debug_checks,
    dropout,
    gelu,
    index,
    kl_divergence,
    layer_norm,
    matmul,
    mean,
    mul,
    pad2d,
    parameter,
    reshape,
    softmax,
    transpose,
    tsum,
)

from oracles import (
    cross_entropy_direct,
    finite_diff,
    gelu_direct,
    kl_direct,
    naive_matmul,
    rel_err,
    softmax_rows,
)


def grad_check(build, n_inputs, seed, dtype, h, tol, coords_per_input=6):
    """FD-check gradients of a scalar graph against the engine.

    ``build(rng, dtype)`` returns (input_tensors, fn) where fn() rebuilds
    the scalar loss from the tensors' current data.
    """
    rng = np.random.default_rng(seed)
    tensors, fn = build(rng, dtype)
    assert len(tensors) == n_inputs
    saved = [t.data.copy() for t in tensors]
    loss = fn()
    for t in tensors:
        t.grad = None
    backward(loss)
    for t, before in zip(tensors, saved):
        np.testing.assert_array_equal(t.data, before)  # forward never mutates inputs
        assert t.grad is not None and t.grad.shape == t.data.shape
        k = min(coords_per_input, t.size)
        coords = rng.choice(t.size, size=k, replace=False)
        num = finite_diff(lambda: float(fn().data), t.data, coords, h)
        ana = t.grad.reshape(-1)[coords]
        assert rel_err(ana, num) < tol, f"grad mismatch: {ana} vs {num}"


def _project(out: Tensor, rng) -> Tensor:
    r = Tensor(np.asarray(rng.normal(size=out.shape), dtype=out.dtype))
    return tsum(mul(out, r))


def _case_add(rng, dtype):
    a = parameter(rng.normal(size=(3, 4)), dtype=dtype)
    b = parameter(rng.normal(size=(4,)), dtype=dtype)
    return [a, b], lambda: _project(a + b, np.random.default_rng(0))


def _case_mul(rng, dtype):
    a = parameter(rng.normal(size=(2, 3, 4)), dtype=dtype)
    b = parameter(rng.normal(size=(1, 4)), dtype=dtype)
    return [a, b], lambda: _project(mul(a, b), np.random.default_rng(0))


def _case_neg(rng, dtype):
    a = parameter(rng.normal(size=(5,)), dtype=dtype)
    return [a], lambda: _project(-a, np.random.default_rng(0))


def _case_matmul(rng, dtype):
    a = parameter(rng.normal(size=(4, 5)), dtype=dtype)
    b = parameter(rng.normal(size=(5, 3)), dtype=dtype)
    return [a, b], lambda: _project(matmul(a, b), np.random.default_rng(0))


def _case_matmul_batched(rng, dtype):
    a = parameter(rng.normal(size=(2, 3, 4, 5)), dtype=dtype)
    b = parameter(rng.normal(size=(5, 6)), dtype=dtype)
    return [a, b], lambda: _project(matmul(a, b), np.random.default_rng(0))


def _case_reshape(rng, dtype):
    a = parameter(rng.normal(size=(2, 6)), dtype=dtype)
    return [a], lambda: _project(reshape(a, (3, 4)), np.random.default_rng(0))


def _case_transpose(rng, dtype):
    a = parameter(rng.normal(size=(2, 3, 4)), dtype=dtype)
    return [a], lambda: _project(transpose(a, (2, 0, 1)), np.random.default_rng(0))


def _case_index(rng, dtype):
    a = parameter(rng.normal(size=(4, 6)), dtype=dtype)
    key = (slice(1, 3), slice(0, 5, 2))
    return [a], lambda: _project(index(a, key), np.random.default_rng(0))


def _case_concat(rng, dtype):
    ts = [parameter(rng.normal(size=(2, n)), dtype=dtype) for n in (1, 2, 3)]
    return ts, lambda: _project(concat(ts, axis=1), np.random.default_rng(0))


def _case_broadcast(rng, dtype):
    a = parameter(rng.normal(size=(1, 4)), dtype=dtype)
    return [a], lambda: _project(broadcast_to(a, (3, 4)), np.random.default_rng(0))


def _case_pad2d(rng, dtype):
    a = parameter(rng.normal(size=(2, 1, 3, 3)), dtype=dtype)
    return [a], lambda: _project(pad2d(a, 1), np.random.default_rng(0))


def _case_sum(rng, dtype):
    a = parameter(rng.normal(size=(3, 4, 2)), dtype=dtype)
    return [a], lambda: _project(tsum(a, axis=(0, 2)), np.random.default_rng(0))


def _case_mean(rng, dtype):
    a = parameter(rng.normal(size=(3, 4, 2)), dtype=dtype)
    return [a], lambda: _project(mean(a, axis=(1,), keepdims=True), np.random.default_rng(0))


def _case_gelu(rng, dtype):
    a = parameter(rng.normal(size=(7,)), dtype=dtype)
    return [a], lambda: _project(gelu(a), np.random.default_rng(0))


def _case_layer_norm(rng, dtype):
    x = parameter(rng.normal(size=(2, 6)), dtype=dtype)
    g = parameter(rng.normal(size=(6,)) + 1.0, dtype=dtype)
    b = parameter(rng.normal(size=(6,)), dtype=dtype)
    return [x, g, b], lambda: _project(layer_norm(x, g, b, 1e-5), np.random.default_rng(0))


def _case_softmax(rng, dtype):
    z = parameter(rng.normal(size=(3, 5)), dtype=dtype)
    return [z], lambda: _project(softmax(z, temperature=2.0), np.random.default_rng(0))


def _case_cross_entropy(rng, dtype):
    z = parameter(rng.normal(size=(4, 5)), dtype=dtype)
    t = np.array([0, 3, 1, 4])
    return [z], lambda: cross_entropy(z, t)


def _case_cross_entropy_weighted(rng, dtype):
    z = parameter(rng.normal(size=(4, 5)), dtype=dtype)
    t = np.array([0, 3, 1, 4])
    w = np.array([1.0, 2.0, 0.5, 1.5, 1.0])
    return [z], lambda: cross_entropy(z, t, weights=w)


def _case_kl(rng, dtype):
    a = parameter(rng.normal(size=(3, 4)), dtype=dtype)
    b = parameter(rng.normal(size=(3, 4)), dtype=dtype)
    return [a, b], lambda: kl_divergence(softmax(a), softmax(b))


def _case_dropout(rng, dtype):
    a = parameter(rng.normal(size=(4, 5)), dtype=dtype)
    return [a], lambda: _project(dropout(a, 0.3, np.random.default_rng(11)), np.random.default_rng(0))


DIFFERENTIABLE_OPS = {
    "add": (_case_add, 2),
    "mul": (_case_mul, 2),
    "neg": (_case_neg, 1),
    "matmul": (_case_matmul, 2),
    "matmul_batched": (_case_matmul_batched, 2),
    "reshape": (_case_reshape, 1),
    "transpose": (_case_transpose, 1),
    "index": (_case_index, 1),
    "concat": (_case_concat, 3),
    "broadcast_to": (_case_broadcast, 1),
    "pad2d": (_case_pad2d, 1),
    "sum": (_case_sum, 1),
    "mean": (_case_mean, 1),
    "gelu": (_case_gelu, 1),
    "layer_norm": (_case_layer_norm, 3),
    "softmax": (_case_softmax, 1),
    "cross_entropy": (_case_cross_entropy, 1),
    "cross_entropy_weighted": (_case_cross_entropy_weighted, 1),
    "kl_divergence": (_case_kl, 2),
    "dropout": (_case_dropout, 1),
}

GRAD_SEEDS = (101, 202, 303)


@pytest.mark.parametrize("name", sorted(DIFFERENTIABLE_OPS))
@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grads_float32(name, seed):
    build, n = DIFFERENTIABLE_OPS[name]
    grad_check(build, n, seed, np.float32, h=1e-2, tol=1e-3)


@pytest.mark.parametrize("name", sorted(DIFFERENTIABLE_OPS))
@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grads_float64(name, seed):
    build, n = DIFFERENTIABLE_OPS[name]
    grad_check(build, n, seed, np.float64, h=1e-5, tol=1e-6)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    out = matmul(a, Tensor(np.eye(4, dtype=np.float32)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_zeros():
    rng = np.random.default_rng(1)
    out = matmul(Tensor(np.zeros((3, 5), dtype=np.float32)), Tensor(rng.normal(size=(5, 2)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2), dtype=np.float32))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(8, 8))
    b = rng.normal(size=(8, 8))
    ours = matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    assert np.max(np.abs(ours - naive_matmul(a, b))) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(a, b)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_maps_to_beta():
    x = Tensor(np.array([[1.0, 1.0]], dtype=np.float32))
    out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 2), dtype=np.float32))
    beta = Tensor(np.array([3.0, -1.0]))
    out = layer_norm(x, Tensor(np.ones(2)), beta, 1e-5)
    np.testing.assert_allclose(out.data, [[3.0, -1.0]], atol=0)


def test_layer_norm_two_point_analytic():
    # x=[1,3]: mean 2, biased var 1 -> eps=0 limit is [-1, 1]
    x = Tensor(np.array([[1.0, 3.0]]), dtype=np.float64)
    out = layer_norm(x, Tensor(np.ones(2), dtype=np.float64), Tensor(np.zeros(2), dtype=np.float64), 1e-5)
    assert np.max(np.abs(out.data - np.array([[-1.0, 1.0]]))) < 1e-5


def test_layer_norm_rejects_bad_eps_and_shapes():
    x = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)
    with pytest.raises(DimensionError):
        layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(3)), 1e-5)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax(Tensor(np.array([[0.0, 0.0]], dtype=np.float32)), temperature=1.0)
    np.testing.assert_array_equal(out.data, np.array([[0.5, 0.5]], dtype=np.float32))


def test_softmax_shift_invariance_exact():
    z = np.array([[1.0, 2.0, 3.0], [-4.0, 0.0, 4.0]], dtype=np.float32)
    shifted = z + np.float32(8.0)  # exactly representable shift
    np.testing.assert_array_equal(softmax(Tensor(z)).data, softmax(Tensor(shifted)).data)


def test_softmax_temperature_against_direct():
    z = np.array([[1.0, 2.0, 3.0]])
    ours = softmax(Tensor(z, dtype=np.float64), temperature=2.0).data
    direct = softmax_rows(z, tau=2.0)
    assert np.max(np.abs(ours - direct)) < 1e-7


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros((1, 2))), temperature=0.0)
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros((1, 2))), temperature=-1.0)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 8))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    z = np.random.default_rng(seed).normal(scale=10.0, size=(rows, cols)).astype(np.float32)
    out = softmax(Tensor(z)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(rows), atol=1e-6)


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_is_log_c():
    logits = Tensor(np.zeros((3, 10), dtype=np.float32))
    loss = cross_entropy(logits, np.array([1, 5, 9]))
    assert abs(loss.item() - math.log(10.0)) < 1e-6


def test_cross_entropy_saturated_correct():
    logits = np.zeros((2, 4), dtype=np.float32)
    logits[0, 2] = 20.0
    logits[1, 0] = 20.0
    loss = cross_entropy(Tensor(logits), np.array([2, 0]))
    assert loss.item() < 1e-6


def test_cross_entropy_against_direct():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 5))
    t = rng.integers(0, 5, size=4)
    ours = cross_entropy(Tensor(logits, dtype=np.float64), t).item()
    assert abs(ours - cross_entropy_direct(logits, t)) < 1e-6


def test_cross_entropy_rejects_out_of_range_target():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(IndexError):
        cross_entropy(logits, np.array([-1, 0]))


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def test_kl_identical_is_zero():
    p = softmax_rows(np.random.default_rng(3).normal(size=(4, 6)))
    kl = kl_divergence(Tensor(p, dtype=np.float64), Tensor(p.copy(), dtype=np.float64))
    assert abs(kl.item()) < 1e-9


def test_kl_hand_value():
    p = Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
    q = Tensor(np.array([[0.5, 0.5]]), dtype=np.float64)
    assert abs(kl_divergence(p, q).item() - math.log(2.0)) < 1e-12


def test_kl_nonnegative_on_seeded_pairs():
    rng = np.random.default_rng(99)
    for _ in range(100):
        p = softmax_rows(rng.normal(size=(1, 5)))
        q = softmax_rows(rng.normal(size=(1, 5)))
        assert kl_divergence(Tensor(p, dtype=np.float64), Tensor(q, dtype=np.float64)).item() >= 0.0


def test_kl_matches_direct_oracle():
    rng = np.random.default_rng(5)
    p = softmax_rows(rng.normal(size=(3, 7)))
    q = softmax_rows(rng.normal(size=(3, 7)))
    ours = kl_divergence(Tensor(p, dtype=np.float64), Tensor(q, dtype=np.float64)).item()
    assert abs(ours - kl_direct(p, q)) < 1e-12


def test_kl_debug_mode_rejects_unnormalized_rows():
    bad = Tensor(np.array([[0.7, 0.7]]))
    ok = Tensor(np.array([[0.5, 0.5]]))
    with debug_checks():
        with pytest.raises(ValueError):
            kl_divergence(bad, ok)
        with pytest.raises(ValueError):
            kl_divergence(ok, bad)
    kl_divergence(bad, ok)  # outside debug mode the precondition is the caller's job


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------


def test_gelu_matches_erf_formula():
    x = np.linspace(-3, 3, 13)
    ours = gelu(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(ours, gelu_direct(x), atol=1e-12)


# ---------------------------------------------------------------------------
# backward / tape contracts
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = parameter(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
    backward(tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_accumulates_exactly():
    w = parameter(np.random.default_rng(1).normal(size=(5,)), dtype=np.float64)
    loss = tsum(mul(w, w))
    backward(loss)
    single = w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(w.grad, 2.0 * single)
    backward(loss)
    np.testing.assert_array_equal(w.grad, 3.0 * single)
    # beyond n=3, sequential accumulation can differ from n*g by one ulp
    # (round-to-even ties at binade boundaries)
    for n in (4, 5):
        backward(loss)
        np.testing.assert_allclose(w.grad, n * single, rtol=4 * np.finfo(np.float64).eps)


def test_backward_rejects_non_scalar():
    w = parameter(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        backward(w + 1.0)


def test_backward_on_leaf_scalar():
    w = parameter(np.array(2.0))
    backward(w)
    np.testing.assert_array_equal(w.grad, np.array(1.0))


def test_diamond_graph_grad_counts_each_path_once():
    x = parameter(np.array([2.0]), dtype=np.float64)
    a = mul(x, 2.0)
    b = mul(x, 3.0)
    loss = tsum(mul(a, b))  # 6 x^2 -> d/dx = 12 x
    backward(loss)
    np.testing.assert_allclose(x.grad, [24.0], atol=1e-12)


def test_tape_orders_parents_before_children():
    x = parameter(np.array([1.0, 2.0]))
    a = mul(x, 2.0)
    b = a + x
    loss = tsum(mul(b, a))
    tape = Tape(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p._parents is not None:
                assert pos[id(p)] < pos[id(node)]


def test_detached_tensor_blocks_gradient():
    x = parameter(np.array([3.0]))
    d = x.detach()
    assert not d.requires_grad
    loss = tsum(mul(d, d))
    backward(loss)
    assert x.grad is None


def test_debug_mode_flags_nonfinite_forward():
    big = Tensor(np.array([1e30], dtype=np.float32))
    with debug_checks():
        with pytest.raises(FloatingPointError):
            mul(big, big)
    mul(big, big)  # fine when checks are off


def test_dropout_identity_at_rate_zero():
    x = parameter(np.ones((2, 2)))
    assert dropout(x, 0.0, np.random.default_rng(0)) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, np.random.default_rng(0))


def test_dropout_scales_kept_entries():
    x = Tensor(np.ones((1000,), dtype=np.float32))
    out = dropout(x, 0.25, np.random.default_rng(0)).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)
    assert 0.6 < kept.size / 1000 < 0.9
