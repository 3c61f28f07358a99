"""Tensor engine: op contracts, gradients, optimizer, persistence."""
from __future__ import annotations

import numpy as np
import pytest

from sugar.rng import Rng
from sugar import tensor as T
from sugar.tensor import (
    AdamState,
    LARGE_NEG,
    NumericError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    masked_attention,
    matmul,
    mean_all,
    mse_loss,
    mul,
    add,
    read_tensors,
    reshape,
    slice_axis,
    softmax_rows,
    transpose,
    write_tensors,
    zero_grad,
)

from helpers import check_gradients


# -----------------------------------------------------------------------------
# matmul
# -----------------------------------------------------------------------------


def test_matmul_identity():
    b = Rng(0).normal((3, 4))
    out = matmul(Tensor(np.eye(3)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_small_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_4x5_5x3():
    rng = Rng(7)
    a, b = rng.normal((4, 5)), rng.normal((5, 3))
    w = rng.normal((4, 3))
    check_gradients(lambda ts: mean_all(mul(matmul(ts[0], ts[1]), Tensor(w))), [a, b])


# -----------------------------------------------------------------------------
# softmax
# -----------------------------------------------------------------------------


def test_softmax_uniform_row():
    out = softmax_rows(Tensor(np.zeros((2, 5))))
    assert np.allclose(out.data, 0.2, atol=1e-12)


def test_softmax_masked_position_weightless():
    out = softmax_rows(Tensor(np.zeros((1, 2))), np.array([[0.0, LARGE_NEG]]))
    assert abs(out.data[0, 0] - 1.0) < 1e-12
    assert out.data[0, 1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = Rng(3)
    for seed in range(10):
        x = Rng(seed).normal((3, 4)) * 5
        out = softmax_rows(Tensor(x)).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-9
        assert out.min() >= 0.0 and out.max() <= 1.0
    del rng


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ShapeError):
        softmax_rows(Tensor(np.zeros((1, 3))), np.full((1, 3), LARGE_NEG))


# -----------------------------------------------------------------------------
# layer norm
# -----------------------------------------------------------------------------


def test_layer_norm_constant_vector_zeroes():
    x = Tensor(np.full((2, 8), 3.7))
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.abs(out.data).max() < 1e-6


def test_layer_norm_standardizes():
    x = Rng(11).normal((5, 16)) * 4 + 2
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


# -----------------------------------------------------------------------------
# masked attention
# -----------------------------------------------------------------------------


def _naive_attention(q, k, v, mask, heads):
    n, d = q.shape
    dh = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        qs, ks, vs = (m[:, h * dh : (h + 1) * dh] for m in (q, k, v))
        s = qs @ ks.T / np.sqrt(dh) + mask
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(np.maximum(s, -746.0))
        p = e / e.sum(axis=-1, keepdims=True)
        out[:, h * dh : (h + 1) * dh] = p @ vs
    return out


def test_attention_allow_all_equals_unmasked():
    rng = Rng(5)
    q, k, v = rng.normal((6, 8)), rng.normal((6, 8)), rng.normal((6, 8))
    got = masked_attention(Tensor(q), Tensor(k), Tensor(v), np.zeros((6, 6)), 2).data
    assert np.allclose(got, _naive_attention(q, k, v, np.zeros((6, 6)), 2), atol=1e-12)


def test_attention_self_only_returns_values():
    rng = Rng(6)
    q, k, v = rng.normal((5, 4)), rng.normal((5, 4)), rng.normal((5, 4))
    mask = np.full((5, 5), LARGE_NEG)
    np.fill_diagonal(mask, 0.0)
    got = masked_attention(Tensor(q), Tensor(k), Tensor(v), mask, 2).data
    assert np.abs(got - v).max() < 1e-12


def test_attention_fully_masked_query_raises():
    mask = np.zeros((3, 3))
    mask[1, :] = LARGE_NEG
    with pytest.raises(ShapeError):
        masked_attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))),
                         Tensor(np.zeros((3, 4))), mask, 2)


def test_attention_gradients():
    rng = Rng(8)
    q, k, v = rng.normal((6, 8)), rng.normal((6, 8)), rng.normal((6, 8))
    mask = np.where(Rng(9).random((6, 6)) > 0.3, 0.0, LARGE_NEG)
    np.fill_diagonal(mask, 0.0)
    w = rng.normal((6, 8))
    check_gradients(
        lambda ts: mean_all(mul(masked_attention(ts[0], ts[1], ts[2], mask, 2), Tensor(w))),
        [q, k, v],
    )


# -----------------------------------------------------------------------------
# adam
# -----------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(), lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(), lr=0.1)
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_quadratic_bowl_converges():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    for _ in range(200):
        p.grad = 2.0 * p.data  # d/dw of w^2
        adam_step({"w": p}, state, lr=0.05)
    assert abs(p.data[0]) < 1e-2


def test_adam_skips_frozen_and_rejects_nonfinite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([5.0])
    adam_step({"p": p}, AdamState(), lr=0.1, frozen={"p"})
    assert p.data[0] == 1.0
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        adam_step({"p": p}, AdamState(), lr=0.1)


# -----------------------------------------------------------------------------
# other ops and engine behavior
# -----------------------------------------------------------------------------


def test_embedding_lookup_rows_and_range_check():
    table = Tensor(Rng(2).normal((5, 3)))
    out = embedding_lookup(table, [1, 1, 4])
    assert np.array_equal(out.data, table.data[[1, 1, 4]])
    with pytest.raises(ShapeError):
        embedding_lookup(table, [5])


def test_concat_and_slice_roundtrip():
    a, b = Rng(1).normal((2, 3)), Rng(2).normal((4, 3))
    cat = concat([Tensor(a), Tensor(b)], axis=0)
    assert np.array_equal(slice_axis(cat, 0, 0, 2).data, a)
    assert np.array_equal(slice_axis(cat, 0, 2, 6).data, b)
    with pytest.raises(ShapeError):
        concat([Tensor(a), Tensor(np.zeros((2, 4)))], axis=0)
    with pytest.raises(ShapeError):
        slice_axis(cat, 0, 0, 99)


def test_nonfinite_values_rejected():
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad
    y2 = mul(x, 2.0)
    assert y2.requires_grad


def test_backward_accumulates_and_zero_grad_clears():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = mean_all(mul(x, x))
    backward(loss)
    assert abs(x.grad[0] - 4.0) < 1e-12
    zero_grad([x])
    assert x.grad is None


def test_determinism_bit_identical():
    def run():
        rng = Rng(42)
        x = Tensor(rng.normal((4, 6)), requires_grad=True)
        w = Tensor(rng.normal((6, 3)), requires_grad=True)
        loss = mse_loss(gelu(matmul(x, w)), rng.normal((4, 3)))
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


# -----------------------------------------------------------------------------
# gradient suite over every differentiable op
# -----------------------------------------------------------------------------

def op_gradient_cases(seed: int):
    """(name, build_loss, arrays) triples for one random draw."""
    rng = Rng(seed)
    n, d = 5, 6
    w_nd = rng.normal((n, d))
    w_34 = rng.normal((3, 4))
    w_53 = rng.normal((5, 3))
    w_nn = rng.normal((n, n))
    w_63 = rng.normal((6, 3))
    mask = np.where(Rng(seed + 1).random((n, n)) > 0.35, 0.0, LARGE_NEG)
    np.fill_diagonal(mask, 0.0)
    ids = Rng(seed + 2).integers(0, 4, 6)
    cases = [
        ("matmul2d", lambda ts: mean_all(mul(matmul(ts[0], ts[1]), Tensor(w_34))),
         [rng.normal((3, 5)), rng.normal((5, 4))]),
        ("matmul3d", lambda ts: mean_all(matmul(ts[0], ts[1])),
         [rng.normal((2, 3, 4)), rng.normal((2, 4, 2))]),
        ("add", lambda ts: mean_all(mul(add(ts[0], ts[1]), Tensor(w_nd))),
         [rng.normal((n, d)), rng.normal((n, d))]),
        ("add_row_broadcast", lambda ts: mean_all(mul(add(ts[0], ts[1]), Tensor(w_nd))),
         [rng.normal((n, d)), rng.normal((d,))]),
        ("mul", lambda ts: mean_all(mul(mul(ts[0], ts[1]), Tensor(w_nd))),
         [rng.normal((n, d)), rng.normal((n, d))]),
        ("concat", lambda ts: mean_all(mul(concat(ts, axis=0), Tensor(w_53))),
         [rng.normal((2, 3)), rng.normal((3, 3))]),
        ("slice", lambda ts: mean_all(slice_axis(ts[0], 0, 1, 4)),
         [rng.normal((n, d))]),
        ("reshape_transpose", lambda ts: mean_all(transpose(reshape(ts[0], (2, 3, 5)), (1, 0, 2))),
         [rng.normal((6, 5))]),
        ("gelu", lambda ts: mean_all(mul(gelu(ts[0]), Tensor(w_nd))),
         [rng.normal((n, d))]),
        ("softmax", lambda ts: mean_all(mul(softmax_rows(ts[0]), Tensor(w_nd))),
         [rng.normal((n, d))]),
        ("softmax_masked", lambda ts: mean_all(mul(softmax_rows(ts[0], mask), Tensor(w_nn))),
         [rng.normal((n, n))]),
        ("layer_norm", lambda ts: mean_all(mul(layer_norm(ts[0], ts[1], ts[2]), Tensor(w_nd))),
         [rng.normal((n, d)), rng.normal((d,)), rng.normal((d,))]),
        ("embedding", lambda ts: mean_all(mul(embedding_lookup(ts[0], ids), Tensor(w_63))),
         [rng.normal((4, 3))]),
        ("mse", lambda ts: mse_loss(ts[0], w_nd),
         [rng.normal((n, d))]),
        ("attention", lambda ts: mean_all(mul(masked_attention(ts[0], ts[1], ts[2], mask, 2), Tensor(w_nd))),
         [rng.normal((n, d)), rng.normal((n, d)), rng.normal((n, d))]),
    ]
    return cases


@pytest.mark.parametrize("seed", range(3))
def test_gradient_suite_sample_seeds(seed):
    for name, build, arrays in op_gradient_cases(100 + seed):
        check_gradients(build, arrays)


# -----------------------------------------------------------------------------
# container round-trip
# -----------------------------------------------------------------------------


def test_tensor_container_roundtrip_bit_exact(tmp_path):
    rng = Rng(4)
    arrays = {"a.b.w": rng.normal((3, 4)), "scalar": np.array(2.5), "flat": rng.normal((7,))}
    path = tmp_path / "ck.tensors"
    write_tensors(path, arrays)
    back = read_tensors(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], np.asarray(arrays[k]))
    # identical bytes on rewrite
    path2 = tmp_path / "ck2.tensors"
    write_tensors(path2, arrays)
    assert path.read_bytes() == path2.read_bytes()
