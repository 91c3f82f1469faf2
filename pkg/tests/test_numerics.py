"""Tensor primitives, backward pass, and Adagrad behavior."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpan import numerics as nx
from dpan.numerics import (
    Adagrad,
    DimensionError,
    NonFiniteGradientError,
    Tensor,
    backward,
    no_grad,
)
from gradcheck import assert_grads_match_fd


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_hand_oracle():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = nx.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_identity_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nx.matmul(Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_zero_case():
    out = nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_matmul_identity_exact_for_integral_matrices(m, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-50, 50, size=(m, n)).astype(float)
    out = nx.matmul(Tensor(a), Tensor(np.eye(n)))
    assert np.array_equal(out.data, a)


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 2)))
    with pytest.raises(DimensionError) as err:
        nx.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(2, 2)" in str(err.value)


def test_matmul_rejects_non_2d():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert nx.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_sigmoid_stable_for_extreme_inputs():
    out = nx.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == 1.0


def test_mul_example():
    out = nx.mul(Tensor([0.5, 0.2]), Tensor([0.4, 0.5]))
    np.testing.assert_array_equal(out.data, [0.2, 0.1])


def test_relu_definition():
    np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_binary_op_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        nx.mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_scalar_operands_are_constants():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = nx.reduce_sum(3.0 * x - 1.0, axis=0)
    backward(y)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_prelu_values_and_slope():
    slope = Tensor([0.25], requires_grad=True)
    out = nx.prelu(Tensor([-2.0, 0.0, 3.0]), slope)
    np.testing.assert_array_equal(out.data, [-0.5, 0.0, 3.0])
    with pytest.raises(DimensionError):
        nx.prelu(Tensor([1.0]), Tensor([0.1, 0.2]))


def test_softplus_matches_log1p_exp():
    x = np.array([-3.0, -0.5, 0.0, 2.0])
    out = nx.softplus(Tensor(x)).data
    np.testing.assert_allclose(out, np.log1p(np.exp(x)), rtol=1e-15)
    big = nx.softplus(Tensor([1000.0])).data
    assert big[0] == 1000.0  # no overflow


def test_log_requires_positive_input():
    np.testing.assert_allclose(nx.log(Tensor([1.0, np.e])).data, [0.0, 1.0], rtol=1e-15)
    with pytest.raises(ValueError):
        nx.log(Tensor([0.0]))
    with pytest.raises(ValueError):
        nx.log(Tensor([-1.0]))


def test_clip_values_and_flat_gradient_outside_range():
    x = Tensor([-1.0, 0.3, 2.0], requires_grad=True)
    y = nx.clip(x, 0.0, 1.0)
    np.testing.assert_array_equal(y.data, [0.0, 0.3, 1.0])
    backward(nx.reduce_sum(y, axis=0))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        nx.clip(x, 1.0, 0.0)


def test_rowwise_matmul_matches_per_row_products():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3, 2))
    out = nx.rowwise_matmul(Tensor(h), Tensor(w))
    expected = np.stack([h[b] @ w[b] for b in range(4)])
    np.testing.assert_allclose(out.data, expected, rtol=1e-15)
    with pytest.raises(DimensionError):
        nx.rowwise_matmul(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2, 2))))


def test_rowwise_matmul_gradients_match_fd():
    rng = np.random.default_rng(9)
    h = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)

    def loss():
        out = nx.rowwise_matmul(h, w)
        return nx.reduce_mean(nx.reduce_sum(nx.mul(out, out), axis=1), axis=0)

    assert_grads_match_fd(loss, {"h": h, "w": w})


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def test_reduce_mean_hand_oracle():
    out = nx.reduce_mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0)
    np.testing.assert_array_equal(out.data, [2.0, 3.0])


def test_reduce_examples():
    assert nx.reduce_mean(Tensor([2.0, 4.0]), axis=0).item() == 3.0
    out = nx.reduce_sum(Tensor(np.zeros((3, 2))), axis=1)
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_reduce_axis_out_of_range():
    with pytest.raises(DimensionError):
        nx.reduce_sum(Tensor(np.zeros((2, 2))), axis=2)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_reduce_mean_is_sum_over_extent(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    mean = nx.reduce_mean(Tensor(x), axis=1).data
    summed = nx.reduce_sum(Tensor(x), axis=1).data
    np.testing.assert_allclose(mean, summed / 3.0, rtol=1e-15)


def test_concat_and_slice_roundtrip():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(6.0, 10.0).reshape(2, 2))
    joined = nx.concat([a, b], axis=1)
    assert joined.shape == (2, 5)
    back = nx.slice_last(joined, 3, 5)
    np.testing.assert_array_equal(back.data, b.data)
    with pytest.raises(DimensionError):
        nx.slice_last(joined, 4, 6)


def test_broadcast_to_bad_shape():
    with pytest.raises(DimensionError):
        nx.broadcast_to(Tensor(np.zeros(3)), (2, 4))


def test_gather_rows_validates_ids():
    table = Tensor(np.arange(8.0).reshape(4, 2))
    with pytest.raises(DimensionError):
        nx.gather_rows(table, np.array([0, 4]))
    with pytest.raises(DimensionError):
        nx.gather_rows(table, np.array([0.5]))


def test_gather_rows_duplicate_ids_accumulate():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    out = nx.gather_rows(table, np.array([1, 1, 2]))
    backward(nx.reduce_sum(nx.reduce_sum(out, axis=1), axis=0))
    np.testing.assert_array_equal(table.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_square_at_three():
    x = Tensor([3.0], requires_grad=True)
    backward(nx.reduce_sum(nx.mul(x, x), axis=0))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_constant_loss_leaves_grads_zero():
    w = Tensor(np.ones(3), requires_grad=True)
    backward(Tensor(5.0))
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DimensionError):
        backward(nx.mul(x, x))


def test_backward_fd_oracle_sum_sigmoid_matmul():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 1)))

    def loss():
        h = nx.sigmoid(nx.matmul(w, x))
        return nx.reduce_sum(nx.reduce_sum(h, axis=1), axis=0)

    assert_grads_match_fd(loss, {"w": w})


def test_backward_fd_composite_all_primitives():
    rng = np.random.default_rng(11)
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    slope = Tensor([0.3], requires_grad=True)
    ids = np.array([[1, 2], [3, 4]])

    def loss():
        e = nx.gather_rows(table, ids)            # (2, 2, 3)
        flat = nx.reshape(e, (2, 6))
        h = nx.add(nx.matmul(flat, w), nx.broadcast_to(bias, (2, 4)))
        h = nx.prelu(h, slope)
        left = nx.slice_last(h, 0, 2)
        right = nx.slice_last(h, 2, 4)
        mixed = nx.concat([nx.mul(left, right), nx.sub(left, right)], axis=1)
        y = nx.softplus(nx.relu(mixed))
        return nx.reduce_mean(nx.reduce_sum(y, axis=1), axis=0)

    params = {"table": table, "w": w, "bias": bias, "slope": slope}
    assert_grads_match_fd(loss, params)


def test_no_grad_blocks_recording():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = nx.reduce_sum(nx.mul(w, w), axis=0)
    assert not out.requires_grad
    backward(out)
    np.testing.assert_array_equal(w.grad, np.zeros(2))


def test_grad_accumulates_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    backward(nx.reduce_sum(nx.mul(x, x), axis=0))
    backward(nx.reduce_sum(nx.mul(x, x), axis=0))
    np.testing.assert_array_equal(x.grad, [8.0])


# ---------------------------------------------------------------------------
# Adagrad
# ---------------------------------------------------------------------------

def test_adagrad_first_step_hand_oracle():
    p = Tensor([1.0], requires_grad=True)
    opt = Adagrad({"p": p}, lr=0.01, eps=1e-8)
    p.grad[...] = 1.0
    opt.step()
    expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-15)
    assert p.data[0] == pytest.approx(0.99, abs=1e-7)


def test_adagrad_zero_grad_leaves_param_bitwise_unchanged():
    p = Tensor([0.75], requires_grad=True)
    before = p.data.copy()
    opt = Adagrad({"p": p})
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adagrad_second_equal_step_is_smaller():
    p = Tensor([0.0], requires_grad=True)
    opt = Adagrad({"p": p}, lr=0.1)
    p.grad[...] = 1.0
    opt.step()
    first = abs(p.data[0])
    p.grad[...] = 1.0
    opt.step()
    second = abs(p.data[0]) - first
    assert abs(second) < first


def test_adagrad_accumulator_monotone():
    p = Tensor([0.0], requires_grad=True)
    opt = Adagrad({"p": p})
    seen = []
    for g in (0.5, -1.0, 0.0, 2.0):
        p.grad[...] = g
        opt.step()
        seen.append(opt.accum["p"][0])
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert all(a >= 0 for a in seen)


def test_adagrad_rejects_whole_step_on_non_finite_grad():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    opt = Adagrad({"a": a, "b": b})
    a.grad[...] = 1.0          # finite, listed before the bad one
    b.grad[...] = np.nan
    with pytest.raises(NonFiniteGradientError) as err:
        opt.step()
    assert err.value.param_name == "b"
    assert "b" in str(err.value)
    # nothing was touched, not even the parameter with the good gradient
    np.testing.assert_array_equal(a.data, [1.0])
    np.testing.assert_array_equal(b.data, [2.0])
    np.testing.assert_array_equal(opt.accum["a"], [0.0])


def test_adagrad_rejects_infinite_grad():
    p = Tensor([1.0], requires_grad=True)
    opt = Adagrad({"p": p})
    p.grad[...] = np.inf
    with pytest.raises(NonFiniteGradientError):
        opt.step()


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def _forward_bits(seed: int) -> bytes:
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))
    out = nx.sigmoid(nx.matmul(x, w))
    backward(nx.reduce_mean(nx.reduce_sum(out, axis=1), axis=0))
    return out.data.tobytes() + w.grad.tobytes()


def test_same_seed_bit_identical():
    assert _forward_bits(123) == _forward_bits(123)
