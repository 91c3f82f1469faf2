"""Parameter generation, shallow/deep unions, and their invariants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpan.numerics import (
    Tensor,
    backward,
    no_grad,
    reduce_mean,
    reduce_sum,
)
from dpan.sduf import FusionParams, Sduf, deep_union, shallow_union
from gradcheck import assert_grads_match_fd


def make_sduf(cond_dim=6, agg_dim=4, deep_widths=(8, 4), hidden=5, seed=0):
    return Sduf(cond_dim, agg_dim, deep_widths, hidden,
                np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# parameter generation
# ---------------------------------------------------------------------------

def test_default_scale_parameter_count():
    sduf = Sduf(cond_dim=10, agg_dim=128, deep_widths=(256, 128), hidden=8,
                rng=np.random.default_rng(0))
    assert sduf.total == 128 + 256 * 256 + 256 * 128
    assert sduf.total == 98_432


def test_generated_segments_have_configured_shapes():
    sduf = make_sduf()
    with no_grad():
        out = sduf.generate(Tensor(np.random.default_rng(1).normal(size=(3, 6))))
    assert out.gate.shape == (3, 4)
    assert [m.shape for m in out.deep] == [(3, 8, 8), (3, 8, 4)]


def test_zeroed_generator_gives_half_gate_and_zero_matrices():
    sduf = make_sduf()
    final = sduf.net.layers[-1]
    final.W.data[...] = 0.0
    final.b.data[...] = 0.0
    with no_grad():
        out = sduf.generate(Tensor(np.ones((2, 6))))
    np.testing.assert_array_equal(out.gate.data, np.full((2, 4), 0.5))
    for m in out.deep:
        np.testing.assert_array_equal(m.data, np.zeros(m.shape))


def test_same_condition_gives_identical_params():
    sduf = make_sduf(seed=2)
    h = Tensor(np.random.default_rng(3).normal(size=(2, 6)))
    with no_grad():
        a = sduf.generate(h)
        b = sduf.generate(h)
    np.testing.assert_array_equal(a.gate.data, b.gate.data)
    for ma, mb in zip(a.deep, b.deep):
        np.testing.assert_array_equal(ma.data, mb.data)


def test_gate_strictly_inside_unit_interval_even_when_saturated():
    sduf = make_sduf(seed=4)
    final = sduf.net.layers[-1]
    final.b.data[...] = 1000.0  # force sigmoid saturation without the clamp
    with no_grad():
        high = sduf.generate(Tensor(np.zeros((2, 6)))).gate.data
    final.b.data[...] = -1000.0
    with no_grad():
        low = sduf.generate(Tensor(np.zeros((2, 6)))).gate.data
    assert np.all((high > 0.0) & (high < 1.0))
    assert np.all((low > 0.0) & (low < 1.0))


def test_constructor_rejects_bad_widths():
    with pytest.raises(ValueError):
        make_sduf(deep_widths=(8, 0))
    with pytest.raises(ValueError):
        make_sduf(agg_dim=0)


def test_condition_vector_is_channel_time_trigger_concat():
    ch = Tensor(np.array([[1.0, 2.0]]))
    tm = Tensor(np.array([[3.0]]))
    tr = [Tensor(np.array([[4.0, 5.0]])), Tensor(np.array([[6.0, 7.0]]))]
    out = Sduf.condition(ch, tm, tr)
    np.testing.assert_array_equal(out.data, [[1.0, 2, 3, 4, 5, 6, 7]])


# ---------------------------------------------------------------------------
# shallow union
# ---------------------------------------------------------------------------

def test_shallow_union_gate_one_returns_diversity():
    rng = np.random.default_rng(5)
    s = Tensor(rng.normal(size=(2, 4)))
    d = Tensor(rng.normal(size=(2, 4)))
    out = shallow_union(s, d, Tensor(np.ones((2, 4))))
    np.testing.assert_allclose(out.data, d.data, rtol=1e-14, atol=1e-14)


def test_shallow_union_midpoint():
    rng = np.random.default_rng(6)
    s = Tensor(rng.normal(size=(2, 4)))
    d = Tensor(rng.normal(size=(2, 4)))
    out = shallow_union(s, d, Tensor(np.full((2, 4), 0.5)))
    np.testing.assert_allclose(out.data, (s.data + d.data) / 2.0, rtol=1e-14)


def test_shallow_union_blend_of_equals_is_bitwise_input():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(3, 5))
    gate = rng.uniform(1e-6, 1 - 1e-6, size=(3, 5))
    out = shallow_union(Tensor(v), Tensor(v.copy()), Tensor(gate))
    np.testing.assert_array_equal(out.data, v)


def test_shallow_union_shape_mismatch():
    with pytest.raises(Exception):
        shallow_union(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                      Tensor(np.zeros((1, 3))))


@given(st.integers(0, 100_000))
@settings(max_examples=80, deadline=None)
def test_shallow_union_containment_is_exact(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(2, 6)) * rng.choice([1e-8, 1.0, 1e8])
    d = rng.normal(size=(2, 6)) * rng.choice([1e-8, 1.0, 1e8])
    gate = rng.uniform(0.0, 1.0, size=(2, 6))
    gate = np.clip(gate, 1e-12, 1.0 - 1e-12)
    out = shallow_union(Tensor(s), Tensor(d), Tensor(gate)).data
    assert np.all(out >= np.minimum(s, d))
    assert np.all(out <= np.maximum(s, d))


# ---------------------------------------------------------------------------
# deep union
# ---------------------------------------------------------------------------

def test_deep_union_zero_matrices_give_zero():
    s = Tensor(np.random.default_rng(8).normal(size=(2, 3)))
    d = Tensor(np.random.default_rng(9).normal(size=(2, 3)))
    mats = [Tensor(np.zeros((2, 6, 4))), Tensor(np.zeros((2, 4, 2)))]
    out = deep_union(s, d, mats)
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_deep_union_identity_on_nonnegative_inputs():
    s = Tensor(np.array([[0.5, 0.0, 1.5]]))
    d = Tensor(np.array([[2.0, 0.25, 0.0]]))
    eye = np.zeros((1, 6, 3))
    eye[0, :3, :3] = np.eye(3)
    out = deep_union(s, d, [Tensor(eye)])
    np.testing.assert_array_equal(out.data, s.data)


def test_deep_union_matches_hand_iterated_recurrence():
    rng = np.random.default_rng(10)
    s = rng.normal(size=(2, 2))
    d = rng.normal(size=(2, 2))
    w1 = rng.normal(size=(2, 4, 3))
    w2 = rng.normal(size=(2, 3, 2))
    with no_grad():
        out = deep_union(Tensor(s), Tensor(d), [Tensor(w1), Tensor(w2)])
    for b in range(2):
        h = np.concatenate([s[b], d[b]])
        h = np.maximum(h @ w1[b], 0.0)
        h = np.maximum(h @ w2[b], 0.0)
        np.testing.assert_allclose(out.data[b], h, rtol=1e-14)


def test_deep_union_requires_matrices():
    with pytest.raises(ValueError):
        deep_union(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), [])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_fusion_gradients_match_fd_end_to_end():
    sduf = make_sduf(cond_dim=4, agg_dim=3, deep_widths=(4, 2), hidden=4, seed=11)
    rng = np.random.default_rng(12)
    h_cond = Tensor(rng.normal(size=(2, 4)))
    v_sim = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    v_div = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        fused = sduf.generate(h_cond)
        su = shallow_union(v_sim, v_div, fused.gate)
        du = deep_union(v_sim, v_div, fused.deep)
        return reduce_mean(reduce_sum(su, axis=1) + reduce_sum(du, axis=1), axis=0)

    params = dict(sduf.params())
    params["v_sim"] = v_sim
    params["v_div"] = v_div
    assert_grads_match_fd(loss, params)


def test_gradients_reach_condition_vector():
    sduf = make_sduf(cond_dim=4, agg_dim=3, deep_widths=(4,), hidden=4, seed=13)
    rng = np.random.default_rng(14)
    h_cond = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    v_sim = Tensor(rng.normal(size=(2, 3)))
    v_div = Tensor(rng.normal(size=(2, 3)))
    fused = sduf.generate(h_cond)
    su = shallow_union(v_sim, v_div, fused.gate)
    du = deep_union(v_sim, v_div, fused.deep)
    backward(reduce_mean(reduce_sum(su, axis=1) + reduce_sum(du, axis=1), axis=0))
    assert np.any(h_cond.grad != 0)
