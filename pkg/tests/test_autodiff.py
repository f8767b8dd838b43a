"""Reverse-mode engine: op gradients against finite differences and hand math."""

import numpy as np
import pytest

from icsid.autodiff import Tensor, no_grad, ops
from icsid.autodiff.gradcheck import grad_check
from icsid.autodiff.params import ParamSet
from icsid.errors import DimensionError, GradCheckError, ValidationError


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def test_add_mul_chain_hand_values():
    a = _t([2.0, -1.0])
    b = _t([3.0, 5.0])
    out = ops.sum_(ops.mul(ops.add(a, b), b))  # sum((a+b)*b)
    out.backward()
    # d/da = b, d/db = a + 2b
    assert np.allclose(a.grad, [3.0, 5.0])
    assert np.allclose(b.grad, [8.0, 9.0])


def test_broadcast_gradients_unbroadcast():
    a = _t(np.ones((3, 4)))
    b = _t(np.ones(4) * 2.0)
    out = ops.sum_(ops.mul(a, b))
    out.backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, 3.0)  # summed over the broadcast axis


def test_grad_accumulates_when_tensor_reused():
    a = _t([1.5])
    out = ops.add(ops.mul(a, a), a)  # a^2 + a, da = 2a + 1
    out.backward()
    assert np.allclose(a.grad, [4.0])


def test_square_and_scale():
    a = _t([3.0])
    out = ops.scale(ops.square(a), 0.5)
    out.backward()
    assert np.allclose(out.data, [4.5])
    assert np.allclose(a.grad, [3.0])


def test_div_gradients():
    a = _t([6.0])
    b = _t([2.0])
    out = ops.div(a, b)
    out.backward()
    assert np.allclose(a.grad, [0.5])
    assert np.allclose(b.grad, [-1.5])


@pytest.mark.parametrize("op", [ops.relu, ops.tanh, ops.softplus, ops.exp])
def test_unary_ops_finite_difference(op):
    params = ParamSet()
    params.add("x", np.linspace(-2.0, 2.1, 7), dtype=np.float64)

    def loss(_params=None):
        return ops.mean(ops.square(op(params["x"])))

    assert grad_check(loss, params) < 1e-6


def test_log_gradient():
    params = ParamSet()
    params.add("x", np.array([0.5, 1.0, 3.0]), dtype=np.float64)

    def loss(_params=None):
        return ops.sum_(ops.log(params["x"]))

    assert grad_check(loss, params) < 1e-6
    x = _t([2.0])
    out = ops.log(x)
    out.backward()
    assert np.allclose(x.grad, [0.5])


def test_mean_with_axis_and_keepdims():
    a = _t(np.arange(12.0).reshape(3, 4))
    out = ops.sum_(ops.mean(a, axis=1, keepdims=True))
    out.backward()
    assert np.allclose(a.grad, 0.25)


def test_reshape_transpose_roundtrip_grad():
    a = _t(np.arange(6.0).reshape(2, 3))
    out = ops.sum_(ops.mul(ops.transpose(ops.reshape(a, (3, 2)), (1, 0)),
                           _t(np.arange(6.0).reshape(2, 3), grad=False)))
    out.backward()
    assert a.grad.shape == (2, 3)


def test_getitem_routes_gradient():
    a = _t(np.arange(10.0))
    out = ops.sum_(ops.square(ops.getitem(a, slice(2, 5))))
    out.backward()
    expect = np.zeros(10)
    expect[2:5] = 2 * np.arange(2.0, 5.0)
    assert np.allclose(a.grad, expect)


def test_concat_splits_gradient():
    a = _t(np.ones((2, 3)))
    b = _t(np.ones((2, 2)))
    out = ops.sum_(ops.mul(ops.concat([a, b], axis=1), _t(np.arange(10.0).reshape(2, 5), grad=False)))
    out.backward()
    assert np.allclose(a.grad, [[0, 1, 2], [5, 6, 7]])
    assert np.allclose(b.grad, [[3, 4], [8, 9]])


def test_matmul_rejects_vectors():
    a = _t(np.ones(3))
    b = _t(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ops.matmul(a, b)


def test_matmul_batched_finite_difference():
    rng = np.random.default_rng(0)
    params = ParamSet()
    params.add("a", rng.standard_normal((2, 3, 4)), dtype=np.float64)
    params.add("b", rng.standard_normal((2, 4, 5)), dtype=np.float64)

    def loss(_params=None):
        return ops.mean(ops.square(ops.matmul(params["a"], params["b"])))

    assert grad_check(loss, params) < 1e-6


def test_linear_finite_difference():
    rng = np.random.default_rng(1)
    params = ParamSet()
    params.add("x", rng.standard_normal((5, 3)), dtype=np.float64)
    params.add("w", rng.standard_normal((3, 4)), dtype=np.float64)
    params.add("b", rng.standard_normal(4), dtype=np.float64)

    def loss(_params=None):
        return ops.mean(ops.square(ops.linear(params["x"], params["w"], params["b"])))

    assert grad_check(loss, params) < 1e-6


def test_layer_norm_output_and_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 8))
    params = ParamSet()
    params.add("x", x, dtype=np.float64)
    params.add("g", np.ones(8) + 0.1 * rng.standard_normal(8), dtype=np.float64)
    params.add("s", 0.1 * rng.standard_normal(8), dtype=np.float64)

    out = ops.layer_norm(params["x"], params["g"], params["s"])
    # normalized rows have ~zero mean and ~unit variance before gain/shift
    raw = (out.data - params["s"].data) / params["g"].data
    assert np.allclose(raw.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(raw.var(axis=-1), 1.0, atol=1e-4)

    def loss(_params=None):
        return ops.mean(ops.square(ops.layer_norm(params["x"], params["g"], params["s"])))

    assert grad_check(loss, params) < 1e-6


def test_softmax_rows_sum_to_one_and_mask():
    x = _t(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    mask = np.array([[True, True, False], [True, True, True]])
    out = ops.softmax(x, mask=mask)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    assert out.data[0, 2] == 0.0


def test_softmax_shift_invariance():
    x = np.array([[1.0, 2.0, 4.0]])
    a = ops.softmax(_t(x, grad=False))
    b = ops.softmax(_t(x + 100.0, grad=False))
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_softmax_finite_difference_with_mask():
    rng = np.random.default_rng(3)
    params = ParamSet()
    params.add("x", rng.standard_normal((3, 5)), dtype=np.float64)
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    coeff = rng.standard_normal((3, 5))

    def loss(_params=None):
        return ops.sum_(ops.mul(ops.softmax(params["x"], mask=mask), Tensor(coeff)))

    assert grad_check(loss, params) < 1e-6


def test_multi_head_attention_finite_difference():
    rng = np.random.default_rng(4)
    b, tq, tk, d = 2, 3, 4, 8
    params = ParamSet()
    params.add("q", rng.standard_normal((b, tq, d)), dtype=np.float64)
    params.add("k", rng.standard_normal((b, tk, d)), dtype=np.float64)
    params.add("v", rng.standard_normal((b, tk, d)), dtype=np.float64)
    params.add("wo", rng.standard_normal((d, d)) / np.sqrt(d), dtype=np.float64)
    params.add("bo", np.zeros(d), dtype=np.float64)

    def loss(_params=None):
        out = ops.multi_head_attention(
            params["q"], params["k"], params["v"], params["wo"], params["bo"],
            n_heads=2, causal=False,
        )
        return ops.mean(ops.square(out))

    assert grad_check(loss, params) < 1e-6


def test_causal_attention_ignores_future():
    rng = np.random.default_rng(5)
    b, t, d = 1, 5, 4
    q = rng.standard_normal((b, t, d))
    k = rng.standard_normal((b, t, d))
    v = rng.standard_normal((b, t, d))
    wo = np.eye(d)
    bo = np.zeros(d)

    def run(v_arr, k_arr):
        with no_grad():
            out = ops.multi_head_attention(
                Tensor(q), Tensor(k_arr), Tensor(v_arr), Tensor(wo), Tensor(bo),
                n_heads=2, causal=True,
            )
        return out.data

    base = run(v, k)
    v2 = v.copy()
    k2 = k.copy()
    v2[0, 4] += 10.0  # only the last key/value position changes
    k2[0, 4] -= 3.0
    pert = run(v2, k2)
    assert np.allclose(base[0, :4], pert[0, :4], atol=1e-12)
    assert not np.allclose(base[0, 4], pert[0, 4])


def test_rnn_scan_finite_difference():
    rng = np.random.default_rng(6)
    B, T, D, H = 3, 4, 2, 5
    params = ParamSet()
    params.add("x", rng.standard_normal((B, T, D)), dtype=np.float64)
    params.add("w_in", rng.standard_normal((D, H)), dtype=np.float64)
    params.add("b_in", rng.standard_normal(H), dtype=np.float64)
    params.add("w_rec", (rng.standard_normal((H, H)) * 0.4), dtype=np.float64)
    params.add("h0", rng.standard_normal(H) * 0.1, dtype=np.float64)

    def loss(_params=None):
        h = ops.rnn_scan(
            params["x"], params["w_in"], params["w_rec"], params["b_in"], params["h0"]
        )
        return ops.mean(ops.square(h))

    assert grad_check(loss, params) < 1e-6


def test_dropout_train_and_inference():
    rng = np.random.default_rng(7)
    x = Tensor(np.ones((100, 100)), requires_grad=True)
    out = ops.dropout(x, 0.25, rng)
    kept = out.data != 0
    # surviving entries are scaled so the expectation is preserved
    assert np.allclose(out.data[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02
    ops.sum_(out).backward()
    assert np.allclose((x.grad != 0), kept)


def test_no_grad_suppresses_graph():
    a = _t([1.0])
    with no_grad():
        out = ops.square(a)
    assert out._parents == ()
    assert out.requires_grad is False


def test_backward_requires_scalar_like_root():
    a = _t([1.0, 2.0])
    out = ops.square(a)
    seed = np.ones(2)
    out.backward(seed)
    assert np.allclose(a.grad, [2.0, 4.0])


def test_grad_check_requires_float64():
    params = ParamSet()
    params.add("x", np.ones(3), dtype=np.float32)

    def loss(_params=None):
        return ops.sum_(params["x"])

    with pytest.raises((GradCheckError, ValidationError)):
        grad_check(loss, params)


def test_grad_check_composite_network():
    rng = np.random.default_rng(8)
    params = ParamSet()
    params.add("w1", rng.standard_normal((4, 6)) * 0.5, dtype=np.float64)
    params.add("b1", np.zeros(6), dtype=np.float64)
    params.add("w2", rng.standard_normal((6, 2)) * 0.5, dtype=np.float64)
    params.add("b2", np.zeros(2), dtype=np.float64)
    x = Tensor(rng.standard_normal((7, 4)))

    def loss(_params=None):
        h = ops.tanh(ops.linear(x, params["w1"], params["b1"]))
        return ops.mean(ops.square(ops.linear(h, params["w2"], params["b2"])))

    assert grad_check(loss, params) < 1e-7


def test_param_set_state_dict_roundtrip():
    params = ParamSet()
    params.add("a", np.arange(4.0).reshape(2, 2))
    params.add("b", np.zeros(3))
    state = params.state_dict()
    params2 = ParamSet()
    params2.add("a", np.zeros((2, 2)))
    params2.add("b", np.ones(3))
    params2.load_state_dict(state)
    assert np.array_equal(params2["a"].data, params["a"].data)
    assert np.array_equal(params2["b"].data, params["b"].data)


def test_param_set_load_rejects_mismatch():
    params = ParamSet()
    params.add("a", np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        params.load_state_dict({"a": np.zeros((2, 2)), "extra": np.zeros(1)})
    with pytest.raises(DimensionError):
        params.load_state_dict({})
    with pytest.raises(DimensionError):
        params.load_state_dict({"a": np.zeros((3, 2))})
