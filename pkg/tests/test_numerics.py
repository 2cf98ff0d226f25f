"""Tensor core and layer ops: spec examples, finite-difference oracles,
and the per-op invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qviton import nn
from qviton import tensor as T
from qviton.errors import ConfigError, ContractError, DimensionError
from qviton.tensor import ParamStore, Tensor
from qviton.verify import gradcheck, naive_conv2d, naive_matmul

# frozen via a 30-digit erf-series / log oracle (mpmath)
GELU_AT_1 = 0.841344746068543
LN_2 = 0.693147180559945
LOG1P_EXP_NEG1 = 0.313261687518223


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)


def test_matmul_direct():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_forward_matches_naive_loop(rng):
    a = rng.normal(size=(6, 5))
    b = rng.normal(size=(5, 4))
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(got - naive_matmul(a, b)).max() <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda: T.matmul(a, b).sum(), [a, b]) <= 1e-6


def test_matmul_batched_matches_per_item(rng):
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(3, 5, 2))
    batched = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        assert np.allclose(batched[i], a[i] @ b[i], atol=1e-12)


# -- conv2d -------------------------------------------------------------------


def test_conv2d_one_by_one_identity(rng):
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = nn.conv2d(x, w)
    assert np.array_equal(out.data, x.data)


def test_conv2d_direct_sum():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = Tensor(np.ones((1, 1, 2, 2)))
    assert nn.conv2d(x, w).data.tolist() == [[[[10.0]]]]


def test_conv2d_shape_formula():
    x = Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))
    w = Tensor(np.zeros((32, 3, 7, 7), dtype=np.float32))
    assert nn.conv2d(x, w, stride=2, padding=3).shape == (1, 32, 112, 112)


def test_conv2d_kernel_too_large():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    w = Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(DimensionError):
        nn.conv2d(x, w)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv2d_matches_naive_loop(rng, stride, padding):
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = nn.conv2d(Tensor(x), Tensor(w), Tensor(b),
                    stride=stride, padding=padding).data
    want = naive_conv2d(x, w, b, stride=stride, padding=padding)
    assert np.abs(got - want).max() <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    err = gradcheck(
        lambda: (nn.conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), [x, w, b])
    assert err <= 1e-6


# -- layer norm -----------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((1, 8), 3.5))
    out = nn.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.abs(out.data).max() < 1e-6


def test_layer_norm_two_point_row():
    x = Tensor(np.array([[1.0, 3.0]]))
    out = nn.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_statistics_property(rng):
    x = Tensor(rng.normal(size=(16, 64)) * 10.0)
    out = nn.layer_norm(x, Tensor(np.ones(64)), Tensor(np.zeros(64)), eps=1e-5).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-9
    assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=np.float64)
    g = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda: (nn.layer_norm(x, g, b) ** 2).sum(), [x, g, b]) <= 1e-6


# -- activations ------------------------------------------------------------------


def test_gelu_values():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) <= 1e-6
    assert abs(T.gelu(Tensor([1.0])).data[0] - GELU_AT_1) <= 1e-5


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


@pytest.mark.parametrize("fn", [T.gelu, T.sigmoid, T.tanh], ids=["gelu", "sigmoid", "tanh"])
@pytest.mark.parametrize("seed", range(10))
def test_activation_gradcheck(fn, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=15), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda: (fn(x) * fn(x)).sum(), [x]) <= 1e-6


# -- softmax / cross entropy --------------------------------------------------------


def test_cross_entropy_uniform_two_classes():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert abs(loss.item() - LN_2) <= 1e-9


def test_cross_entropy_saturated():
    loss = T.softmax_cross_entropy(Tensor([[1e4, 0.0]]), [0])
    assert loss.item() < 1e-6


def test_cross_entropy_closed_form():
    loss = T.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [0])
    assert abs(loss.item() - LOG1P_EXP_NEG1) <= 1e-9


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradcheck(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 3, size=4)
    assert gradcheck(lambda: T.softmax_cross_entropy(logits, labels),
                     [logits]) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 8))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 20.0
    sums = T.softmax(Tensor(x)).data.sum(axis=1)
    assert np.abs(sums - 1.0).max() <= 1e-9


# -- aux layers ----------------------------------------------------------------------


def test_dropout_eval_is_identity_bitwise(rng):
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    out = T.dropout(x, 0.5, train=False)
    assert out.data is x.data


def test_dropout_p_zero_is_identity_bitwise(rng):
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    out = T.dropout(x, 0.0, train=True, rng=rng)
    assert out.data is x.data


def test_dropout_scales_by_keep_probability(rng):
    x = Tensor(np.ones((100, 100)))
    out = T.dropout(x, 0.25, train=True, rng=rng).data
    kept = out[out != 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs((out != 0).mean() - 0.75) < 0.02


def test_dropout_invalid_probability():
    with pytest.raises(ConfigError):
        T.dropout(Tensor([1.0]), 1.0, train=True)
    with pytest.raises(ConfigError):
        nn.Dropout(-0.1)


def test_adaptive_pool_constant():
    x = Tensor(np.full((1, 64, 32, 32), 2.75))
    out = nn.adaptive_avg_pool2d(x, (8, 8))
    assert out.shape == (1, 64, 8, 8)
    assert np.allclose(out.data, 2.75)


def test_adaptive_pool_upsamples_small_grids():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    out = nn.adaptive_avg_pool2d(x, (8, 8))
    assert out.shape == (1, 1, 8, 8)
    # each source pixel is replicated into a 2x2 block
    assert np.array_equal(out.data[0, 0, ::2, ::2], x.data[0, 0])


def test_concat_and_flatten(rng):
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(2, 5)))
    joined = T.concat([a, b], axis=1)
    assert joined.shape == (2, 8)
    assert np.array_equal(joined.data[:, :3], a.data)
    flat = joined.flatten()
    assert flat.shape == (16,)


def test_batch_norm_eval_uses_running_stats(rng):
    store = ParamStore()
    bn = nn.BatchNorm2d(store, "bn", 2)
    x = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
    bn(x, train=True)  # updates running stats
    frozen = bn(x, train=False).data
    assert np.array_equal(frozen, bn(x, train=False).data)  # eval is pure
    assert not np.allclose(frozen, bn(x, train=True).data)


# -- backward contract ------------------------------------------------------------------


def test_backward_sum_of_squares():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2.0 * x.data)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_backward_accumulates_exactly():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def loss():
        return (x * x).sum()

    loss().backward()
    first = x.grad.copy()
    loss().backward()
    assert np.array_equal(x.grad, 2.0 * first)


def test_backward_zero_fills_unreachable_params():
    store = ParamStore()
    used = store.register("used", np.array([2.0]))
    unused = store.register("unused", np.array([5.0]))
    loss = (used * used).sum()
    T.backward(loss, store)
    assert np.allclose(used.grad, [4.0])
    assert np.array_equal(unused.grad, [0.0])


def test_composite_gradcheck_conv_gelu_layernorm(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.5, requires_grad=True,
               dtype=np.float64)
    g = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)

    def loss():
        y = T.gelu(nn.conv2d(x, w, stride=1, padding=1))
        y = y.transpose((0, 2, 3, 1))
        return (nn.layer_norm(y, g, b) ** 2).sum()

    assert gradcheck(loss, [x, w, g, b], h=1e-5) <= 1e-6


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.register("w", np.zeros(3))
    with pytest.raises(ConfigError):
        store.register("w", np.zeros(3))


def test_no_grad_suppresses_tape():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_broadcast_add_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda: ((a + b) * (a + b)).sum(), [a, b]) <= 1e-6
