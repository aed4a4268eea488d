from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mobichain import numerics as nx
from mobichain.errors import GraphConsumedError, NonScalarLossError, ShapeMismatchError, UnknownTokenError


def _param(shape, seed=0, name=""):
    return nx.Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, name=name, dtype=np.float64)


def test_integer_input_becomes_float():
    assert nx.Tensor([1, 2, 3]).dtype == np.float32
    assert nx.Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_matmul_gradients():
    a = nx.Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], requires_grad=True, dtype=np.float64)
    b = nx.Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], requires_grad=True, dtype=np.float64)
    grads = nx.backward(nx.sum(a @ b))
    assert np.allclose(grads[a], np.ones((2, 2)) @ b.data.T)
    assert np.allclose(grads[b], a.data.T @ np.ones((2, 2)))
    assert a.grad is grads[a]


def test_shared_matmul_over_batch():
    a = _param((4, 5, 3), seed=1)
    w = _param((3, 2), seed=2)
    grads = nx.backward(nx.sum(a @ w))
    assert grads[w].shape == (3, 2)
    assert np.allclose(grads[w], a.data.reshape(-1, 3).sum(axis=0)[:, None] * np.ones((1, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        nx.matmul(_param((2, 3)), _param((2, 3)))


def test_bias_gradient_sums_rows():
    x = _param((4, 3))
    bias = _param((3,), seed=1)
    grads = nx.backward(nx.sum(x + bias))
    assert np.allclose(grads[bias], np.full(3, 4.0))
    with pytest.raises(ShapeMismatchError):
        nx.add(x, _param((4,)))


def test_backward_needs_scalar():
    with pytest.raises(NonScalarLossError):
        nx.backward(_param((2, 2)) * 2.0)


def test_graph_is_consumed_once():
    a = _param((3,))
    loss = nx.sum(a * a)
    nx.backward(loss)
    with pytest.raises(GraphConsumedError):
        nx.backward(loss)


def test_frozen_tensors_get_nothing():
    a = _param((3,))
    frozen = nx.Tensor(np.ones(3), dtype=np.float64)
    grads = nx.backward(nx.sum(nx.mul(a, frozen)))
    assert frozen not in grads
    assert frozen.grad is None
    assert np.allclose(grads[a], 1.0)
    assert nx.backward(nx.sum(frozen)) == {}


def test_no_grad_records_nothing():
    a = _param((3,))
    with nx.no_grad():
        out = nx.sum(a * a)
    assert not out.requires_grad
    assert nx.grad_enabled()


def test_embedding_accumulates_repeated_rows():
    table = _param((5, 2))
    grads = nx.backward(nx.sum(nx.embedding_lookup(table, np.array([[1, 1], [3, 1]]))))
    assert np.allclose(grads[table][1], 3.0)
    assert np.allclose(grads[table][3], 1.0)
    assert np.allclose(grads[table][0], 0.0)


def test_embedding_rejects_unknown_rows():
    with pytest.raises(UnknownTokenError):
        nx.embedding_lookup(_param((5, 2)), np.array([5]))


def test_dropout_needs_generator_in_training():
    a = _param((4,))
    assert nx.dropout(a, 0.5, None, training=False) is a
    with pytest.raises(ValueError):
        nx.dropout(a, 0.5, None, training=True)


def test_custom_op():
    a = _param((3,))
    out = nx.custom_op([a], np.array(np.sum(a.data ** 3)), lambda grad: (grad * 3 * a.data ** 2,), name="cube")
    grads = nx.backward(out)
    assert np.allclose(grads[a], 3 * a.data ** 2)


def test_log_clamp_blocks_gradient():
    a = nx.Tensor([0.0, 2.0], requires_grad=True, dtype=np.float64)
    grads = nx.backward(nx.sum(nx.log(a, eps=1e-7)))
    assert grads[a][0] == 0.0
    assert grads[a][1] == pytest.approx(0.5)


def test_take_last():
    a = _param((2, 3, 4))
    idx = np.array([[0, 1, 2], [3, 3, 0]])
    out = nx.take_last(a, idx)
    assert out.shape == (2, 3)
    grads = nx.backward(nx.sum(out))
    assert grads[a].sum() == 6.0
    assert grads[a][1, 1, 3] == 1.0


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one_with_zero_gradient(values):
    x = nx.Tensor(values, requires_grad=True)
    probs = nx.softmax(x)
    assert np.allclose(probs.data.sum(axis=-1), 1.0)
    grads = nx.backward(nx.sum(probs))
    assert np.allclose(grads[x], 0.0, atol=1e-9)


def test_finite_difference_on_linear_map():
    a = nx.Tensor(np.arange(6.0).reshape(2, 3) / 10, requires_grad=True)
    b = nx.Tensor(np.arange(6.0).reshape(3, 2) / 10, requires_grad=True)
    assert nx.finite_difference_check(lambda ts: nx.sum(ts[0] @ ts[1]), [a, b]) < 1e-9


def test_finite_difference_through_composite_ops():
    x = _param((2, 3, 4), seed=3)
    w = _param((4, 4), seed=4)
    gamma = _param((4,), seed=5)
    beta = _param((4,), seed=6)
    frozen = nx.Tensor(np.ones((2, 3, 4)), dtype=np.float64)

    def loss(ts):
        x, w, gamma, beta = ts[:4]
        h = nx.layer_norm(nx.relu(x @ w) + beta, gamma, beta)
        h = nx.mul(h, ts[4])
        probs = nx.softmax(nx.transpose(nx.reshape(h, (2, 4, 3))))
        return nx.mean(nx.log(probs, eps=1e-12))

    assert nx.finite_difference_check(loss, [x, w, gamma, beta, frozen]) < 1e-6
    assert frozen.grad is None
