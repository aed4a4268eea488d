from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mobichain import numerics as nx
from mobichain.errors import InvalidConfigError, ShapeMismatchError
from mobichain.loss import (
    LossConfig,
    combined_loss,
    dtw_value,
    masked_combined_loss,
    soft_dtw_loss,
    transition_loss,
    weighted_cross_entropy,
)

LN16 = math.log(16)


def _uniform(length, batch=None):
    shape = (length, 16) if batch is None else (batch, length, 16)
    return nx.Tensor(np.full(shape, 1 / 16), dtype=np.float64)


def _one_hot(target):
    return nx.Tensor(np.eye(16)[np.asarray(target) - 1], dtype=np.float64)


def _softmax_param(shape, seed):
    return nx.Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, dtype=np.float64)


def test_cross_entropy_reference_values():
    target = np.array([1, 1, 2, 16])
    assert weighted_cross_entropy(_uniform(4), target, np.ones(16)).item() == pytest.approx(LN16)
    assert weighted_cross_entropy(_one_hot(target), target, np.ones(16)).item() == pytest.approx(0.0)


def test_cross_entropy_skips_slots_without_target():
    pred = _one_hot([1, 2, 3])
    assert weighted_cross_entropy(pred, np.array([1, 2, 0]), np.ones(16)).item() == pytest.approx(0.0)
    assert weighted_cross_entropy(pred, np.array([0, 0, 0]), np.ones(16)).item() == 0.0


def test_cross_entropy_class_weights():
    weights = np.ones(16)
    weights[0] = 3.0
    value = weighted_cross_entropy(_uniform(2), np.array([1, 2]), weights).item()
    assert value == pytest.approx((3.0 + 1.0) / 2 * LN16)


def test_cross_entropy_clamps_zero_probability():
    value = weighted_cross_entropy(_one_hot([2]), np.array([1]), np.ones(16), eps=1e-7).item()
    assert value == pytest.approx(-math.log(1e-7))


def test_batch_is_mean_of_examples():
    pred = nx.Tensor(np.stack([np.full((3, 16), 1 / 16), np.eye(16)[[0, 1, 2]]]), dtype=np.float64)
    value = weighted_cross_entropy(pred, np.array([[1, 2, 3], [1, 2, 3]]), np.ones(16)).item()
    assert value == pytest.approx(LN16 / 2)


def test_transition_loss_reference_values():
    assert transition_loss(_uniform(3), np.array([1, 1, 2])).item() == pytest.approx(
        -(math.log(15 / 16) + math.log(1 / 16)) / 2, abs=1e-4)
    assert transition_loss(_uniform(3), np.array([1, 1, 2])).item() == pytest.approx(1.4186, abs=1e-4)
    assert transition_loss(_uniform(5), np.array([4, 4, 4, 4, 4])).item() == pytest.approx(LN16)


def test_transition_loss_is_small_for_exact_predictions():
    target = np.array([1, 1, 16, 2, 2])
    assert transition_loss(_one_hot(target), target).item() < 1e-5


def test_shape_checks():
    with pytest.raises(ShapeMismatchError):
        weighted_cross_entropy(_uniform(4), np.array([1, 2]), np.ones(16))
    with pytest.raises(ShapeMismatchError):
        transition_loss(_uniform(2), np.array([1, 17]))


def test_hard_dtw_reference():
    x = np.array([[0.0], [1.0], [2.0]])
    y = np.array([[0.0], [2.0]])
    assert dtw_value(x, y) == pytest.approx(1.0)
    assert dtw_value(x, x) == 0.0
    with pytest.raises(ValueError):
        dtw_value(x, y, gamma=-1.0)


def _exhaustive_dtw(x, y):
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)

    def walk(i, j):
        if i == j == 0:
            return cost[0, 0]
        steps = [(i - di, j - dj) for di, dj in ((1, 0), (0, 1), (1, 1)) if i >= di and j >= dj]
        return cost[i, j] + min(walk(*step) for step in steps)

    return walk(len(x) - 1, len(y) - 1)


@settings(max_examples=200)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(-3, 3)),
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(-3, 3)),
)
def test_hard_dtw_matches_exhaustive_alignment(x, y):
    hard = dtw_value(x, y)
    assert hard == pytest.approx(_exhaustive_dtw(x, y), abs=1e-9)
    assert dtw_value(x, y, gamma=1e-3) == pytest.approx(hard, abs=1e-2)


@settings(max_examples=40)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(-3, 3)),
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(-3, 3)),
    st.floats(0.05, 2.0),
)
def test_soft_dtw_lower_bounds_hard_dtw(x, y, gamma):
    assert dtw_value(x, y, gamma) <= dtw_value(x, y) + 1e-9


def test_soft_dtw_only_counts_complete_targets():
    pred = _uniform(4, batch=2)
    complete = np.array([[1, 1, 2, 2], [1, 1, 2, 2]])
    partial = np.array([[1, 1, 2, 2], [1, 0, 2, 2]])
    full = soft_dtw_loss(pred, complete, gamma=0.0).item()
    half = soft_dtw_loss(pred, partial, gamma=0.0).item()
    assert half == pytest.approx(full / 2)
    assert soft_dtw_loss(pred, np.zeros((2, 4), dtype=int)).item() == 0.0


def test_hard_dtw_of_exact_prediction_is_zero():
    target = np.array([3, 3, 5, 16])
    assert soft_dtw_loss(_one_hot(target), target, gamma=0.0).item() == pytest.approx(0.0)


@pytest.mark.parametrize("gamma", [1.0, 0.1])
def test_soft_dtw_gradient(gamma):
    logits = _softmax_param((2, 6, 16), seed=3)
    target = np.array([[1, 1, 2, 2, 16, 3], [4, 4, 4, 5, 5, 5]])
    error = nx.finite_difference_check(lambda ts: soft_dtw_loss(nx.softmax(ts[0]), target, gamma), [logits])
    assert error < 1e-6


def test_combined_loss_is_weighted_sum():
    logits = _softmax_param((2, 8, 16), seed=1)
    pred = nx.softmax(logits)
    target = np.array([[1, 1, 16, 2, 2, 2, 16, 1], [1, 1, 1, 1, 10, 10, 1, 1]])
    cfg = LossConfig(w1=1.0, w2=0.2, w3=0.1)
    expected = (
        weighted_cross_entropy(pred, target, cfg.weights, cfg.eps).item()
        + 0.2 * transition_loss(pred, target, cfg.eps).item()
        + 0.1 * soft_dtw_loss(pred, target, cfg.dtw_gamma).item()
    )
    assert combined_loss(pred, target, cfg).item() == pytest.approx(expected)


def test_combined_loss_gradient():
    logits = _softmax_param((2, 8, 16), seed=2)
    target = np.array([[1, 1, 16, 2, 2, 2, 16, 1], [1, 1, 1, 0, 10, 10, 1, 1]])
    cfg = LossConfig(w1=1.0, w2=0.2, w3=0.1)
    error = nx.finite_difference_check(lambda ts: combined_loss(nx.softmax(ts[0]), target, cfg), [logits])
    assert error < 1e-6


def test_masked_loss_weights_real_and_synthetic_slots():
    pred = _uniform(4)
    target = np.array([1, 2, 3, 4])
    cfg = LossConfig(w2=0.0, w3=0.0, w_l=1.0, w_s=0.5)
    all_real = masked_combined_loss(pred, target, np.ones(4), cfg).item()
    all_synthetic = masked_combined_loss(pred, target, np.zeros(4), cfg).item()
    mixed = masked_combined_loss(pred, target, np.array([1, 1, 0, 0]), cfg).item()
    assert all_real == pytest.approx(LN16)
    assert all_synthetic == pytest.approx(0.5 * LN16)
    assert mixed == pytest.approx(1.5 * LN16)
    assert all_real == pytest.approx(combined_loss(pred, target, cfg).item())


def test_masked_loss_gradient():
    logits = _softmax_param((2, 6, 16), seed=4)
    target = np.array([[1, 1, 2, 2, 16, 3], [4, 4, 4, 5, 5, 5]])
    real = np.array([[1, 1, 0, 0, 1, 1], [0, 0, 0, 0, 0, 1]])
    cfg = LossConfig()
    error = nx.finite_difference_check(lambda ts: masked_combined_loss(nx.softmax(ts[0]), target, real, cfg), [logits])
    assert error < 1e-6


@pytest.mark.parametrize(
    "kwargs",
    [{"class_weights": (1.0,) * 15}, {"w2": -1.0}, {"eps": 0.0}, {"class_weights": (-1.0,) + (1.0,) * 15}],
)
def test_loss_config_rejects(kwargs):
    with pytest.raises(InvalidConfigError):
        LossConfig(**kwargs)


def test_with_class_weights_keeps_other_fields():
    cfg = LossConfig(w2=0.3, masked_only=True).with_class_weights(np.full(16, 2.0))
    assert cfg.w2 == 0.3
    assert cfg.masked_only
    assert cfg.weights[5] == 2.0
