from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from mobichain import numerics as nx
from mobichain.const import LAYER_GROUPS, MASK_TOKEN
from mobichain.encoding import MaskSpec, MaskStrategy, apply_mask, encode_day
from mobichain.errors import InvalidConfigError, ShapeMismatchError, UnknownGroupError, UnknownTokenError
from mobichain.model import (
    ModelConfig,
    ReconstructMode,
    count_parameters,
    expected_parameter_count,
    forward,
    group_of,
    init_model,
    parameter_shapes,
    predict_proba,
    reconstruct,
    reconstruct_dataset,
    set_trainable,
)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


def test_default_parameter_count():
    cfg = ModelConfig()
    assert expected_parameter_count(cfg) == 227_256
    assert count_parameters(init_model(cfg)) == 227_256


def test_tiny_parameter_count(tiny_config, tiny_model):
    assert count_parameters(tiny_model) == expected_parameter_count(tiny_config)
    assert len(tiny_model) == len(parameter_shapes(tiny_config))


def test_every_parameter_has_a_group(tiny_config):
    names = [name for name, _ in parameter_shapes(tiny_config)]
    assert {group_of(n) for n in names} == set(LAYER_GROUPS)
    assert "block_1.encoder.attn.q_w" in names
    assert "block_3.decoder.norm2.gamma" in names
    assert "mlp_head.out_w" in names


@pytest.mark.parametrize(
    "overrides",
    [{"d_model": 10, "heads": 4}, {"blocks": 2}, {"dtype": "float16"}, {"dropout_p": 1.0}, {"vocab_in": 20}],
)
def test_config_rejects(overrides):
    with pytest.raises(InvalidConfigError):
        ModelConfig(**overrides)


def test_init_is_seeded(tiny_config):
    a, b = init_model(tiny_config), init_model(tiny_config)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert np.all(a["block_1.encoder.norm1.gamma"].data == 1.0)
    assert np.all(a["mlp_head.out_b"].data == 0.0)


def test_forward_shape(tiny_model, complete_dataset):
    probs = forward(tiny_model, complete_dataset.tokens[:3], complete_dataset.day_of_week[:3])
    assert probs.shape == (3, 96, 16)
    assert np.allclose(probs.data.sum(axis=-1), 1.0)
    assert probs.dtype == np.float64


def test_forward_rejects_bad_inputs(tiny_model):
    tokens = np.ones((1, 96), dtype=int)
    with pytest.raises(UnknownTokenError):
        forward(tiny_model, np.zeros((1, 96), dtype=int), np.array([0]))
    with pytest.raises(UnknownTokenError):
        forward(tiny_model, np.full((1, 96), 18), np.array([0]))
    with pytest.raises(UnknownTokenError):
        forward(tiny_model, tokens, np.array([7]))
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, np.ones((1, 95), dtype=int), np.array([0]))
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, tokens, np.array([0, 1]))


def test_mask_token_changes_prediction(tiny_model, complete_dataset):
    tokens = complete_dataset.tokens[:1].copy()
    before = predict_proba(tiny_model, tokens, complete_dataset.day_of_week[:1])
    tokens[0, 40:60] = MASK_TOKEN
    after = predict_proba(tiny_model, tokens, complete_dataset.day_of_week[:1])
    assert not np.allclose(before, after)


def test_dropout_only_in_training(tiny_config, complete_dataset):
    cfg = replace(tiny_config, dropout_p=0.5)
    params = init_model(cfg)
    tokens, dow = complete_dataset.tokens[:1], complete_dataset.day_of_week[:1]
    eval_a = forward(params, tokens, dow).data
    eval_b = forward(params, tokens, dow).data
    train = forward(params, tokens, dow, training=True, rng=np.random.default_rng(0)).data
    assert np.array_equal(eval_a, eval_b)
    assert not np.allclose(eval_a, train)


def test_freezing_stops_gradients(tiny_model, complete_dataset):
    set_trainable(tiny_model, ["embeddings", "mlp_head"])
    probs = forward(tiny_model, complete_dataset.tokens[:1], complete_dataset.day_of_week[:1])
    grads = nx.backward(nx.mean(nx.log(probs, eps=1e-12)))
    assert tiny_model.trainable_groups == {"embeddings", "mlp_head"}
    assert all(t in grads for t in tiny_model.group("mlp_head"))
    assert not any(t in grads for t in tiny_model.group("block_2"))


def test_unknown_groups(tiny_model):
    with pytest.raises(UnknownGroupError):
        tiny_model.group("block_4")
    with pytest.raises(UnknownGroupError):
        set_trainable(tiny_model, ["decoder"])


def test_copy_is_independent(tiny_model):
    tiny_model.set_trainable(["block_3"])
    clone = tiny_model.copy()
    clone["block_3.encoder.attn.q_b"].data += 1.0
    assert np.all(tiny_model["block_3.encoder.attn.q_b"].data == 0.0)
    assert clone.trainable_groups == {"block_3"}
    tiny_model.load_state(clone)
    assert np.all(tiny_model["block_3.encoder.attn.q_b"].data == 1.0)


def test_reconstruct_keeps_observed_slots(tiny_model, workday):
    seq = encode_day(workday)
    masked, _ = apply_mask(seq, MaskSpec(MaskStrategy.PERIOD, 0.3, rng_seed=4))
    filled = reconstruct(tiny_model, masked)
    assert filled.is_complete
    assert np.array_equal(filled.tokens[masked.observed], seq.tokens[masked.observed])
    assert filled.tokens.min() >= 1 and filled.tokens.max() <= 16
    assert filled == reconstruct(tiny_model, masked, ReconstructMode.ARGMAX)


def test_sampled_reconstruction_is_seeded(tiny_model, workday):
    masked, _ = apply_mask(encode_day(workday), MaskSpec(MaskStrategy.TIME_SLOT, 0.7, rng_seed=1))
    a = reconstruct(tiny_model, masked, ReconstructMode.SAMPLE, seed=9)
    b = reconstruct(tiny_model, masked, "sample", seed=9)
    assert a == b


def test_reconstruct_dataset_independent_of_threads(tiny_model, complete_dataset):
    masked = complete_dataset.subset(range(10))
    masked.tokens[:, 50:70] = MASK_TOKEN
    masked.observed[:, 50:70] = False
    single = reconstruct_dataset(tiny_model, masked, rng=np.random.default_rng(3), batch_size=3, threads=1)
    pooled = reconstruct_dataset(tiny_model, masked, rng=np.random.default_rng(3), batch_size=3, threads=4)
    assert np.array_equal(single.tokens, pooled.tokens)
    assert single.is_complete
    assert np.array_equal(single.real, masked.observed)


def _log_likelihood(params, tokens, dow, targets):
    def loss(_tensors):
        probs = forward(params, tokens, dow)
        return nx.mean(nx.log(nx.take_last(probs, targets - 1), eps=1e-12))
    return loss


def test_gradients_match_finite_differences(tiny_model, complete_dataset):
    tokens = complete_dataset.tokens[:2].copy()
    targets = np.minimum(complete_dataset.tokens[:2], 16)
    tokens[:, 30:45] = MASK_TOKEN
    loss = _log_likelihood(tiny_model, tokens, complete_dataset.day_of_week[:2], targets)
    subset = [
        tiny_model["embeddings.token"],
        tiny_model["embeddings.time_w"],
        tiny_model["block_1.encoder.attn.k_w"],
        tiny_model["block_2.decoder.norm1.gamma"],
        tiny_model["block_3.decoder.ffn.in_b"],
        tiny_model["mlp_head.out_w"],
    ]
    error = nx.finite_difference_check(loss, subset, h=1e-7, n_samples=4, rng=np.random.default_rng(1))
    assert error < 1e-5


@pytest.mark.slow
def test_gradients_match_finite_differences_everywhere(tiny_model, complete_dataset):
    tokens = complete_dataset.tokens[:1].copy()
    tokens[:, 60:80] = MASK_TOKEN
    targets = complete_dataset.tokens[:1]
    loss = _log_likelihood(tiny_model, tokens, complete_dataset.day_of_week[:1], targets)
    error = nx.finite_difference_check(loss, list(tiny_model), h=1e-7, n_samples=20, rng=np.random.default_rng(2))
    assert error < 1e-3
