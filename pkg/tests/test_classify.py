"""Tests for the balanced-loss sequence classifier."""

import numpy as np
import pytest

from hlm.classify import (
    CLASSIFIER_BIAS,
    CLASSIFIER_WEIGHT,
    add_classifier,
    classifier_logits,
    finetune_classifier,
)
from hlm.errors import ConfigError, ShapeError, TokenIndexError
from hlm.model import TOKEN_EMBEDDINGS, forward_backbone, init_params
from hlm.settings import FinetuneConfig, ModelConfig


@pytest.fixture
def model_config():
    return ModelConfig(vocab_size=40, d_model=16, max_len=8, n_layers=1, n_heads=2, d_ff=32)


@pytest.fixture
def imbalanced_task():
    """24 sequences starting with a low token, 8 with a high one; the label says which."""
    gen = np.random.default_rng(0)
    x = gen.integers(4, 40, size=(32, 8))
    labels = np.array([0] * 24 + [1] * 8)
    x[:, 0] = np.where(labels == 1, gen.integers(30, 40, size=32), gen.integers(4, 14, size=32))
    return x, labels


def test_finetune_learns_imbalanced_labels(model_config, imbalanced_task):
    x, labels = imbalanced_task
    params = init_params(model_config, seed=0)
    before = params[TOKEN_EMBEDDINGS].data.copy()
    hp = FinetuneConfig(lr=1e-2, total_steps=150, warmup_steps=10)
    result = finetune_classifier(params, model_config, x, labels, 2, hp, batch_size=32)

    assert result.train_accuracy >= 0.9
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])
    np.testing.assert_array_equal(params[TOKEN_EMBEDDINGS].data, before)
    assert CLASSIFIER_WEIGHT not in params


def test_frozen_backbone_only_moves_classifier(model_config, imbalanced_task):
    x, labels = imbalanced_task
    params = init_params(model_config, seed=0)
    hp = FinetuneConfig(lr=1e-2, total_steps=5, warmup_steps=0, freeze_backbone=True)
    result = finetune_classifier(params, model_config, x, labels, 2, hp)

    for name in params:
        np.testing.assert_array_equal(result.params[name].data, params[name].data)
    start = add_classifier(params, model_config, 2, seed=0)
    assert not np.array_equal(result.params[CLASSIFIER_WEIGHT].data, start[CLASSIFIER_WEIGHT].data)


def test_absent_class_in_every_batch(model_config, imbalanced_task):
    x, labels = imbalanced_task
    hp = FinetuneConfig(total_steps=3, warmup_steps=0)
    result = finetune_classifier(init_params(model_config, seed=0), model_config, x, labels, 3, hp)
    assert all(np.isfinite(result.losses))
    assert result.params[CLASSIFIER_BIAS].shape == (3,)


@pytest.mark.parametrize("causal, read", [(False, 0), (True, 7)])
def test_logits_read_one_position(model_config, causal, read):
    config = model_config.model_copy(update={"causal": causal})
    params = add_classifier(init_params(config, seed=1, dtype=np.float64), config, 2, seed=1)
    x = np.random.default_rng(2).integers(4, 40, size=(3, 8))
    outputs = forward_backbone(params, x, config).data
    expected = outputs[:, read] @ params[CLASSIFIER_WEIGHT].data + params[CLASSIFIER_BIAS].data
    np.testing.assert_allclose(classifier_logits(params, x, config).data, expected, atol=1e-12)


def test_invalid_inputs(model_config, imbalanced_task):
    x, labels = imbalanced_task
    params = init_params(model_config, seed=0)
    hp = FinetuneConfig(total_steps=1, warmup_steps=0)
    with pytest.raises(ConfigError):
        finetune_classifier(params, model_config, x, np.zeros(32, dtype=int), 1, hp)
    with pytest.raises(TokenIndexError):
        finetune_classifier(params, model_config, x, labels + 1, 2, hp)
    with pytest.raises(ShapeError):
        finetune_classifier(params, model_config, x, labels[:10], 2, hp)
