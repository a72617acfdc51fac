"""Tests for the backbone, the tied readout and full-model gradients."""

import numpy as np
import pytest

from hlm.data import make_clm_batch
from hlm.errors import ShapeError
from hlm.model import (
    HEAD,
    TOKEN_EMBEDDINGS,
    Parameters,
    forward_backbone,
    init_params,
    parameter_shapes,
    tied_logits,
)
from hlm.objectives import ce_weight_tying_loss, cwt_loss
from hlm.settings import ModelConfig
from hlm.tensor import Tensor, grad_check


@pytest.fixture
def small_model():
    return ModelConfig(vocab_size=40, d_model=16, max_len=12, n_layers=2, n_heads=2, d_ff=24)


def test_parameter_names_and_shapes(small_model):
    shapes = parameter_shapes(small_model)
    assert shapes[TOKEN_EMBEDDINGS] == (40, 16)
    assert shapes["blocks.1.mlp.w_in"] == (16, 24)
    assert "ln_f.gamma" in shapes
    without = parameter_shapes(small_model.model_copy(update={"final_layer_norm": False}))
    assert "ln_f.gamma" not in without


def test_init_is_seeded(small_model):
    a = init_params(small_model, seed=1)
    b = init_params(small_model, seed=1)
    c = init_params(small_model, seed=2)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a[TOKEN_EMBEDDINGS].data, c[TOKEN_EMBEDDINGS].data)
    np.testing.assert_array_equal(a["blocks.0.ln1.gamma"].data, np.ones(16))
    np.testing.assert_array_equal(a["blocks.0.attn.bq"].data, np.zeros(16))
    assert a.dtype == np.float32


def test_backbone_output_shape(small_model):
    params = init_params(small_model, seed=0)
    x = np.random.default_rng(0).integers(0, 40, size=(3, 10))
    assert forward_backbone(params, x, small_model).shape == (3, 10, 16)


def test_sequence_longer_than_max_len(small_model):
    params = init_params(small_model, seed=0)
    with pytest.raises(ShapeError):
        forward_backbone(params, np.zeros((1, 13), dtype=np.int64), small_model)


def test_causal_outputs_ignore_future_tokens(small_model):
    """Changing position j+1.. leaves outputs at positions <= j bitwise unchanged."""
    config = small_model.model_copy(update={"causal": True})
    params = init_params(config, seed=0, dtype=np.float64)
    x = np.random.default_rng(3).integers(0, 40, size=(2, 10))
    changed = x.copy()
    changed[:, 6:] = (changed[:, 6:] + 1) % 40
    a = forward_backbone(params, x, config).data
    b = forward_backbone(params, changed, config).data
    np.testing.assert_array_equal(a[:, :6], b[:, :6])
    assert not np.array_equal(a[:, 6:], b[:, 6:])


def test_bidirectional_outputs_see_the_future(small_model):
    params = init_params(small_model, seed=0, dtype=np.float64)
    x = np.random.default_rng(3).integers(0, 40, size=(1, 10))
    changed = x.copy()
    changed[0, -1] = (changed[0, -1] + 1) % 40
    a = forward_backbone(params, x, small_model).data
    b = forward_backbone(params, changed, small_model).data
    assert not np.array_equal(a[0, 0], b[0, 0])


def test_head_starts_as_copy_of_embeddings(small_model):
    params = init_params(small_model, seed=0)
    outputs = forward_backbone(params, np.zeros((1, 4), dtype=np.int64), small_model)
    tied = tied_logits(params, outputs).data
    with_head = params.with_head()
    assert HEAD in with_head and HEAD not in params
    np.testing.assert_array_equal(tied_logits(with_head, outputs).data, tied)
    assert tied.shape == (1, 4, 40)


def test_parameters_round_trip_helpers(small_model):
    params = init_params(small_model, seed=0)
    clone = params.clone()
    clone[TOKEN_EMBEDDINGS].data[0, 0] += 1
    assert params[TOKEN_EMBEDDINGS].data[0, 0] != clone[TOKEN_EMBEDDINGS].data[0, 0]
    assert params.astype("float64").dtype == np.float64
    assert params.n_params == sum(a.size for a in params.arrays().values())


def _grad_check_model(objective: str, seed: int) -> float:
    config = ModelConfig(
        vocab_size=24, d_model=32, max_len=8, n_layers=2, n_heads=2, d_ff=48, causal=True
    )
    params = init_params(config, seed=seed, dtype=np.float64)
    tokens = np.random.default_rng(seed).integers(4, 24, size=2 * 5)
    batch = make_clm_batch(tokens, 2, 4)
    assert batch.n_supervised == 8

    def f(p):
        outputs = forward_backbone(p, batch.x_tilde, config)
        if objective == "headless_cwt":
            return cwt_loss(outputs, p.token_embeddings, batch).loss
        return ce_weight_tying_loss(tied_logits(p, outputs), batch).loss

    return grad_check(f, params, max_coords=6, seed=seed, floor=1e-6)


@pytest.mark.parametrize("objective", ["vanilla_ce", "headless_cwt"])
def test_full_model_gradients(objective):
    assert _grad_check_model(objective, seed=0) < 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("objective", ["vanilla_ce", "headless_cwt"])
def test_full_model_gradients_over_seeds(objective, seed):
    assert _grad_check_model(objective, seed) < 1e-4


def test_init_std_matches_config(small_model):
    params = init_params(small_model, seed=3, dtype=np.float64)
    values = params[TOKEN_EMBEDDINGS].data.ravel()
    tolerance = 3 * small_model.init_std / np.sqrt(2 * values.size)
    assert abs(values.std() - small_model.init_std) < tolerance


def test_tied_logits_are_row_dots(small_model):
    params = init_params(small_model, seed=0, dtype=np.float64)
    outputs = Tensor(np.random.default_rng(1).normal(size=(2, 5, 16)))
    logits = tied_logits(params, outputs).data
    e_theta = params[TOKEN_EMBEDDINGS].data
    for i in range(2):
        for j in range(5):
            for v in range(40):
                assert abs(logits[i, j, v] - float(outputs.data[i, j] @ e_theta[v])) < 1e-12


def test_tied_logits_pick_own_row_for_orthogonal_embeddings():
    e_theta = np.eye(8) * 3.0
    params = Parameters.from_arrays({TOKEN_EMBEDDINGS: e_theta})
    logits = tied_logits(params, Tensor(e_theta[None, [5, 0, 7]])).data
    assert logits.argmax(axis=-1).tolist() == [[5, 0, 7]]
