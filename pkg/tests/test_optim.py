"""Tests for AdamW, gradient clipping and learning-rate schedules."""

import math

import numpy as np
import pytest

from hlm.errors import ContractError, NumericError
from hlm.optim import (
    Schedule,
    adamw_step,
    clip_by_global_norm,
    global_norm,
    init_state,
    lr_at,
)
from hlm.settings import OptimizerConfig
from hlm.tensor import Tensor


def params_of(**arrays):
    return {n: Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for n, a in arrays.items()}


def test_zero_grads_only_decay():
    params = params_of(w=[1.0, -2.0, 4.0])
    state = init_state(params)
    hp = OptimizerConfig(weight_decay=0.01)
    state = adamw_step(params, {"w": np.zeros(3)}, state, hp, lr=0.1)
    np.testing.assert_array_equal(params["w"].data, np.array([1.0, -2.0, 4.0]) * (1 - 0.001))
    np.testing.assert_array_equal(state.m["w"], np.zeros(3))
    np.testing.assert_array_equal(state.v["w"], np.zeros(3))
    assert state.step == 1


def test_first_step_moves_by_lr_times_sign():
    """With bias correction the first update is lr * g / (|g| + eps)."""
    params = params_of(w=[0.0, 0.0])
    hp = OptimizerConfig(weight_decay=0.0, clip_norm=100.0)
    adamw_step(params, {"w": np.array([0.5, -3.0])}, init_state(params), hp, lr=0.01)
    np.testing.assert_allclose(params["w"].data, [-0.01, 0.01], rtol=1e-6)


def test_non_finite_grads_abort_without_update():
    params = params_of(w=[1.0, 2.0])
    state = init_state(params)
    with pytest.raises(NumericError):
        adamw_step(params, {"w": np.array([np.nan, 1.0])}, state, OptimizerConfig(), lr=0.1)
    np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])
    assert state.step == 0
    np.testing.assert_array_equal(state.m["w"], [0.0, 0.0])


def test_negative_lr_is_contract_error():
    params = params_of(w=[1.0])
    with pytest.raises(ContractError):
        adamw_step(params, {"w": np.zeros(1)}, init_state(params), OptimizerConfig(), lr=-1)


def test_grad_shape_mismatch():
    params = params_of(w=[1.0, 2.0])
    with pytest.raises(ContractError):
        adamw_step(params, {"w": np.zeros(3)}, init_state(params), OptimizerConfig(), lr=0.1)


def test_trainable_subset_leaves_others_untouched():
    params = params_of(a=[1.0], b=[1.0])
    grads = {"a": np.ones(1), "b": np.ones(1)}
    adamw_step(params, grads, init_state(params), OptimizerConfig(), lr=0.1, trainable=["b"])
    assert params["a"].data[0] == 1.0
    assert params["b"].data[0] != 1.0


@pytest.mark.parametrize("seed", range(5))
def test_clipping_bounds_global_norm(seed):
    gen = np.random.default_rng(seed)
    grads = {"a": gen.normal(size=(4, 3)) * 10, "b": gen.normal(size=5) * 10}
    clipped, before = clip_by_global_norm(grads, 1.0)
    assert before == pytest.approx(global_norm(grads))
    assert global_norm(clipped) <= 1.0 + 1e-6


def test_clipping_below_threshold_is_identity():
    grads = {"a": np.array([0.3, 0.4])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(clipped["a"], grads["a"])


def test_triangular_schedule():
    schedule = Schedule("triangular", 1.0, warmup_steps=10, total_steps=110)
    assert lr_at(schedule, 0) == 0.0
    assert lr_at(schedule, 5) == 0.5
    assert lr_at(schedule, 10) == 1.0
    assert lr_at(schedule, 60) == pytest.approx(0.5)
    assert lr_at(schedule, 110) == 0.0


def test_cosine_schedule_midpoint():
    schedule = Schedule("cosine", 2.0, warmup_steps=0, total_steps=100)
    assert lr_at(schedule, 0) == 2.0
    assert lr_at(schedule, 50) == pytest.approx(1.0)
    assert lr_at(schedule, 100) == pytest.approx(0.0, abs=1e-15)


def test_constant_schedule_after_warmup():
    schedule = Schedule("constant", 1e-4, warmup_steps=4, total_steps=20)
    assert lr_at(schedule, 2) == pytest.approx(5e-5)
    assert all(lr_at(schedule, s) == 1e-4 for s in range(4, 21))


def test_schedule_step_out_of_range():
    with pytest.raises(ContractError):
        lr_at(Schedule("constant", 1.0, 0, 10), 11)


def test_adamw_matches_reference_loop():
    """Three steps against a scalar re-implementation of the update rule."""
    hp = OptimizerConfig(lr=0.05, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1, clip_norm=10.0)
    params = params_of(w=[0.7])
    state = init_state(params)
    theta, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate([0.3, -0.2, 0.5], start=1):
        state = adamw_step(params, {"w": np.array([g])}, state, hp, lr=hp.lr)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        theta *= 1 - hp.lr * hp.weight_decay
        theta -= hp.lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.95**t)) + 1e-8)
    assert params["w"].data[0] == pytest.approx(theta, rel=1e-12)
