"""Sequence classification on top of a pretrained backbone.

A linear classifier reads one position of the backbone output: the first
position for bidirectional models, the last for causal ones (the only
position that has seen the whole sequence). Training uses the balanced
cross-entropy, so rare labels weigh as much as frequent ones in every batch.
"""

import logging
from typing import NamedTuple

import numpy as np

from hlm import rng
from hlm.errors import ConfigError, ShapeError
from hlm.model import Parameters, forward_backbone
from hlm.objectives import LossOutput, balanced_ce_loss, check_targets
from hlm.optim import Schedule, adamw_step, init_state, lr_at
from hlm.settings import FinetuneConfig, ModelConfig, OptimizerConfig
from hlm.tensor import Tape, Tensor, add, matmul, take_rows

logger = logging.getLogger(__name__)

CLASSIFIER_WEIGHT = "classifier.weight"
CLASSIFIER_BIAS = "classifier.bias"


class ClassifierResult(NamedTuple):
    params: Parameters
    losses: list[float]
    train_accuracy: float


def add_classifier(
    params: Parameters, config: ModelConfig, n_classes: int, seed: int
) -> Parameters:
    """Copy of ``params`` with a fresh ``[D, C]`` classifier and zero bias."""
    if n_classes < 2:
        raise ConfigError(f"a classifier needs at least 2 classes, got {n_classes}")
    arrays = params.arrays()
    dtype = params.dtype
    arrays[CLASSIFIER_WEIGHT] = (
        rng.stream(seed, f"init/{CLASSIFIER_WEIGHT}")
        .normal(0.0, config.init_std, size=(config.d_model, n_classes))
        .astype(dtype)
    )
    arrays[CLASSIFIER_BIAS] = np.zeros(n_classes, dtype=dtype)
    return Parameters.from_arrays(arrays)


def classifier_logits(params: Parameters, x: np.ndarray, config: ModelConfig) -> Tensor:
    x = np.asarray(x, dtype=np.int64)
    outputs = forward_backbone(params, x, config)
    n, length = x.shape
    read = length - 1 if config.causal else 0
    pooled = take_rows(outputs.reshape(-1, config.d_model), np.arange(n) * length + read)
    return add(matmul(pooled, params[CLASSIFIER_WEIGHT]), params[CLASSIFIER_BIAS])


def classifier_step_loss(
    params: Parameters, x: np.ndarray, labels: np.ndarray, config: ModelConfig
) -> LossOutput:
    return balanced_ce_loss(classifier_logits(params, x, config), labels)


def finetune_classifier(
    params: Parameters,
    config: ModelConfig,
    sequences: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    hp: FinetuneConfig,
    batch_size: int = 16,
    seed: int = 0,
) -> ClassifierResult:
    """Train a classifier head (and the backbone unless ``hp.freeze_backbone``).

    ``params`` is left untouched; the result holds the updated copy.
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[0] == 0:
        raise ShapeError(f"expected a non-empty [n, L] id matrix, got {sequences.shape}")
    labels = check_targets(labels, n_classes)
    if labels.shape != (sequences.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {sequences.shape[0]} sequences")

    params = add_classifier(params, config, n_classes, seed)
    names = list(params)
    if hp.freeze_backbone:
        names = [CLASSIFIER_WEIGHT, CLASSIFIER_BIAS]
    opt = OptimizerConfig(lr=hp.lr, weight_decay=hp.weight_decay)
    schedule = Schedule(hp.schedule, hp.lr, hp.warmup_steps, hp.total_steps)
    state = init_state(params)

    n = sequences.shape[0]
    batch_size = min(batch_size, n)
    order = rng.stream(seed, "classifier-order").permutation(n)
    losses = []
    for step in range(hp.total_steps):
        rows = order[(step * batch_size + np.arange(batch_size)) % n]
        with Tape() as tape:
            out = classifier_step_loss(params, sequences[rows], labels[rows], config)
        out.loss.check_finite("loss")
        tape.backward(out.loss)
        grads = {name: params[name].grad for name in names}
        state = adamw_step(params, grads, state, opt, lr_at(schedule, step + 1), names)
        losses.append(out.value)
        logger.debug("classifier step %d loss %.4f", step + 1, out.value)

    predictions = classifier_logits(params, sequences, config).data.argmax(axis=1)
    accuracy = float(np.mean(predictions == labels))
    logger.info("classifier trained for %d steps, accuracy %.3f", hp.total_steps, accuracy)
    return ClassifierResult(params, losses, accuracy)
