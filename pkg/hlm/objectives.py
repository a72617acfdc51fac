"""Pretraining and fine-tuning losses.

``ce_weight_tying_loss`` scores every supervised position against the whole
vocabulary. ``cwt_loss`` scores it against the target embeddings of the other
supervised positions of the batch only, so it works on a K x K score matrix
and never builds a V-wide activation.
"""

from typing import NamedTuple

import numpy as np

from hlm.data import Batch
from hlm.errors import ContractError, ShapeError, TokenIndexError
from hlm.tensor import (
    Tensor,
    embedding_lookup,
    log_softmax,
    matmul,
    mean_all,
    mul,
    neg,
    pick,
    sum_all,
    take_rows,
    transpose,
)


class LossOutput(NamedTuple):
    loss: Tensor
    n_supervised: int
    aux_in_batch_accuracy: float

    @property
    def value(self) -> float:
        return self.loss.item()


def _require_selection(batch: Batch) -> int:
    if batch.n_supervised == 0:
        raise ContractError("no supervised positions")
    return batch.n_supervised


def check_targets(targets: np.ndarray, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    bad = targets[(targets < 0) | (targets >= n_classes)]
    if bad.size:
        raise TokenIndexError(f"target {int(bad[0])} outside [0, {n_classes})")
    return targets


def selected_outputs(outputs: Tensor, batch: Batch) -> Tensor:
    """Rows of ``O`` at the supervised positions, ``[K, D]``, in selection order."""
    if outputs.ndim != 3 or outputs.shape[:2] != batch.shape:
        raise ShapeError(f"outputs {outputs.shape} do not match batch {batch.shape}")
    return take_rows(outputs.reshape(-1, outputs.shape[-1]), batch.flat_positions())


def ce_from_logit_rows(rows: Tensor, targets: np.ndarray) -> LossOutput:
    """Mean negative log-probability of ``targets`` under row-wise softmax."""
    k, n_classes = rows.shape
    targets = check_targets(targets, n_classes)
    nll = pick(log_softmax(rows), np.arange(k), targets)
    accuracy = float(np.mean(rows.data.argmax(axis=1) == targets))
    return LossOutput(neg(mean_all(nll)), k, accuracy)


def ce_weight_tying_loss(logits: Tensor, batch: Batch) -> LossOutput:
    _require_selection(batch)
    if logits.ndim != 3 or logits.shape[:2] != batch.shape:
        raise ShapeError(f"logits {logits.shape} do not match batch {batch.shape}")
    rows = take_rows(logits.reshape(-1, logits.shape[-1]), batch.flat_positions())
    return ce_from_logit_rows(rows, batch.targets)


def in_batch_scores(outputs: Tensor, e_theta: Tensor, batch: Batch) -> Tensor:
    """``M[a, b] = o_a . e_theta(target_b)`` over the selection, raw dot products."""
    o = selected_outputs(outputs, batch)
    t = embedding_lookup(e_theta, batch.targets)
    return matmul(o, transpose(t))


def in_batch_accuracy(scores: np.ndarray) -> float:
    """Share of rows whose own candidate scores at least as high as any other."""
    return float(np.mean(np.diag(scores) >= scores.max(axis=1)))


def cwt_loss(outputs: Tensor, e_theta: Tensor, batch: Batch) -> LossOutput:
    """InfoNCE over in-batch targets: ``-(1/K) sum_a log softmax(M[a])[a]``.

    Repeated targets stay separate candidates. K = 1 gives a loss of 0.
    """
    k = _require_selection(batch)
    scores = in_batch_scores(outputs, e_theta, batch)
    diagonal = pick(log_softmax(scores), np.arange(k), np.arange(k))
    return LossOutput(neg(mean_all(diagonal)), k, in_batch_accuracy(scores.data))


def cwt_literal_value(outputs: Tensor, e_theta: Tensor, batch: Batch) -> float:
    """The log-free form ``-(1/K) sum_a softmax(M[a])[a]``, for comparison only.

    It lies in [-1, 0) and is not a training objective.
    """
    _require_selection(batch)
    scores = in_batch_scores(outputs, e_theta, batch).data
    shifted = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    return float(-np.mean(np.diag(probs)))


def balanced_ce_loss(logits: Tensor, labels: np.ndarray) -> LossOutput:
    """``sum_c L_c / w_c`` with ``w_c`` the batch frequency of class c.

    ``L_c`` sums the per-sample cross-entropy of class-c samples; absent
    classes contribute 0. The value grows with the batch size.
    """
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"expected non-empty [n, C] logits, got {logits.shape}")
    n, n_classes = logits.shape
    labels = check_targets(labels, n_classes)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    counts = np.bincount(labels, minlength=n_classes)
    weights = Tensor(n / counts[labels], dtype=logits.dtype)
    nll = neg(pick(log_softmax(logits), np.arange(n), labels))
    accuracy = float(np.mean(logits.data.argmax(axis=1) == labels))
    return LossOutput(sum_all(mul(nll, weights)), n, accuracy)
