"""AdamW with decoupled weight decay, global-norm clipping and LR schedules."""

import math
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from hlm.errors import ContractError, NumericError
from hlm.settings import OptimizerConfig, ScheduleKind
from hlm.tensor import Tensor


class OptimizerState(NamedTuple):
    """First/second moment buffers per parameter name; ``step`` counts updates."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_state(params: Mapping[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(t.data) for n, t in params.items()},
        v={n: np.zeros_like(t.data) for n, t in params.items()},
    )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(
    grads: Mapping[str, np.ndarray], clip_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global norm is at most ``clip_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= clip_norm:
        return dict(grads), norm
    factor = clip_norm / norm
    return {n: g * g.dtype.type(factor) for n, g in grads.items()}, norm


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    hp: OptimizerConfig,
    lr: float,
    trainable: Iterable[str] | None = None,
) -> OptimizerState:
    """One AdamW update, in place on ``params`` and the moment buffers.

    The decay ``theta *= 1 - lr * weight_decay`` is applied separately from the
    moment update. A non-finite gradient aborts before anything is touched.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    names = list(trainable) if trainable is not None else list(params)
    for name in names:
        if grads[name].shape != params[name].shape:
            raise ContractError(
                f"gradient shape {grads[name].shape} does not match parameter {name} {params[name].shape}"
            )
    clipped, _ = clip_by_global_norm({n: grads[n] for n in names}, hp.clip_norm)

    b1, b2 = hp.betas
    t = state.step + 1
    correction1 = 1 - b1**t
    correction2 = 1 - b2**t
    for name in names:
        theta, g = params[name].data, clipped[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        if hp.weight_decay:
            theta *= 1 - lr * hp.weight_decay
        theta -= lr * (m / correction1) / (np.sqrt(v / correction2) + hp.eps)
    return state._replace(step=t)


class Schedule(NamedTuple):
    kind: ScheduleKind
    peak: float
    warmup_steps: int
    total_steps: int


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup 0 -> peak, then triangular/cosine decay to 0 or constant."""
    kind, peak, warmup, total = schedule
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if kind == "constant" or total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    if kind == "triangular":
        return peak * (1 - progress)
    return peak * 0.5 * (1 + math.cos(math.pi * progress))
