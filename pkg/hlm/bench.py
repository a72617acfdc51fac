"""Loss-step scaling benchmark and training-throughput comparison.

The loss benchmark times one forward+backward of each loss alone, on fixed
random outputs and embeddings, so the backbone does not blur the K*V vs K*K
difference. Allocation counts come from the tensor engine's accounting hook.
"""

import logging
import math
import time
from typing import Iterable, NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from hlm import rng
from hlm.constants import SPECIAL_TOKENS
from hlm.core import train_step
from hlm.data import Batch, BatchSource
from hlm.errors import ConfigError
from hlm.model import init_params
from hlm.objectives import ce_from_logit_rows, cwt_loss, selected_outputs
from hlm.optim import Schedule, init_state, lr_at
from hlm.settings import Objective, TrainConfig
from hlm.tensor import Tape, Tensor, matmul, track_allocations, transpose

logger = logging.getLogger(__name__)

OBJECTIVES: tuple[Objective, ...] = ("vanilla_ce", "headless_cwt")
DEFAULT_VOCABS = (1_000, 5_000, 20_000, 50_000)
MIN_REPETITIONS = 20
WARMUP = 5


class BenchPoint(NamedTuple):
    objective: str
    vocab_size: int
    k: int
    d_model: int
    n_seqs: int
    median_s: float
    iqr_s: float
    peak_bytes: int
    total_bytes: int
    has_vocab_dim: bool
    skipped: bool = False


class BenchReport(NamedTuple):
    points: list[BenchPoint]
    repetitions: int
    warmup: int

    def medians(self, objective: str, k: int) -> list[float]:
        """Medians along the vocabulary grid, in grid order, skipping skipped points."""
        return [
            p.median_s
            for p in self.points
            if p.objective == objective and p.k == k and not p.skipped
        ]

    def point(self, objective: str, vocab_size: int, k: int) -> BenchPoint:
        for p in self.points:
            if (p.objective, p.vocab_size, p.k) == (objective, vocab_size, k):
                return p
        raise KeyError((objective, vocab_size, k))


class ThroughputPoint(NamedTuple):
    objective: str
    vocab_size: int
    steps: int
    tokens_per_s: float


def synthetic_batch(vocab_size: int, k: int, n_seqs: int, seed: int) -> Batch:
    """A batch whose first ``k`` row-major positions are supervised."""
    length = math.ceil(k / n_seqs)
    flat = np.arange(k)
    selection = np.stack([flat // length, flat % length], axis=1).astype(np.int64)
    targets = rng.stream(seed, "bench-targets").integers(
        len(SPECIAL_TOKENS), vocab_size, size=k
    )
    x = np.zeros((n_seqs, length), dtype=np.int64)
    x[selection[:, 0], selection[:, 1]] = targets
    return Batch(x, x, selection, targets)


def estimated_loss_bytes(objective: Objective, vocab_size: int, k: int, itemsize: int) -> int:
    """Rough size of the largest loss buffers (activation, log-softmax, gradient)."""
    width = vocab_size if objective == "vanilla_ce" else k
    return 3 * k * width * itemsize


def loss_step(objective: Objective, outputs: Tensor, e_theta: Tensor, batch: Batch) -> float:
    """Forward and backward of the loss alone; vanilla scores only the K supervised rows."""
    with Tape() as tape:
        if objective == "vanilla_ce":
            rows = matmul(selected_outputs(outputs, batch), transpose(e_theta))
            out = ce_from_logit_rows(rows, batch.targets)
        else:
            out = cwt_loss(outputs, e_theta, batch)
        tape.backward(out.loss)
    return out.value


def _leaves(outputs: np.ndarray, e_theta: np.ndarray) -> tuple[Tensor, Tensor]:
    return Tensor(outputs, requires_grad=True), Tensor(e_theta, requires_grad=True)


def bench_point(
    objective: Objective,
    vocab_size: int,
    k: int,
    d_model: int,
    n_seqs: int,
    repetitions: int,
    warmup: int = WARMUP,
    seed: int = 0,
) -> BenchPoint:
    batch = synthetic_batch(vocab_size, k, n_seqs, seed)
    draws = rng.stream(seed, "bench-leaves", vocab_size, k, d_model)
    outputs = draws.normal(0, 1, size=(*batch.shape, d_model)).astype(np.float32)
    e_theta = draws.normal(0, 0.02, size=(vocab_size, d_model)).astype(np.float32)

    with track_allocations() as tracker:
        loss_step(objective, *_leaves(outputs, e_theta), batch)
    for _ in range(warmup):
        loss_step(objective, *_leaves(outputs, e_theta), batch)
    times = np.empty(repetitions)
    for r in range(repetitions):
        o, e = _leaves(outputs, e_theta)
        started = time.perf_counter()
        loss_step(objective, o, e, batch)
        times[r] = time.perf_counter() - started
    q1, median, q3 = np.percentile(times, [25, 50, 75])
    return BenchPoint(
        objective,
        vocab_size,
        k,
        d_model,
        n_seqs,
        float(median),
        float(q3 - q1),
        tracker.peak_bytes,
        tracker.total_bytes,
        tracker.has_dim(vocab_size),
    )


def bench_loss_scaling(
    vocab_sizes: Iterable[int] = DEFAULT_VOCABS,
    ks: Iterable[int] = (256,),
    d_model: int = 128,
    n_seqs: int = 16,
    repetitions: int = MIN_REPETITIONS,
    warmup: int = WARMUP,
    memory_budget: int | None = None,
    seed: int = 0,
) -> BenchReport:
    """Time both losses over the (V, K) grid, single-threaded.

    A point whose estimated loss buffers exceed ``memory_budget`` bytes is
    reported with ``skipped=True`` instead of being run.
    """
    if repetitions < MIN_REPETITIONS:
        raise ConfigError(f"repetitions must be at least {MIN_REPETITIONS}, got {repetitions}")
    vocab_sizes, ks = list(dict.fromkeys(vocab_sizes)), list(dict.fromkeys(ks))
    points = []
    with threadpool_limits(limits=1):
        for k in ks:
            for vocab_size in vocab_sizes:
                if vocab_size <= len(SPECIAL_TOKENS):
                    raise ConfigError(f"vocabulary size {vocab_size} leaves no ordinary tokens")
                for objective in OBJECTIVES:
                    estimate = estimated_loss_bytes(objective, vocab_size, k, 4)
                    if memory_budget is not None and estimate > memory_budget:
                        logger.warning(
                            "skipping %s V=%d K=%d: ~%d bytes over budget",
                            objective, vocab_size, k, estimate,
                        )
                        points.append(
                            BenchPoint(objective, vocab_size, k, d_model, n_seqs,
                                       math.nan, math.nan, 0, 0, False, skipped=True)
                        )
                        continue
                    point = bench_point(
                        objective, vocab_size, k, d_model, n_seqs, repetitions, warmup, seed
                    )
                    logger.info(
                        "%s V=%d K=%d median %.3gs", objective, vocab_size, k, point.median_s
                    )
                    points.append(point)
    return BenchReport(points, repetitions, warmup)


def bench_training_throughput(
    config: TrainConfig, steps: int, warmup: int = 1
) -> list[ThroughputPoint]:
    """Tokens/s of full training steps (backbone, loss, optimizer) for both objectives.

    Both runs see the same synthetic token stream at ``config.model.vocab_size``.
    """
    if steps < 1:
        raise ConfigError("throughput benchmark needs at least one step")
    total = steps + warmup
    vocab_size = config.model.vocab_size
    window = config.seq_len + 1
    n_tokens = total * config.grad_accumulation * config.batch_size * window
    tokens = rng.stream(config.seed, "bench-tokens").integers(
        len(SPECIAL_TOKENS), vocab_size, size=n_tokens
    )
    results = []
    for objective in OBJECTIVES:
        cfg = config.update(objective=objective, total_steps=total, warmup_steps=0)
        params = init_params(cfg.model, cfg.seed, cfg.dtype)
        state = init_state(params)
        source = BatchSource(tokens, cfg, vocab_size)
        schedule = Schedule("constant", cfg.optimizer.lr, 0, total)
        accum = cfg.grad_accumulation
        elapsed = 0.0
        for step in range(total):
            micro = [source.batch(step * accum + m) for m in range(accum)]
            started = time.perf_counter()
            state, _ = train_step(params, state, micro, cfg, lr_at(schedule, step + 1))
            if step >= warmup:
                elapsed += time.perf_counter() - started
        rate = steps * cfg.tokens_per_step / elapsed
        logger.info("%s: %.0f tokens/s at V=%d", objective, rate, vocab_size)
        results.append(ThroughputPoint(objective, vocab_size, steps, rate))
    return results
