"""Pretraining and head-recovery runs.

Both objectives run the same backbone; ``loss_for`` is the only place where
vanilla and headless training differ.
"""

import logging
import time
from pathlib import Path
from typing import Iterable, Literal, NamedTuple

import numpy as np
from pydantic import BaseModel

from hlm import checkpoint as ckpt_io
from hlm.checkpoint import Checkpoint, Stage
from hlm.constants import (
    CHECKPOINT_FN,
    METRICS_FN,
    RESOLVED_CONFIG_FN,
    TOKENIZER_FN,
)
from hlm.data import (
    Batch,
    BatchSource,
    encode_documents,
    prefetch,
    read_documents,
    split_holdout,
)
from hlm.errors import ConfigError, ContractError, DataError, NumericError
from hlm.model import Parameters, forward_backbone, init_params, tied_logits
from hlm.objectives import LossOutput, ce_weight_tying_loss, cwt_loss
from hlm.optim import OptimizerState, Schedule, adamw_step, init_state, lr_at
from hlm.settings import Objective, TrainConfig
from hlm.tensor import Tape, track_allocations
from hlm.tokenizer import TokenizerModel, train_bpe

logger = logging.getLogger(__name__)


class StartRecord(BaseModel):
    event: Literal["start", "resume"] = "start"
    step: int = 0
    seed: int
    objective: Objective
    task: str
    stage: Stage
    vocab_size: int
    n_params: int
    config_digest: str


class MetricsRecord(BaseModel):
    step: int
    loss: float
    lr: float
    tok_per_s: float | None
    aux_acc: float
    mem_bytes: int


class AbortRecord(BaseModel):
    event: Literal["abort"] = "abort"
    step: int
    reason: str


class StepStats(NamedTuple):
    loss: float
    aux_acc: float
    mem_bytes: int


class Corpus(NamedTuple):
    tokenizer: TokenizerModel
    train_tokens: np.ndarray
    holdout_docs: list[str]
    holdout_tokens: np.ndarray


class TrainResult(NamedTuple):
    """Result of a pretraining or head-recovery run."""

    success: bool
    message: str
    checkpoint: Checkpoint
    checkpoint_path: Path | None
    metrics_path: Path
    last: MetricsRecord | None = None


def prepare_corpus(
    config: TrainConfig,
    tokenizer: TokenizerModel | None = None,
    threads: int = 1,
) -> Corpus:
    """Read, split and encode the corpus; trains a tokenizer when none is given."""
    if not config.corpus:
        raise DataError("no corpus configured (set 'corpus' in the config)")
    train_docs, holdout_docs = split_holdout(
        read_documents(config.corpus), config.holdout_fraction
    )
    if tokenizer is None:
        if config.tokenizer is not None:
            tokenizer = TokenizerModel.load(config.tokenizer)
        else:
            tokenizer = train_bpe(train_docs, config.model.vocab_size)
    return Corpus(
        tokenizer,
        encode_documents(tokenizer, train_docs, threads),
        holdout_docs,
        encode_documents(tokenizer, holdout_docs, threads),
    )


def fit_vocab(config: TrainConfig, tokenizer: TokenizerModel) -> TrainConfig:
    size = tokenizer.vocab.size
    if size == config.model.vocab_size:
        return config
    if size > config.model.vocab_size:
        raise ConfigError(
            f"tokenizer has {size} tokens but model.vocab_size is {config.model.vocab_size}"
        )
    logger.warning("vocabulary has %d tokens, shrinking model.vocab_size", size)
    return config.update(**{"model.vocab_size": size})


def loss_for(
    objective: Objective, params: Parameters, batch: Batch, config: TrainConfig
) -> LossOutput:
    outputs = forward_backbone(params, batch.x_tilde, config.model)
    if objective == "headless_cwt":
        return cwt_loss(outputs, params.token_embeddings, batch)
    return ce_weight_tying_loss(tied_logits(params, outputs), batch)


def train_step(
    params: Parameters,
    state: OptimizerState,
    batches: list[Batch],
    config: TrainConfig,
    lr: float,
    trainable: list[str] | None = None,
) -> tuple[OptimizerState, StepStats]:
    """Accumulate gradients over micro-batches (each loss divided by their count), then step."""
    names = trainable if trainable is not None else list(params)
    grads = {n: np.zeros_like(params[n].data) for n in names}
    losses, accs, mem = [], [], 0
    for batch in batches:
        with track_allocations() as tracker:
            with Tape() as tape:
                out = loss_for(config.objective, params, batch, config)
                scaled = out.loss * (1.0 / len(batches))
            out.loss.check_finite("loss")
            tape.backward(scaled)
        mem = max(mem, tracker.total_bytes)
        for n in names:
            if params[n].grad is not None:
                grads[n] += params[n].grad
        losses.append(out.value)
        accs.append(out.aux_in_batch_accuracy)
    state = adamw_step(params, grads, state, config.optimizer, lr, names)
    return state, StepStats(float(np.mean(losses)), float(np.mean(accs)), mem)


def write_record(path: Path, record: BaseModel) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(record.model_dump_json() + "\n")


def run_loop(
    params: Parameters,
    state: OptimizerState,
    config: TrainConfig,
    source: BatchSource,
    out_dir: Path,
    stage: Stage,
    tokenizer: TokenizerModel,
    start_step: int = 0,
    trainable: list[str] | None = None,
) -> TrainResult:
    metrics_path = out_dir / METRICS_FN

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            stage=stage,
            model_config=config.model,
            params=params,
            step=step,
            seed=config.seed,
            train_config=config.model_dump(mode="json"),
            train_config_digest=config.digest(),
            tokenizer=tokenizer.dumps(),
            optimizer=state,
        )

    if start_step >= config.total_steps:
        return TrainResult(
            success=False,
            message=f"checkpoint is at step {start_step} of {config.total_steps}; "
            "raise total_steps to continue",
            checkpoint=snapshot(start_step),
            checkpoint_path=None,
            metrics_path=metrics_path,
        )
    if start_step == 0:
        metrics_path.write_text("")
    write_record(
        metrics_path,
        StartRecord(
            event="start" if start_step == 0 else "resume",
            step=start_step,
            seed=config.seed,
            objective=config.objective,
            task=config.task,
            stage=stage,
            vocab_size=config.model.vocab_size,
            n_params=params.n_params,
            config_digest=config.digest(),
        ),
    )
    schedule = Schedule(
        config.schedule, config.optimizer.lr, config.warmup_steps, config.total_steps
    )
    accum = config.grad_accumulation

    indices = range(start_step * accum, config.total_steps * accum)
    batches = prefetch(source, indices)
    window: list[StepStats] = []
    window_time, last = 0.0, None
    for step in range(start_step, config.total_steps):
        micro = [next(batches) for _ in range(accum)]
        lr = lr_at(schedule, step + 1)
        started = time.perf_counter()
        try:
            state, stats = train_step(params, state, micro, config, lr, trainable)
        except NumericError as err:
            write_record(metrics_path, AbortRecord(step=step + 1, reason=str(err)))
            batches.close()
            raise NumericError(f"step {step + 1}: {err}")
        window_time += time.perf_counter() - started
        window.append(stats)

        done = step + 1
        if done % config.eval_every == 0 or done == config.total_steps:
            tokens = len(window) * config.tokens_per_step
            last = MetricsRecord(
                step=done,
                loss=float(np.mean([s.loss for s in window])),
                lr=lr,
                tok_per_s=tokens / window_time if config.timing and window_time else None,
                aux_acc=float(np.mean([s.aux_acc for s in window])),
                mem_bytes=max(s.mem_bytes for s in window),
            )
            write_record(metrics_path, last)
            logger.info(
                "step %d loss %.4f aux_acc %.3f lr %.2e", done, last.loss, last.aux_acc, lr
            )
            window, window_time = [], 0.0
        if done % config.checkpoint_every == 0 and done != config.total_steps:
            ckpt_io.save(snapshot(done), out_dir / f"step-{done:06d}.hlm")
    batches.close()

    final = snapshot(config.total_steps)
    path = ckpt_io.save(final, out_dir / CHECKPOINT_FN)
    return TrainResult(
        success=True,
        message=f"Trained {stage} model for {config.total_steps} steps; checkpoint at {path}",
        checkpoint=final,
        checkpoint_path=path,
        metrics_path=metrics_path,
        last=last,
    )


def stage_for(objective: Objective) -> Stage:
    return "pretrained_headless" if objective == "headless_cwt" else "pretrained_vanilla"


def train(
    config: TrainConfig,
    out_dir: Path,
    resume_from: Path | None = None,
    threads: int = 1,
) -> TrainResult:
    """Pretrain with the configured objective and task for ``total_steps`` steps."""
    out_dir.mkdir(parents=True, exist_ok=True)
    resumed = ckpt_io.load(resume_from) if resume_from else None
    tokenizer = resumed.load_tokenizer() if resumed else None
    corpus = prepare_corpus(config, tokenizer, threads)
    config = fit_vocab(config, corpus.tokenizer)
    stage = stage_for(config.objective)

    if resumed is not None:
        if resumed.stage != stage:
            raise ContractError(f"cannot resume a {resumed.stage} checkpoint as {stage}")
        if resumed.model_config != config.model:
            raise ConfigError("checkpoint model config differs from the run config")
        params = resumed.params.astype(config.dtype)
        state = resumed.optimizer or init_state(params)
        start = resumed.step
        logger.info("resuming from step %d", start)
    else:
        params = init_params(config.model, config.seed, config.dtype)
        state = init_state(params)
        start = 0

    config.save(out_dir / RESOLVED_CONFIG_FN)
    corpus.tokenizer.save(out_dir / TOKENIZER_FN)
    source = BatchSource(corpus.train_tokens, config, config.model.vocab_size)
    return run_loop(params, state, config, source, out_dir, stage, corpus.tokenizer, start)


def finetune_lm_head(
    checkpoint: Checkpoint,
    config: TrainConfig,
    out_dir: Path,
    threads: int = 1,
) -> TrainResult:
    """Recover an LM head for a headless model.

    The untied head starts as a copy of ``e_theta`` and trains with
    cross-entropy, together with the backbone unless ``finetune.freeze_backbone``.
    """
    if checkpoint.stage != "pretrained_headless":
        raise ContractError(
            f"head recovery needs a pretrained_headless checkpoint, got {checkpoint.stage}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config.update(
        task=checkpoint.train_config["task"],
        model=checkpoint.model_config.model_dump(mode="json"),
    ).for_head_recovery()
    tokenizer = checkpoint.load_tokenizer()
    corpus = prepare_corpus(config, tokenizer, threads)

    params = checkpoint.params.astype(config.dtype).with_head()
    trainable: Iterable[str] = list(params)
    if config.finetune.freeze_backbone:
        trainable = ["head"]
    config.save(out_dir / RESOLVED_CONFIG_FN)
    tokenizer.save(out_dir / TOKENIZER_FN)
    source = BatchSource(corpus.train_tokens, config, config.model.vocab_size)
    return run_loop(
        params,
        init_state(params),
        config,
        source,
        out_dir,
        "head_recovered",
        tokenizer,
        trainable=list(trainable),
    )
