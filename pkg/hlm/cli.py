import contextlib
import io
import logging
from pathlib import Path
from typing import Annotated, Any, Iterator, NamedTuple, Sequence

import typer
from threadpoolctl import threadpool_limits

from hlm import checkpoint as ckpt_io
from hlm.bench import DEFAULT_VOCABS, MIN_REPETITIONS, bench_loss_scaling, bench_training_throughput
from hlm.constants import (
    CONFIG_PATH_ENV_VAR,
    DEFAULT_SYNONYMS_FN,
    PROG_NAME,
    RESOLVED_CONFIG_FN,
    TOKENIZER_FN,
)
from hlm.core import TrainResult, finetune_lm_head, prepare_corpus, train
from hlm.custom_types import MetricChoice, ReportFormatChoice, parse_overrides
from hlm.data import read_documents, split_holdout
from hlm.errors import ContractError, HlmError
from hlm.evaluation import (
    ModelReadout,
    cloze_passages,
    compare_synonym_cosine,
    evaluate,
    load_synonym_pairs,
    synonym_cosine,
)
from hlm.reports import histogram_rows, save_report, write_report
from hlm.settings import TrainConfig, default_config_path, save_yaml, templates_path
from hlm.tokenizer import train_bpe

logger = logging.getLogger(__name__)

app = typer.Typer(
    name=PROG_NAME,
    help="Train and evaluate headless language models (contrastive weight tying)",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


def success(msg: str):
    typer.secho(msg, fg=typer.colors.GREEN)


def error(msg: str):
    typer.secho(f"Error: {msg}", err=True, fg=typer.colors.RED)


@contextlib.contextmanager
def handling_errors(threads: int = 1) -> Iterator[None]:
    """Map library errors to their exit codes; BLAS runs on ``threads`` threads."""
    try:
        with threadpool_limits(limits=threads):
            yield
    except HlmError as err:
        error(str(err))
        raise typer.Exit(err.exit_code)


def emit(records: Sequence[NamedTuple], fmt: ReportFormatChoice, out: Path | None, name: str):
    if out is None:
        buffer = io.StringIO()
        write_report(records, buffer, fmt.value)
        typer.echo(buffer.getvalue(), nl=False)
        return
    path = save_report(records, out / f"{name}.{fmt.value}", fmt.value)
    success(f"Wrote {path}")


def save_resolved(out: Path | None, resolved: TrainConfig | dict[str, Any]):
    """Record the settings behind the reports in ``out``."""
    if out is None:
        return
    if isinstance(resolved, TrainConfig):
        resolved.save(out / RESOLVED_CONFIG_FN)
    else:
        save_yaml(resolved, out / RESOLVED_CONFIG_FN)


def finish(result: TrainResult):
    if result.success:
        success(result.message)
    else:
        error(result.message)
        raise typer.Exit(1)


@app.callback()
def main(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log debug messages")
    ] = False,
):
    """Headless language model pretraining, head recovery and probes."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


ConfigPath = Annotated[
    Path,
    typer.Option(
        "--config",
        "-c",
        help=f"YAML run config (or use the {CONFIG_PATH_ENV_VAR} env var)",
        envvar=CONFIG_PATH_ENV_VAR,
        default_factory=default_config_path,
    ),
]
Overrides = Annotated[
    list[str] | None,
    typer.Option(
        "--set",
        help="Override a config key, e.g. --set model.d_model=64 (repeatable)",
    ),
]
Seed = Annotated[int | None, typer.Option("--seed", help="Override the config seed")]
Threads = Annotated[
    int, typer.Option("--threads", min=1, help="Worker and BLAS threads (1 is deterministic)")
]
OutDir = Annotated[Path, typer.Option("--out", "-o", help="Output directory")]
OptionalOutDir = Annotated[
    Path | None,
    typer.Option("--out", "-o", help="Write the report here instead of stdout"),
]
CheckpointPath = Annotated[
    Path, typer.Option("--checkpoint", help="Checkpoint file (.hlm)", exists=True, dir_okay=False)
]
Format = Annotated[
    ReportFormatChoice,
    typer.Option(
        "--format",
        help="Report format. CSV columns follow the record fields, e.g. "
        "metric,value,n_examples,half_width,checkpoint_digest",
    ),
]


def load_config(config: Path, overrides: list[str] | None, seed: int | None) -> TrainConfig:
    return TrainConfig.from_file(config, parse_overrides(overrides, seed))


@app.command("train")
def train_command(
    out: OutDir,
    config: ConfigPath,
    overrides: Overrides = None,
    seed: Seed = None,
    threads: Threads = 1,
    resume: Annotated[
        Path | None,
        typer.Option("--resume", help="Continue from this checkpoint", exists=True),
    ] = None,
):
    """Pretrain a model (objective and task come from the config).

    Set timing: false in the config for byte-identical metrics.jsonl across runs;
    with the default timing: true the tok_per_s column holds wall-clock rates.
    """
    with handling_errors(threads):
        cfg = load_config(config, overrides, seed)
        result = train(cfg, out, resume_from=resume, threads=threads)
    finish(result)


@app.command("finetune-head")
def finetune_head_command(
    checkpoint: CheckpointPath,
    out: OutDir,
    config: ConfigPath,
    overrides: Overrides = None,
    seed: Seed = None,
    threads: Threads = 1,
):
    """Recover an LM head for a headless checkpoint."""
    with handling_errors(threads):
        cfg = load_config(config, overrides, seed)
        result = finetune_lm_head(ckpt_io.load(checkpoint), cfg, out, threads)
    finish(result)


@app.command("eval")
def eval_command(
    checkpoint: CheckpointPath,
    config: ConfigPath,
    metric: Annotated[
        MetricChoice, typer.Option("--metric", "-m", help="Metric to compute")
    ] = MetricChoice.perplexity,
    naive_readout: Annotated[
        bool,
        typer.Option(
            "--naive-readout", help="Read a headless model out through e_theta^T"
        ),
    ] = False,
    overrides: Overrides = None,
    seed: Seed = None,
    threads: Threads = 1,
    out: OptionalOutDir = None,
    fmt: Format = ReportFormatChoice.jsonl,
):
    """Evaluate a checkpoint on the held-out split of the configured corpus."""
    with handling_errors(threads):
        ckpt = ckpt_io.load(checkpoint)
        cfg = load_config(config, overrides, seed).update(
            task=ckpt.train_config["task"],
            model=ckpt.model_config.model_dump(mode="json"),
        )
        corpus = prepare_corpus(cfg, ckpt.load_tokenizer(), threads)
        tokens, docs = corpus.holdout_tokens, corpus.holdout_docs
        if not docs:
            logger.warning("no held-out documents; evaluating on the training split")
            tokens = corpus.train_tokens
            docs = read_documents(cfg.corpus)
        if metric.value.startswith("retrieval") or metric == MetricChoice.cwt_literal:
            readout = ModelReadout(
                ckpt.params, ckpt.model_config, naive_readout, ckpt_io.file_digest(checkpoint)
            )
        else:
            readout = ModelReadout.from_checkpoint(
                ckpt, naive_readout, ckpt_io.file_digest(checkpoint)
            )
        passages = (
            cloze_passages(corpus.tokenizer, docs, ckpt.model_config.max_len)
            if metric == MetricChoice.cloze
            else []
        )
        report = evaluate(metric.value, readout, tokens, cfg, passages)
    emit([report], fmt, out, f"eval-{metric.value}")
    save_resolved(out, cfg)


@app.command("bench")
def bench_command(
    config: ConfigPath,
    vocab: Annotated[
        list[int] | None, typer.Option("--vocab", help="Vocabulary sizes (repeatable)")
    ] = None,
    k: Annotated[
        list[int] | None, typer.Option("--k", help="Supervised positions K (repeatable)")
    ] = None,
    dim: Annotated[int, typer.Option("--dim", min=1, help="Hidden size D")] = 128,
    seqs: Annotated[int, typer.Option("--seqs", min=1, help="Sequences N")] = 16,
    repetitions: Annotated[
        int, typer.Option("--repetitions", min=MIN_REPETITIONS, help="Timed repetitions")
    ] = MIN_REPETITIONS,
    memory_budget: Annotated[
        int | None,
        typer.Option("--memory-budget", help="Skip grid points above this many bytes"),
    ] = None,
    throughput: Annotated[
        bool,
        typer.Option("--throughput", help="Compare full training-step throughput instead"),
    ] = False,
    steps: Annotated[
        int, typer.Option("--steps", min=1, help="Timed steps for --throughput")
    ] = 10,
    overrides: Overrides = None,
    seed: Seed = None,
    out: OptionalOutDir = None,
    fmt: Format = ReportFormatChoice.csv,
):
    """Benchmark the loss step over a (V, K) grid, single-threaded."""
    with handling_errors(threads=1):
        if throughput:
            cfg = load_config(config, overrides, seed)
            if vocab:
                cfg = cfg.update(**{"model.vocab_size": vocab[0]})
            records = bench_training_throughput(cfg, steps)
            name, resolved = "throughput", cfg
        else:
            resolved = {
                "vocab_sizes": list(vocab or DEFAULT_VOCABS),
                "ks": list(k or (256,)),
                "d_model": dim,
                "n_seqs": seqs,
                "repetitions": repetitions,
                "memory_budget": memory_budget,
                "seed": seed or 0,
            }
            report = bench_loss_scaling(
                resolved["vocab_sizes"],
                resolved["ks"],
                dim,
                seqs,
                repetitions,
                memory_budget=memory_budget,
                seed=resolved["seed"],
            )
            records, name = report.points, "bench"
    emit(records, fmt, out, name)
    save_resolved(out, resolved)


@app.command("probe-synonyms")
def probe_synonyms_command(
    checkpoint: CheckpointPath,
    compare: Annotated[
        Path | None,
        typer.Option(
            "--compare", help="Second checkpoint; reports the mean shift", exists=True
        ),
    ] = None,
    pairs: Annotated[
        Path,
        typer.Option("--pairs", help="token_a<TAB>token_b pair list", exists=True),
    ] = templates_path / DEFAULT_SYNONYMS_FN,
    out: OptionalOutDir = None,
    fmt: Format = ReportFormatChoice.csv,
):
    """Cosine similarity of synonym pairs in the input embeddings."""
    with handling_errors():
        first = ckpt_io.load(checkpoint)
        pair_set = load_synonym_pairs(pairs, first.load_tokenizer())
        if not pair_set.pairs:
            raise ContractError(f"none of the pairs in {pairs} are single tokens")
        e_first = first.params.token_embeddings.data
        if compare is None:
            summary = synonym_cosine(e_first, pair_set)
            success(
                f"mean cosine {summary.mean:.4f} over {summary.n_pairs} pairs "
                f"({pair_set.skipped} skipped, {summary.n_excluded} zero-norm)"
            )
        else:
            second = ckpt_io.load(compare)
            if second.tokenizer != first.tokenizer:
                raise ContractError("checkpoints use different tokenizers")
            comparison = compare_synonym_cosine(
                e_first, second.params.token_embeddings.data, pair_set
            )
            summary = comparison.second
            success(
                f"mean cosine {comparison.first.mean:.4f} -> {comparison.second.mean:.4f} "
                f"(shift {comparison.mean_shift:+.4f}) over {summary.n_pairs} pairs"
            )
            if out is not None:
                emit(histogram_rows(comparison.first), fmt, out, "synonyms-first")
    emit(histogram_rows(summary), fmt, out, "synonyms")
    save_resolved(
        out,
        {
            "checkpoint": str(checkpoint),
            "compare": str(compare) if compare else None,
            "pairs": str(pairs),
            "n_pairs": summary.n_pairs,
            "skipped": pair_set.skipped,
            "train_config": first.train_config,
        },
    )


@app.command("export-tokenizer")
def export_tokenizer_command(
    out: Annotated[Path, typer.Option("--out", "-o", help="Tokenizer file to write")],
    config: ConfigPath,
    checkpoint: Annotated[
        Path | None,
        typer.Option("--checkpoint", help="Extract from this checkpoint", exists=True),
    ] = None,
    overrides: Overrides = None,
    threads: Threads = 1,
):
    """Write the tokenizer of a checkpoint, or train one on the configured corpus."""
    with handling_errors(threads):
        if checkpoint is not None:
            tokenizer = ckpt_io.load(checkpoint).load_tokenizer()
        else:
            cfg = load_config(config, overrides, None)
            train_docs, _ = split_holdout(read_documents(cfg.corpus), cfg.holdout_fraction)
            tokenizer = train_bpe(train_docs, cfg.model.vocab_size)
        path = out / TOKENIZER_FN if out.is_dir() else out
        tokenizer.save(path)
    success(f"Wrote {tokenizer.vocab.size}-token tokenizer to {path}")
