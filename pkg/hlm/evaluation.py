"""Evaluation probes over checkpoints.

Every probe is deterministic given (checkpoint, data, config): batches are
cut sequentially from the held-out stream and MLM masking draws from the
``eval-masking`` stream keyed by the batch index.
"""

import logging
import math
from pathlib import Path
from typing import Callable, Iterator, Literal, NamedTuple, Sequence

import numpy as np

from hlm import checkpoint as ckpt_io
from hlm import rng
from hlm.checkpoint import Checkpoint
from hlm.constants import HISTOGRAM_BINS, MASK_ID
from hlm.data import Batch, make_clm_batch, make_mlm_batch
from hlm.errors import ContractError, DataError
from hlm.model import (
    HEAD,
    TOKEN_EMBEDDINGS,
    Parameters,
    forward_backbone,
    tied_logits,
)
from hlm.objectives import (
    check_targets,
    cwt_literal_value,
    in_batch_accuracy,
    in_batch_scores,
)
from hlm.settings import ModelConfig, TrainConfig
from hlm.tensor import Tensor
from hlm.tokenizer import TokenizerModel

logger = logging.getLogger(__name__)

Metric = Literal["perplexity", "cloze", "retrieval-in-batch", "retrieval-full", "cwt-literal"]
METRICS: tuple[Metric, ...] = (
    "perplexity",
    "cloze",
    "retrieval-in-batch",
    "retrieval-full",
    "cwt-literal",
)
RetrievalScope = Literal["in_batch", "full_vocab"]

Z_95 = 1.959963984540054


class EvalReport(NamedTuple):
    metric: str
    value: float
    n_examples: int
    half_width: float
    checkpoint_digest: str = ""


class ModelReadout:
    """Logit predictor over a checkpoint's parameters.

    Uses the untied head when present, otherwise the tied ``e_theta^T``
    readout. A headless checkpoint only reads out through ``e_theta^T`` when
    ``naive_readout`` is requested.
    """

    def __init__(
        self,
        params: Parameters,
        config: ModelConfig,
        naive_readout: bool = False,
        digest: str = "",
    ):
        if naive_readout and params.head is not None:
            params = Parameters({n: t for n, t in params.items() if n != HEAD})
        self.params = params
        self.config = config
        self.naive_readout = naive_readout
        self.digest = digest

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, naive_readout: bool = False, digest: str = ""
    ) -> "ModelReadout":
        if ckpt.stage == "pretrained_headless" and not ckpt.has_head and not naive_readout:
            raise ContractError(
                "headless checkpoint has no LM head: run finetune-head first "
                "or request the naive e_theta^T readout"
            )
        return cls(ckpt.params, ckpt.model_config, naive_readout, digest)

    @classmethod
    def from_file(cls, path: Path, naive_readout: bool = False) -> "ModelReadout":
        return cls.from_checkpoint(
            ckpt_io.load(path), naive_readout, ckpt_io.file_digest(path)
        )

    def outputs(self, x: np.ndarray) -> Tensor:
        return forward_backbone(self.params, x, self.config)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return tied_logits(self.params, self.outputs(x)).data

    def next_token_logits(self, context: Sequence[int]) -> np.ndarray:
        """Scores for the token following ``context``.

        A causal model reads the last position; a masked model reads a MASK
        appended after the context.
        """
        ids = list(context)
        if self.config.causal:
            ids = ids[-self.config.max_len :]
        else:
            ids = ids[-(self.config.max_len - 1) :] + [MASK_ID]
        return self.logits(np.asarray([ids], dtype=np.int64))[0, -1]


def eval_batches(tokens: np.ndarray, config: TrainConfig) -> Iterator[Batch]:
    """Consecutive, non-overlapping windows; the last batch may be smaller."""
    tokens = np.asarray(tokens, dtype=np.int64)
    length, n = config.seq_len, config.batch_size
    causal = config.task == "clm"
    window = length + 1 if causal else length
    n_windows = tokens.size // window
    if n_windows == 0:
        raise DataError(f"evaluation stream has fewer than {window} tokens")
    for i, start in enumerate(range(0, n_windows, n)):
        size = min(n, n_windows - start)
        chunk = tokens[start * window : (start + size) * window]
        if causal:
            yield make_clm_batch(chunk, size, length)
            continue
        batch = make_mlm_batch(
            chunk,
            size,
            length,
            config.mask_rate,
            rng.derive_seed(config.seed, "eval-masking", i),
            config.model.vocab_size,
        )
        if batch.n_supervised:
            yield batch


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row negative log-likelihood in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = check_targets(targets, logits.shape[-1])
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    return log_z - shifted[np.arange(len(targets)), targets]


def perplexity_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """``exp`` of the mean NLL of ``targets`` under row-wise softmax of ``[K, V]`` logits."""
    if len(targets) == 0:
        raise ContractError("no supervised positions")
    return float(np.exp(np.mean(token_nll(logits, targets))))


def _mean_report(metric: str, values: np.ndarray, digest: str) -> EvalReport:
    n = len(values)
    if n == 0:
        raise ContractError(f"no examples for {metric}")
    spread = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return EvalReport(metric, float(np.mean(values)), n, Z_95 * spread / math.sqrt(n), digest)


def perplexity(readout: ModelReadout, tokens: np.ndarray, config: TrainConfig) -> EvalReport:
    """Perplexity under the task's factorization (next token, or masked positions)."""
    nll = [
        token_nll(
            readout.logits(batch.x_tilde).reshape(-1, readout.config.vocab_size)[
                batch.flat_positions()
            ],
            batch.targets,
        )
        for batch in eval_batches(tokens, config)
    ]
    if not nll:
        raise ContractError("no supervised positions in the evaluation stream")
    per_token = np.concatenate(nll)
    mean = float(np.mean(per_token))
    value = math.exp(mean)
    spread = float(np.std(per_token, ddof=1)) if per_token.size > 1 else 0.0
    half = value * Z_95 * spread / math.sqrt(per_token.size)
    return EvalReport("perplexity", value, per_token.size, half, readout.digest)


def cloze_passages(
    tokenizer: TokenizerModel, docs: list[str], max_len: int
) -> list[np.ndarray]:
    """One passage per held-out document: its first ``max_len + 1`` token ids."""
    passages = []
    for doc in docs:
        ids = tokenizer.encode(doc)[: max_len + 1]
        if len(ids) >= 2:
            passages.append(np.asarray(ids, dtype=np.int64))
    return passages


def cloze_accuracy(
    predictor: Callable[[Sequence[int]], np.ndarray],
    passages: Sequence[np.ndarray],
    digest: str = "",
) -> EvalReport:
    """Share of passages whose final token is the argmax prediction from the rest.

    Ties go to the lowest token id.
    """
    if not passages:
        raise ContractError("empty passage set")
    hits = np.zeros(len(passages))
    for i, passage in enumerate(passages):
        if len(passage) < 2:
            raise ContractError(f"passage {i} has fewer than 2 tokens")
        hits[i] = int(np.argmax(predictor(passage[:-1]))) == int(passage[-1])
    p = float(hits.mean())
    half = Z_95 * math.sqrt(p * (1 - p) / len(hits))
    return EvalReport("cloze", p, len(hits), half, digest)


def retrieval_accuracy(
    outputs: Tensor, e_theta: Tensor, batch: Batch, scope: RetrievalScope
) -> float:
    """Share of supervised positions whose true target scores highest.

    ``full_vocab`` ranks all V embeddings through the tied-logit path, so it
    agrees with the argmax of ``tied_logits`` exactly.
    """
    if batch.n_supervised == 0:
        raise ContractError("no supervised positions")
    if scope == "in_batch":
        return in_batch_accuracy(in_batch_scores(outputs, e_theta, batch).data)
    logits = tied_logits(Parameters({TOKEN_EMBEDDINGS: e_theta}), outputs)
    rows = logits.data.reshape(-1, e_theta.shape[0])[batch.flat_positions()]
    return float(np.mean(rows.argmax(axis=1) == batch.targets))


def retrieval(
    readout: ModelReadout, tokens: np.ndarray, config: TrainConfig, scope: RetrievalScope
) -> EvalReport:
    hits: list[np.ndarray] = []
    e_theta = readout.params.token_embeddings
    for batch in eval_batches(tokens, config):
        outputs = readout.outputs(batch.x_tilde)
        k = batch.n_supervised
        if scope == "in_batch":
            scores = in_batch_scores(outputs, e_theta, batch).data
            hits.append(np.diag(scores) >= scores.max(axis=1))
        else:
            acc = retrieval_accuracy(outputs, e_theta, batch, scope)
            hits.append(np.full(k, acc))
    values = np.concatenate(hits).astype(np.float64)
    name = "retrieval-in-batch" if scope == "in_batch" else "retrieval-full"
    report = _mean_report(name, values, readout.digest)
    p = report.value
    return report._replace(half_width=Z_95 * math.sqrt(p * (1 - p) / report.n_examples))


def cwt_literal(readout: ModelReadout, tokens: np.ndarray, config: TrainConfig) -> EvalReport:
    """Mean of the log-free in-batch value over evaluation batches, in [-1, 0)."""
    values = [
        cwt_literal_value(
            readout.outputs(batch.x_tilde), readout.params.token_embeddings, batch
        )
        for batch in eval_batches(tokens, config)
    ]
    return _mean_report("cwt-literal", np.asarray(values), readout.digest)


def evaluate(
    metric: Metric,
    readout: ModelReadout,
    tokens: np.ndarray,
    config: TrainConfig,
    passages: Sequence[np.ndarray] = (),
) -> EvalReport:
    if metric == "perplexity":
        return perplexity(readout, tokens, config)
    if metric == "cloze":
        return cloze_accuracy(readout.next_token_logits, passages, readout.digest)
    if metric == "retrieval-in-batch":
        return retrieval(readout, tokens, config, "in_batch")
    if metric == "retrieval-full":
        return retrieval(readout, tokens, config, "full_vocab")
    if metric == "cwt-literal":
        return cwt_literal(readout, tokens, config)
    raise ContractError(f"unknown metric {metric!r}")


class SynonymPairSet(NamedTuple):
    """Distinct, deduplicated single-token id pairs."""

    pairs: list[tuple[int, int]]
    words: list[tuple[str, str]]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def single_token_id(tokenizer: TokenizerModel, word: str) -> int | None:
    """The id of ``word`` as one token, preferring its word-initial form."""
    for form in (" " + word, word):
        ids = tokenizer.encode(form)
        if len(ids) == 1 and ids[0] >= tokenizer.vocab.n_special:
            return ids[0]
    return None


def load_synonym_pairs(path: Path, tokenizer: TokenizerModel) -> SynonymPairSet:
    """Read ``token_a<TAB>token_b`` lines; pairs not in the vocabulary are skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as err:
        raise DataError(f"cannot read synonym file {path}: {err}")
    pairs, words, seen, skipped = [], [], set(), 0
    for n, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected token_a<TAB>token_b")
        a, b = parts[0].strip(), parts[1].strip()
        ia, ib = single_token_id(tokenizer, a), single_token_id(tokenizer, b)
        if ia is None or ib is None or ia == ib:
            skipped += 1
            continue
        key = (min(ia, ib), max(ia, ib))
        if key in seen:
            continue
        seen.add(key)
        pairs.append((ia, ib))
        words.append((a, b))
    logger.info("loaded %d synonym pairs, skipped %d", len(pairs), skipped)
    return SynonymPairSet(pairs, words, skipped)


class CosineSummary(NamedTuple):
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    cosines: np.ndarray
    n_excluded: int = 0

    @property
    def n_pairs(self) -> int:
        return len(self.cosines)


class CosineComparison(NamedTuple):
    first: CosineSummary
    second: CosineSummary

    @property
    def mean_shift(self) -> float:
        return self.second.mean - self.first.mean


def synonym_cosine(
    e_theta: np.ndarray, pairs: SynonymPairSet | Sequence[tuple[int, int]]
) -> CosineSummary:
    """Cosine of each pair's embedding rows, with a histogram over [-1, 1].

    Pairs touching a zero-norm row are excluded and counted.
    """
    id_pairs = pairs.pairs if isinstance(pairs, SynonymPairSet) else list(pairs)
    if not id_pairs:
        raise ContractError("no synonym pairs")
    e = np.asarray(e_theta, dtype=np.float64)
    ids = np.asarray(id_pairs, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= e.shape[0]:
        raise DataError(f"synonym pair id outside [0, {e.shape[0]})")
    a, b = e[ids[:, 0]], e[ids[:, 1]]
    sq_a, sq_b = np.einsum("ij,ij->i", a, a), np.einsum("ij,ij->i", b, b)
    keep = (sq_a > 0) & (sq_b > 0)
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("excluded %d synonym pairs with a zero-norm embedding", excluded)
    if not keep.any():
        raise ContractError("every synonym pair touches a zero-norm embedding")
    dots = np.einsum("ij,ij->i", a[keep], b[keep])
    cosines = np.clip(dots / np.sqrt(sq_a[keep] * sq_b[keep]), -1.0, 1.0)
    counts, edges = np.histogram(cosines, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return CosineSummary(float(np.mean(cosines)), counts, edges, cosines, excluded)


def compare_synonym_cosine(
    first: np.ndarray, second: np.ndarray, pairs: SynonymPairSet
) -> CosineComparison:
    return CosineComparison(synonym_cosine(first, pairs), synonym_cosine(second, pairs))
