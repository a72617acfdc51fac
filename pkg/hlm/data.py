"""Corpus ingestion and MLM/CLM batch construction.

A batch is a pure function of (token stream, config, seed, batch index):
windows are addressed by index through a per-epoch permutation, and the
masking draws come from a stream keyed by the batch index.
"""

import logging
import queue
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from hlm import rng
from hlm.constants import BOS_ID, MASK_ID, SPECIAL_TOKENS
from hlm.errors import ConfigError, DataError
from hlm.settings import TrainConfig
from hlm.tokenizer import TokenizerModel

logger = logging.getLogger(__name__)

PARAGRAPH_BREAK = re.compile(r"\n[ \t]*\n")

MASK_SHARE = 0.8
RANDOM_SHARE = 0.1


class Batch(NamedTuple):
    """``selection`` holds the supervised (i, j) positions, row-major and unique."""

    x: np.ndarray
    x_tilde: np.ndarray
    selection: np.ndarray
    targets: np.ndarray

    @property
    def n_supervised(self) -> int:
        return len(self.targets)

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_tilde.shape

    def flat_positions(self) -> np.ndarray:
        """Indices of the supervised positions in the flattened ``[N * L]`` grid."""
        return self.selection[:, 0] * self.x_tilde.shape[1] + self.selection[:, 1]


def read_documents(paths: Iterable[Path]) -> list[str]:
    """Paragraphs (blank-line separated) of every UTF-8 corpus file, in order."""
    docs: list[str] = []
    for path in paths:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as err:
            raise DataError(f"cannot read corpus file {path}: {err}")
        docs.extend(p.strip() for p in PARAGRAPH_BREAK.split(text) if p.strip())
    if not docs:
        raise DataError("the corpus is empty")
    return docs


def split_holdout(docs: list[str], fraction: float) -> tuple[list[str], list[str]]:
    """The last ``fraction`` of documents is held out."""
    if fraction <= 0 or len(docs) < 2:
        return docs, []
    n_hold = min(len(docs) - 1, max(1, round(len(docs) * fraction)))
    return docs[:-n_hold], docs[-n_hold:]


def encode_documents(
    tokenizer: TokenizerModel, docs: list[str], threads: int = 1
) -> np.ndarray:
    """Pack ``[BOS] + encode(doc)`` for every document into one id stream."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            encoded = list(pool.map(tokenizer.encode, docs))
    else:
        encoded = [tokenizer.encode(d) for d in docs]
    stream: list[int] = []
    for ids in encoded:
        stream.append(BOS_ID)
        stream.extend(ids)
    return np.asarray(stream, dtype=np.int64)


def make_mlm_batch(
    tokens: np.ndarray,
    n: int,
    seq_len: int,
    mask_rate: float,
    seed: int,
    vocab_size: int,
) -> Batch:
    """Bernoulli selection at ``mask_rate``; selected tokens go 80% MASK, 10% random, 10% kept.

    Targets are always the original tokens.
    """
    if not 0 <= mask_rate < 1:
        raise ConfigError(f"mask_rate must lie in [0, 1), got {mask_rate}")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < n * seq_len:
        raise DataError(f"need {n * seq_len} tokens for an MLM batch, got {tokens.size}")
    x = tokens[: n * seq_len].reshape(n, seq_len)
    draws = rng.stream(seed, "masking")
    selected = draws.random(x.shape) < mask_rate
    action = draws.random(x.shape)
    random_ids = draws.integers(len(SPECIAL_TOKENS), vocab_size, size=x.shape)
    x_tilde = np.where(selected & (action < MASK_SHARE), MASK_ID, x)
    swap = selected & (action >= MASK_SHARE) & (action < MASK_SHARE + RANDOM_SHARE)
    x_tilde = np.where(swap, random_ids, x_tilde)
    selection = np.argwhere(selected).astype(np.int64)
    return Batch(x, x_tilde, selection, x[selected])


def make_clm_batch(tokens: np.ndarray, n: int, seq_len: int) -> Batch:
    """Windows of ``seq_len + 1`` tokens; every position predicts its successor."""
    tokens = np.asarray(tokens, dtype=np.int64)
    window = seq_len + 1
    if tokens.size < n * window:
        raise DataError(f"need {n * window} tokens for a CLM batch, got {tokens.size}")
    w = tokens[: n * window].reshape(n, window)
    x = w[:, :seq_len].copy()
    rows, cols = np.meshgrid(np.arange(n), np.arange(seq_len), indexing="ij")
    selection = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.int64)
    return Batch(x, x, selection, w[:, 1:].reshape(-1).copy())


class BatchSource:
    """Indexed batches over fixed windows of a packed token stream."""

    def __init__(self, tokens: np.ndarray, config: TrainConfig, vocab_size: int):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.config = config
        self.vocab_size = vocab_size
        self.window = config.seq_len + (1 if config.task == "clm" else 0)
        self.n_windows = self.tokens.size // self.window
        if self.n_windows < config.batch_size:
            raise DataError(
                f"corpus has {self.n_windows} windows of {self.window} tokens, "
                f"fewer than batch_size={config.batch_size}"
            )
        logger.debug("batch source: %d windows of %d tokens", self.n_windows, self.window)

    @lru_cache(maxsize=2)
    def permutation(self, epoch: int) -> np.ndarray:
        return rng.stream(self.config.seed, "data-order", epoch).permutation(
            self.n_windows
        )

    def window_ids(self, index: int) -> np.ndarray:
        n = self.config.batch_size
        ids = np.arange(index * n, (index + 1) * n)
        return np.array(
            [self.permutation(int(g // self.n_windows))[g % self.n_windows] for g in ids]
        )

    def batch(self, index: int) -> Batch:
        cfg = self.config
        chunk = np.concatenate(
            [self.tokens[w * self.window : (w + 1) * self.window] for w in self.window_ids(index)]
        )
        if cfg.task == "clm":
            return make_clm_batch(chunk, cfg.batch_size, cfg.seq_len)
        seed = rng.derive_seed(cfg.seed, "masking", index)
        return make_mlm_batch(
            chunk, cfg.batch_size, cfg.seq_len, cfg.mask_rate, seed, self.vocab_size
        )


_DONE = object()


def prefetch(source: BatchSource, indices: Iterable[int], depth: int = 2) -> Iterator[Batch]:
    """Build batches on a worker thread, at most ``depth`` ahead, in index order."""
    buffer: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce() -> None:
        try:
            for i in indices:
                if stop.is_set():
                    return
                buffer.put(source.batch(i))
            buffer.put(_DONE)
        except Exception as err:  # handed to the consumer
            buffer.put(err)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)
