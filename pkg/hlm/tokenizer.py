"""Byte-level BPE: training, encoding and the ``HLM-BPE v1`` file format.

Text is pre-split into pieces that carry their leading whitespace (the word
boundary marker), each piece is turned into UTF-8 bytes and every byte is
shown as one printable character, so symbols never contain whitespace and
the merge file stays line/space separated.

An ``HLM-BPE v1`` file is UTF-8 text::

    HLM-BPE v1
    specials <pad> <mask> <unk> <bos>
    alphabet <symbol> <symbol> ...
    <left> <right> <id>        (one line per merge, in merge order)

The ``specials`` line is part of v1: it fixes ids 0-3. Every merge adds one
token that is neither a special nor an earlier token, so ids after the
alphabet are consecutive.
"""

import heapq
import logging
import re
from collections import Counter, defaultdict
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from hlm.constants import SPECIAL_TOKENS, TOKENIZER_HEADER
from hlm.errors import ConfigError, DataError, TokenIndexError

logger = logging.getLogger(__name__)

PIECE_PATTERN = re.compile(r"\s?\S+|\s")
REPLACEMENT = "\N{REPLACEMENT CHARACTER}".encode()


@lru_cache(maxsize=1)
def byte_alphabet() -> tuple[dict[int, str], dict[str, int]]:
    """Map every byte to a printable, non-whitespace character."""
    printable = [
        *range(ord("!"), ord("~") + 1),
        *range(ord("¡"), ord("¬") + 1),
        *range(ord("®"), ord("ÿ") + 1),
    ]
    encoder, extra = {}, 0
    for b in range(256):
        if b in printable:
            encoder[b] = chr(b)
        else:
            encoder[b] = chr(256 + extra)
            extra += 1
    return encoder, {c: b for b, c in encoder.items()}


def split_pieces(text: str) -> list[str]:
    return PIECE_PATTERN.findall(text)


def to_symbols(piece: str) -> tuple[str, ...]:
    encoder, _ = byte_alphabet()
    return tuple(encoder[b] for b in piece.encode("utf-8"))


class Vocab:
    """token <-> id maps; the special tokens hold the lowest ids."""

    def __init__(self, tokens: list[str], specials: tuple[str, ...] = SPECIAL_TOKENS):
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise DataError("vocabulary tokens are not unique")
        if len(specials) != len(SPECIAL_TOKENS):
            raise ConfigError(
                f"expected {len(SPECIAL_TOKENS)} specials (pad, mask, unk, bos), got {specials}"
            )
        self.specials = specials
        self.pad_id, self.mask_id, self.unk_id, self.bos_id = range(len(specials))

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def n_special(self) -> int:
        return len(self.specials)


class TokenizerModel:
    def __init__(
        self,
        alphabet: list[str],
        merges: list[tuple[str, str]],
        specials: tuple[str, ...] = SPECIAL_TOKENS,
    ):
        self.alphabet = alphabet
        self.merges = merges
        tokens = [*specials, *alphabet]
        known = set(tokens)
        for left, right in merges:
            if left + right in known:
                raise DataError(
                    f"merge {left} {right} produces an existing or special token"
                )
            known.add(left + right)
            tokens.append(left + right)
        self.vocab = Vocab(tokens, specials)
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self._cache: dict[str, list[int]] = {}

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TokenizerModel)
            and self.alphabet == other.alphabet
            and self.merges == other.merges
            and self.vocab.specials == other.vocab.specials
        )

    def apply_merges(self, symbols: tuple[str, ...]) -> list[str]:
        syms = list(symbols)
        while len(syms) > 1:
            candidates = [
                (self.ranks[p], p) for p in zip(syms, syms[1:]) if p in self.ranks
            ]
            if not candidates:
                break
            _, pair = min(candidates)
            syms = merge_pair(syms, pair)
        return syms

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text``; bytes outside the alphabet become UNK."""
        ids: list[int] = []
        t2i, unk = self.vocab.token_to_id, self.vocab.unk_id
        for piece in split_pieces(text):
            cached = self._cache.get(piece)
            if cached is None:
                cached = [t2i.get(s, unk) for s in self.apply_merges(to_symbols(piece))]
                self._cache[piece] = cached
            ids.extend(cached)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        _, decoder = byte_alphabet()
        vocab = self.vocab
        out = bytearray()
        for i in ids:
            i = int(i)
            if not 0 <= i < vocab.size:
                raise TokenIndexError(f"token id {i} outside [0, {vocab.size})")
            if i < vocab.n_special:
                if i == vocab.unk_id:
                    out += REPLACEMENT
                continue
            out += bytes(decoder[c] for c in vocab.id_to_token[i])
        return out.decode("utf-8", errors="replace")

    def dumps(self) -> str:
        lines = [
            TOKENIZER_HEADER,
            "specials " + " ".join(self.vocab.specials),
            "alphabet " + " ".join(self.alphabet),
        ]
        t2i = self.vocab.token_to_id
        lines += [f"{left} {right} {t2i[left + right]}" for left, right in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TokenizerModel":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 3 or lines[0] != TOKENIZER_HEADER:
            raise DataError(f"not a tokenizer file (expected header '{TOKENIZER_HEADER}')")
        key, *specials = lines[1].split(" ")
        akey, *alphabet = lines[2].split(" ")
        if key != "specials" or akey != "alphabet":
            raise DataError("tokenizer file is missing the specials/alphabet lines")
        merges, ids = [], []
        for n, line in enumerate(lines[3:], start=4):
            parts = line.split(" ")
            if len(parts) != 3 or not parts[2].isdigit():
                raise DataError(f"malformed merge on line {n}: {line!r}")
            merges.append((parts[0], parts[1]))
            ids.append(int(parts[2]))
        model = cls([a for a in alphabet if a], merges, tuple(specials))
        t2i = model.vocab.token_to_id
        for (left, right), new_id in zip(merges, ids):
            if t2i[left + right] != new_id:
                raise DataError(f"merge {left} {right} declares id {new_id}")
        return model

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def load(cls, path: Path) -> "TokenizerModel":
        try:
            return cls.loads(path.read_bytes().decode("utf-8"))
        except OSError as err:
            raise DataError(f"cannot read tokenizer {path}: {err}")


def merge_pair(syms: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_bpe(
    corpus: Iterable[str],
    target_vocab: int,
    specials: tuple[str, ...] = SPECIAL_TOKENS,
) -> TokenizerModel:
    """Greedy most-frequent-pair merges; frequency ties go to the smallest pair."""
    counts: Counter[tuple[str, ...]] = Counter()
    for text in corpus:
        counts.update(to_symbols(p) for p in split_pieces(text))
    if not counts:
        raise DataError("cannot train a tokenizer on an empty corpus")

    encoder, _ = byte_alphabet()
    seen = {s for word in counts for s in word}
    alphabet = [encoder[b] for b in range(256) if encoder[b] in seen]
    base = len(specials) + len(alphabet)
    if target_vocab < base:
        raise ConfigError(
            f"target vocabulary {target_vocab} is smaller than "
            f"{len(alphabet)} base symbols + {len(specials)} specials"
        )

    words = [list(w) for w in counts]
    freqs = list(counts.values())
    pair_counts: defaultdict[tuple[str, str], int] = defaultdict(int)
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, word in enumerate(words):
        for pair in zip(word, word[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    known = {*specials, *alphabet}
    while len(known) < target_vocab and heap:
        neg_count, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg_count or neg_count == 0:
            continue
        # every merge must add exactly one new, non-special token
        if pair[0] + pair[1] in known:
            continue
        merges.append(pair)
        known.add(pair[0] + pair[1])
        changed: set[tuple[str, str]] = set()
        for wi in where.pop(pair):
            word, f = words[wi], freqs[wi]
            old = list(zip(word, word[1:]))
            if pair not in old:
                continue
            for p in old:
                pair_counts[p] -= f
                changed.add(p)
            word = merge_pair(word, pair)
            words[wi] = word
            for p in zip(word, word[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                changed.add(p)
        pair_counts.pop(pair, None)
        changed.discard(pair)
        for p in changed:
            if pair_counts[p] > 0:
                heapq.heappush(heap, (-pair_counts[p], p))
            else:
                pair_counts.pop(p, None)

    if len(known) < target_vocab:
        logger.warning(
            "corpus exhausted after %d merges; vocabulary has %d of %d tokens",
            len(merges),
            len(known),
            target_vocab,
        )
    return TokenizerModel(alphabet, merges, specials)
