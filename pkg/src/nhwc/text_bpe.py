"""Byte-level byte-pair encoding.

Ids 0..255 are raw bytes; every merge appends one id.  Merges are applied in
rank order, so a vocabulary is fully described by its ordered merge list.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError

log = logging.getLogger(__name__)

N_BYTES = 256
HEADER = "bpe-v1"


@dataclass
class BpeVocab:
    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self.ranks = {}
        self.id_to_token = {i: bytes([i]) for i in range(N_BYTES)}
        for rank, (left, right) in enumerate(self.merges):
            new_id = N_BYTES + rank
            if left >= new_id or right >= new_id:
                raise InvalidInputError(f"merge {rank} refers to an id that does not exist yet")
            self.ranks[(left, right)] = rank
            self.id_to_token[new_id] = self.id_to_token[left] + self.id_to_token[right]
        self.token_to_id = {tok: i for i, tok in self.id_to_token.items()}

    @property
    def vocab_size(self):
        return N_BYTES + len(self.merges)

    def save(self, path):
        lines = [f"{HEADER} {self.vocab_size}"]
        lines += [f"{rank} {left} {right}" for rank, (left, right) in enumerate(self.merges)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="ascii").splitlines()
        if not lines:
            raise InvalidInputError(f"{path}: empty vocabulary file")
        head = lines[0].split()
        if len(head) != 2 or head[0] != HEADER:
            raise InvalidInputError(f"{path}: expected header '{HEADER} <vocab_size>'")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if len(parts) != 3:
                raise InvalidInputError(f"{path}:{lineno}: expected 'rank left_id right_id'")
            rank, left, right = map(int, parts)
            if rank != len(merges):
                raise InvalidInputError(f"{path}:{lineno}: ranks must be consecutive")
            merges.append((left, right))
        vocab = cls(merges)
        if vocab.vocab_size != int(head[1]):
            raise InvalidInputError(f"{path}: header says {head[1]} tokens, file has {vocab.vocab_size}")
        return vocab


def _merge_pair(seq, pair, new_id):
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def _as_bytes(s):
    if isinstance(s, str):
        return s.encode("utf-8")
    return bytes(s)


def train_bpe(corpus, target_vocab):
    """Learn merges until ``target_vocab`` ids exist or no pair repeats.

    Ties between equally frequent pairs go to the lexicographically smallest
    ``(left_id, right_id)``.
    """
    if target_vocab < N_BYTES:
        raise InvalidInputError("target_vocab must be at least 256")
    corpus = [list(_as_bytes(s)) for s in corpus]
    if not corpus:
        raise InvalidInputError("cannot train BPE on an empty corpus")
    merges = []
    while N_BYTES + len(merges) < target_vocab:
        counts = Counter()
        for seq in corpus:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        pair, freq = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < 2:
            break
        new_id = N_BYTES + len(merges)
        merges.append(pair)
        corpus = [_merge_pair(seq, pair, new_id) if len(seq) > 1 else seq for seq in corpus]
    return BpeVocab(merges)


def encode(vocab, text):
    seq = list(_as_bytes(text))
    ranks = vocab.ranks
    while len(seq) > 1:
        best = None
        for pair in zip(seq, seq[1:]):
            r = ranks.get(pair)
            if r is not None and (best is None or r < best):
                best = r
        if best is None:
            break
        seq = _merge_pair(seq, vocab.merges[best], N_BYTES + best)
    return seq


def decode(vocab, ids):
    pieces = []
    for i in ids:
        tok = vocab.id_to_token.get(int(i))
        if tok is None:
            raise InvalidInputError(f"token id {i} outside vocabulary of {vocab.vocab_size}")
        pieces.append(tok)
    return b"".join(pieces)


class BpeTokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns merges, ``transform`` encodes texts."""

    def __init__(self, target_vocab=512):
        self.target_vocab = target_vocab

    def fit(self, X, y=None):
        self.vocab_ = train_bpe(list(X), self.target_vocab)
        log.info("trained BPE with %d merges", len(self.vocab_.merges))
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        return [encode(self.vocab_, x) for x in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "vocab_")
        return [decode(self.vocab_, ids) for ids in X]

    @property
    def vocab_size_(self):
        check_is_fitted(self, "vocab_")
        return self.vocab_.vocab_size

    @classmethod
    def from_vocab(cls, vocab):
        tok = cls(target_vocab=vocab.vocab_size)
        tok.vocab_ = vocab
        return tok
