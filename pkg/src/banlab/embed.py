"""Co-occurrence association matrix and mixed word embeddings.

Words that share sentences get a row-stochastic association ``A``; the mixed
table ``W' = A W`` averages each word's embedding over its associates and is
concatenated onto the original table, doubling the encoder input width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from banlab.tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


class OutOfVocabularyError(KeyError):
    pass


def _words(vocab) -> list[str]:
    words = list(getattr(vocab, "words", vocab))
    if len(set(words)) != len(words):
        raise ValueError("vocabulary entries must be unique")
    return words


@dataclass
class AssociationMatrix:
    """Row-normalized association weights over an (extended) vocabulary.

    ``raw`` keeps the symmetric pair counts and ``damped`` the counts after
    dividing each row by its word's sentence frequency, so both intermediate
    stages can be inspected; ``sentence_freq[i]`` counts the sentences that
    contain word ``i``; ``skipped`` counts dropped out-of-vocabulary tokens.
    """

    words: list[str]
    raw: np.ndarray
    sentence_freq: np.ndarray
    damped: np.ndarray
    matrix: np.ndarray
    skipped: int = 0
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def row(self, word: str) -> dict[str, float]:
        """Nonzero entries of one row, keyed by word."""
        r = self.matrix[self.index[word]]
        return {self.words[j]: float(r[j]) for j in np.flatnonzero(r)}

    def tensor(self) -> Tensor:
        return Tensor(self.matrix)


def count_pairs(corpus: Iterable[Sequence[str]], index: dict[str, int], on_oov: str = "skip"):
    """Symmetric pair counts and per-word sentence frequencies.

    Each unordered pair of distinct words in a sentence adds one to both
    ``(i, j)`` and ``(j, i)``, however often the words repeat. Shards of a
    corpus can be counted separately and their results added.
    """
    if on_oov not in ("skip", "error"):
        raise ValueError("on_oov must be 'skip' or 'error'")
    V = len(index)
    raw = np.zeros((V, V))
    freq = np.zeros(V)
    skipped = 0
    for sentence in corpus:
        ids = set()
        for tok in sentence:
            if tok in index:
                ids.add(index[tok])
            elif on_oov == "error":
                raise OutOfVocabularyError(f"token {tok!r} is not in the vocabulary")
            else:
                skipped += 1
        ids = sorted(ids)
        freq[ids] += 1
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                raw[ids[a], ids[b]] += 1
                raw[ids[b], ids[a]] += 1
    return raw, freq, skipped


def damp_rows(raw: np.ndarray, freq: np.ndarray) -> np.ndarray:
    """Divide each row by the number of sentences containing its word."""
    return raw / np.where(freq > 0, freq, 1.0)[:, None]


def normalize_rows(damped: np.ndarray) -> np.ndarray:
    """Scale each row to sum to one; rows without co-occurrence stay exactly zero."""
    total = damped.sum(axis=1, keepdims=True)
    return np.divide(damped, total, out=np.zeros_like(damped), where=total > 0)


def build_association(corpus: Sequence[Sequence[str]], vocab, on_oov: str = "skip") -> AssociationMatrix:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    words = _words(vocab)
    index = {w: i for i, w in enumerate(words)}
    raw, freq, skipped = count_pairs(corpus, index, on_oov)
    if skipped:
        log.info("skipped %d out-of-vocabulary tokens", skipped)
    damped = damp_rows(raw, freq)
    return AssociationMatrix(words, raw, freq, damped, normalize_rows(damped), skipped)


def mix_embeddings(A, W) -> Tensor:
    """``W' = A W``."""
    a = A.matrix if isinstance(A, AssociationMatrix) else as_tensor(A).data
    w = as_tensor(W).data
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ValueError(f"cannot mix: association {a.shape} vs embeddings {w.shape}")
    return Tensor(a @ w)


def augment_embeddings(W, W_mixed, vocab, extended_vocab) -> Tensor:
    """Concatenate each model word's row with its mixed row from the extended table."""
    w = as_tensor(W).data
    wm = as_tensor(W_mixed).data
    words = _words(vocab)
    ext = {x: i for i, x in enumerate(_words(extended_vocab))}
    if w.shape[0] != len(words):
        raise ValueError(f"embedding table has {w.shape[0]} rows for {len(words)} words")
    if wm.shape[0] != len(ext):
        raise ValueError(f"mixed table has {wm.shape[0]} rows for {len(ext)} extended words")
    missing = [x for x in words if x not in ext]
    if missing:
        raise OutOfVocabularyError(f"word {missing[0]!r} is missing from the extended vocabulary")
    rows = [ext[x] for x in words]
    return Tensor(np.concatenate([w, wm[rows]], axis=1))


def read_corpus(path) -> list[list[str]]:
    """One sentence per line, whitespace tokenized; blank lines are dropped."""
    with Path(path).open() as fh:
        return [line.split() for line in fh if line.strip()]
