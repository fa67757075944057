"""Character n-gram features with separate title and body contexts.

A FeatureSpace holds two vocabularies. Title grams occupy indices
``[0, len(title_vocab))`` and body grams follow, so the same gram seen in the
title and in the description lands on different features.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from darkcti.datamodel import LabeledExample

FEATURE_SPACE_VERSION = 1
VIEW_SPLIT_VERSION = 1


class FeatureSpaceError(ValueError):
    pass


# -- cleaning and grams ----------------------------------------------------

def load_stop_words(path=None) -> frozenset[str]:
    """One word per line. ``path=None`` loads the shipped English list."""
    if path is None:
        text = resources.files("darkcti").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def clean_text(raw: str, stop_words: Iterable[str] = ()) -> list[str]:
    lowered = raw.lower()
    spaced = "".join(ch if ch.isalnum() else " " for ch in lowered)
    stop = stop_words if isinstance(stop_words, (set, frozenset)) else set(stop_words)
    return [w for w in spaced.split() if w not in stop]


@lru_cache(maxsize=200_000)
def _word_grams(word: str, n_min: int, n_max: int) -> tuple[str, ...]:
    if len(word) < n_min:
        return (word,)
    grams = []
    for n in range(n_min, min(n_max, len(word)) + 1):
        grams.extend(word[i:i + n] for i in range(len(word) - n + 1))
    return tuple(grams)


def char_ngrams(word: str, n_min: int = 3, n_max: int = 7) -> Counter:
    """All substrings of length n_min..n_max; a word shorter than n_min is one gram."""
    if n_min < 1 or n_min > n_max:
        raise ValueError(f"need 1 <= n_min <= n_max, got ({n_min}, {n_max})")
    if not word:
        return Counter()
    return Counter(_word_grams(word, n_min, n_max))


def _gram_counts(words: Sequence[str], n_min: int, n_max: int) -> Counter:
    counts: Counter = Counter()
    for w in words:
        counts.update(_word_grams(w, n_min, n_max))
    return counts


# -- sparse vectors --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SparseVector:
    indices: np.ndarray
    weights: np.ndarray
    dimension: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if idx.shape != w.shape:
            raise ValueError("indices and weights differ in length")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dimension:
                raise ValueError("feature index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly ascending")
            if np.any(w == 0) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and positive")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.weights.tolist()))

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.weights, self.weights)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.weights
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (self.dimension == other.dimension and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.weights, other.weights))

    def __repr__(self):
        return f"SparseVector(nnz={self.indices.size}, dimension={self.dimension})"

    @classmethod
    def from_dense(cls, values) -> "SparseVector":
        values = np.asarray(values, dtype=np.float64)
        idx = np.flatnonzero(values)
        return cls(idx, values[idx], values.size)


def stack(vectors: Sequence[SparseVector]) -> sp.csr_matrix:
    """Rows -> CSR matrix; all vectors must share one dimension."""
    if not vectors:
        raise ValueError("no vectors to stack")
    dims = {v.dimension for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"mixed vector dimensions {sorted(dims)}")
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.indices.size for v in vectors])
    indices = np.concatenate([v.indices for v in vectors]) if indptr[-1] else np.zeros(0, np.int64)
    data = np.concatenate([v.weights for v in vectors]) if indptr[-1] else np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dims.pop()))


def row_vector(X: sp.csr_matrix, i: int) -> SparseVector:
    start, end = X.indptr[i], X.indptr[i + 1]
    return SparseVector(X.indices[start:end], X.data[start:end], X.shape[1])


def as_csr(X) -> sp.csr_matrix:
    """Accept a CSR matrix, a SparseVector sequence or a dense array."""
    if sp.issparse(X):
        out = X.tocsr()
    elif isinstance(X, SparseVector):
        out = stack([X])
    elif len(X) and isinstance(X[0], SparseVector):
        out = stack(list(X))
    else:
        out = sp.csr_matrix(np.asarray(X, dtype=np.float64))
    out = out.astype(np.float64)
    out.sort_indices()
    return out


# -- feature space ---------------------------------------------------------

@dataclass(frozen=True, eq=True)
class FeatureSpace:
    n_min: int
    n_max: int
    title_vocab: dict[str, int]
    body_vocab: dict[str, int]
    stop_words: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got ({self.n_min}, {self.n_max})")
        nt = len(self.title_vocab)
        if sorted(self.title_vocab.values()) != list(range(nt)):
            raise ValueError("title indices must be exactly 0..|title_vocab|-1")
        if sorted(self.body_vocab.values()) != list(range(nt, nt + len(self.body_vocab))):
            raise ValueError("body indices must follow the title range")
        object.__setattr__(self, "stop_words", frozenset(self.stop_words))

    @property
    def dimension(self) -> int:
        return len(self.title_vocab) + len(self.body_vocab)

    def __hash__(self):
        return hash((self.n_min, self.n_max, self.dimension))

    def to_dict(self) -> dict:
        by_index = lambda vocab: [g for g, _ in sorted(vocab.items(), key=lambda kv: kv[1])]  # noqa: E731
        return {
            "format": "darkcti.feature_space",
            "version": FEATURE_SPACE_VERSION,
            "n_min": self.n_min,
            "n_max": self.n_max,
            "stop_words": sorted(self.stop_words),
            "title_grams": by_index(self.title_vocab),
            "body_grams": by_index(self.body_vocab),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSpace":
        if data.get("format") != "darkcti.feature_space":
            raise FeatureSpaceError("not a feature space file")
        if data.get("version") != FEATURE_SPACE_VERSION:
            raise FeatureSpaceError(f"unsupported feature space version {data.get('version')!r}")
        title = {g: i for i, g in enumerate(data["title_grams"])}
        offset = len(title)
        body = {g: offset + i for i, g in enumerate(data["body_grams"])}
        return cls(data["n_min"], data["n_max"], title, body, frozenset(data["stop_words"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSpace":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _vocab(doc_grams: Iterable[Counter], min_df: int, offset: int) -> dict[str, int]:
    df: Counter = Counter()
    for grams in doc_grams:
        df.update(grams.keys())
    kept = sorted(g for g, c in df.items() if c >= min_df)
    return {g: offset + i for i, g in enumerate(kept)}


def build_feature_space(corpus: Sequence[LabeledExample], n_min: int = 3, n_max: int = 7,
                        stop_words: Iterable[str] = (), min_df: int = 2) -> FeatureSpace:
    if not corpus:
        raise FeatureSpaceError("corpus is empty")
    if min_df < 1:
        raise ValueError("min_df must be positive")
    if not 1 <= n_min <= n_max:
        raise ValueError(f"need 1 <= n_min <= n_max, got ({n_min}, {n_max})")
    stop = frozenset(stop_words)
    titles = [_gram_counts(clean_text(ex.title_text, stop), n_min, n_max) for ex in corpus]
    bodies = [_gram_counts(clean_text(ex.body_text, stop), n_min, n_max) for ex in corpus]
    title_vocab = _vocab(titles, min_df, 0)
    body_vocab = _vocab(bodies, min_df, len(title_vocab))
    if not title_vocab and not body_vocab:
        raise FeatureSpaceError(f"no n-gram reaches document frequency {min_df}; the feature space is empty")
    return FeatureSpace(n_min, n_max, title_vocab, body_vocab, stop)


def _weights(example: LabeledExample, space: FeatureSpace) -> dict[int, float]:
    acc: dict[int, float] = {}
    for text, vocab in ((example.title_text, space.title_vocab), (example.body_text, space.body_vocab)):
        counts = _gram_counts(clean_text(text, space.stop_words), space.n_min, space.n_max)
        for gram, c in counts.items():
            j = vocab.get(gram)
            if j is not None:
                acc[j] = float(c)
    return acc


def vectorize(example: LabeledExample, space: FeatureSpace) -> SparseVector:
    """Gram counts per context, concatenated, then L2-normalized."""
    acc = _weights(example, space)
    idx = np.array(sorted(acc), dtype=np.int64)
    w = np.array([acc[i] for i in idx.tolist()], dtype=np.float64)
    if w.size:
        w = w / np.sqrt(np.dot(w, w))
    return SparseVector(idx, w, space.dimension)


def vectorize_many(examples: Sequence[LabeledExample], space: FeatureSpace) -> sp.csr_matrix:
    """CSR matrix with one L2-normalized row per example."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for ex in examples:
        acc = _weights(ex, space)
        cols = sorted(acc)
        vals = np.array([acc[c] for c in cols], dtype=np.float64)
        if vals.size:
            vals /= np.sqrt(np.dot(vals, vals))
        indices.extend(cols)
        data.extend(vals.tolist())
        indptr.append(len(indices))
    return sp.csr_matrix((np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64),
                          np.array(indptr, dtype=np.int64)), shape=(len(examples), space.dimension))


# -- co-training views -----------------------------------------------------

VIEW_A, VIEW_B = "A", "B"


@dataclass(frozen=True, eq=True)
class ViewSplit:
    seed: int
    word_to_view: dict[str, str]
    view_a_space: FeatureSpace
    view_b_space: FeatureSpace

    def __hash__(self):
        return hash(self.fingerprint)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.seed}\n".encode())
        for w in sorted(self.word_to_view):
            h.update(f"{w}\t{self.word_to_view[w]}\n".encode())
        return h.hexdigest()[:16]

    def view_of(self, word: str) -> str:
        """Corpus words use the stored assignment; unseen words get a seeded hash bit."""
        v = self.word_to_view.get(word)
        if v is not None:
            return v
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        return VIEW_A if digest[0] & 1 == 0 else VIEW_B

    def space(self, view: str) -> FeatureSpace:
        if view == VIEW_A:
            return self.view_a_space
        if view == VIEW_B:
            return self.view_b_space
        raise ValueError(f"unknown view {view!r}")

    def project(self, example: LabeledExample, view: str) -> LabeledExample:
        stop = self.view_a_space.stop_words
        keep = lambda text: " ".join(w for w in clean_text(text, stop) if self.view_of(w) == view)  # noqa: E731
        return LabeledExample(example.source_site, keep(example.title_text), keep(example.body_text), example.label)

    def vectorize(self, example: LabeledExample, view: str) -> SparseVector:
        return vectorize(self.project(example, view), self.space(view))

    def vectorize_many(self, examples: Sequence[LabeledExample], view: str) -> sp.csr_matrix:
        return vectorize_many([self.project(ex, view) for ex in examples], self.space(view))

    def to_dict(self) -> dict:
        return {
            "format": "darkcti.view_split",
            "version": VIEW_SPLIT_VERSION,
            "seed": self.seed,
            "word_to_view": dict(sorted(self.word_to_view.items())),
            "view_a_space": self.view_a_space.to_dict(),
            "view_b_space": self.view_b_space.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ViewSplit":
        if data.get("format") != "darkcti.view_split" or data.get("version") != VIEW_SPLIT_VERSION:
            raise FeatureSpaceError("not a supported view split file")
        return cls(data["seed"], dict(data["word_to_view"]),
                   FeatureSpace.from_dict(data["view_a_space"]), FeatureSpace.from_dict(data["view_b_space"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ViewSplit":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def split_views(corpus: Sequence[LabeledExample], n_min: int = 3, n_max: int = 7,
                stop_words: Iterable[str] = (), min_df: int = 2, seed: int = 0) -> ViewSplit:
    """Partition the corpus vocabulary into two word sets and build one FeatureSpace per set."""
    stop = frozenset(stop_words)
    words = set()
    for ex in corpus:
        words.update(clean_text(ex.title_text, stop))
        words.update(clean_text(ex.body_text, stop))
    if len(words) < 2:
        raise FeatureSpaceError("need at least 2 distinct words to split views")
    order = sorted(words)
    random.Random(seed).shuffle(order)
    word_to_view = {w: (VIEW_A if i % 2 == 0 else VIEW_B) for i, w in enumerate(order)}

    spaces = {}
    for view in (VIEW_A, VIEW_B):
        projected = [
            LabeledExample(ex.source_site,
                           " ".join(w for w in clean_text(ex.title_text, stop) if word_to_view[w] == view),
                           " ".join(w for w in clean_text(ex.body_text, stop) if word_to_view[w] == view),
                           ex.label)
            for ex in corpus
        ]
        try:
            spaces[view] = build_feature_space(projected, n_min, n_max, stop, min_df)
        except FeatureSpaceError:
            raise FeatureSpaceError(
                f"view {view} has no features at min_df={min_df}; try a lower min_df") from None
    return ViewSplit(seed, word_to_view, spaces[VIEW_A], spaces[VIEW_B])
