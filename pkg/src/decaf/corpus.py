"""Datasets in the Extreme Classification Repository sparse format.

A file starts with a header line ``N V L`` followed by ``N`` data lines::

    l1,l2,... t1:w1 t2:w2 ...

A data line that starts with whitespace has an empty label list.  Internally
documents, label texts and ground truth are held as ``scipy.sparse`` CSR
matrices; :class:`SparseVector` is the row view handed to per-document code.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ParseError

__all__ = [
    "SparseVector",
    "Dataset",
    "DatasetStats",
    "parse_xc_file",
    "parse_label_texts",
    "write_xc_file",
    "build_tfidf",
    "dataset_stats",
    "whitespace_tokenize",
    "build_vocabulary",
    "titles_to_counts",
    "read_lines",
]


@dataclass(frozen=True)
class SparseVector:
    """Sorted (token id, weight) pairs; zero weights are never stored."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != w.shape:
            raise ValueError("indices and weights must be 1-d arrays of equal length")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("token ids must be strictly increasing")
        if idx.size and idx[0] < 0:
            raise ValueError("token ids must be non-negative")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and positive")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> SparseVector:
        pairs = sorted((int(t), float(w)) for t, w in pairs if w != 0)
        if not pairs:
            return cls.empty()
        idx, w = zip(*pairs)
        return cls(np.array(idx), np.array(w))

    @classmethod
    def empty(cls) -> SparseVector:
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.indices] = self.weights
        return out

    def __len__(self):
        return self.nnz


def _row(mat: sp.csr_matrix, i: int) -> SparseVector:
    lo, hi = mat.indptr[i], mat.indptr[i + 1]
    return SparseVector(mat.indices[lo:hi], mat.data[lo:hi])


def csr_from_vectors(vectors: Sequence[SparseVector], num_cols: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.weights for v in vectors])
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), num_cols))


def label_matrix(ground_truth: Sequence[Sequence[int]], num_labels: int) -> sp.csr_matrix:
    """N x L indicator matrix of the positive labels."""
    rows = [np.asarray(sorted(set(int(l) for l in g)), dtype=np.int64) for g in ground_truth]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([r.size for r in rows])
    indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    return sp.csr_matrix(
        (np.ones(indices.size), indices, indptr), shape=(len(rows), num_labels)
    )


@dataclass
class Dataset:
    """Documents, positive labels and (optionally) label texts.

    ``features`` is N x V, ``labels`` is the N x L 0/1 indicator of
    positives and ``label_texts`` is L x V (rows may be empty).
    """

    features: sp.csr_matrix
    labels: sp.csr_matrix
    label_texts: sp.csr_matrix | None = None
    raw_titles: list[str] | None = None
    label_titles: list[str] | None = None

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.features.sort_indices()
        self.labels = sp.csr_matrix(self.labels, dtype=np.float64)
        self.labels.sort_indices()
        if self.label_texts is not None:
            self.label_texts = sp.csr_matrix(self.label_texts, dtype=np.float64)
            self.label_texts.sort_indices()

    @property
    def num_points(self) -> int:
        return self.features.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.features.shape[1]

    @property
    def num_labels(self) -> int:
        return self.labels.shape[1]

    def document(self, i: int) -> SparseVector:
        return _row(self.features, i)

    def label_text(self, l: int) -> SparseVector:
        if self.label_texts is None:
            raise ValueError("dataset has no label texts")
        return _row(self.label_texts, l)

    def ground_truth(self, i: int) -> np.ndarray:
        lo, hi = self.labels.indptr[i], self.labels.indptr[i + 1]
        return self.labels.indices[lo:hi].astype(np.int64)

    def ground_truth_lists(self) -> list[np.ndarray]:
        return [self.ground_truth(i) for i in range(self.num_points)]

    def with_label_texts(self, label_texts: sp.csr_matrix, titles=None) -> Dataset:
        if label_texts.shape[0] != self.num_labels:
            raise ValueError(
                f"label text has {label_texts.shape[0]} rows, dataset has {self.num_labels} labels"
            )
        if label_texts.shape[1] != self.num_tokens:
            raise ValueError("label text vocabulary size differs from the documents'")
        return Dataset(self.features, self.labels, label_texts, self.raw_titles, titles)

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        titles = None if self.raw_titles is None else [self.raw_titles[i] for i in rows]
        return Dataset(
            self.features[rows], self.labels[rows], self.label_texts, titles, self.label_titles
        )

    def validate(self) -> None:
        for name, mat in (("features", self.features), ("label_texts", self.label_texts)):
            if mat is None:
                continue
            if not np.all(np.isfinite(mat.data)) or np.any(mat.data <= 0):
                raise ValueError(f"{name} contains non-finite or non-positive weights")
            if not mat.has_canonical_format:
                raise ValueError(f"{name} has duplicate or unsorted entries")
        if self.label_texts is not None and self.label_texts.shape[0] != self.num_labels:
            raise ValueError("label_texts must have exactly L rows")
        if not np.all(self.labels.data == 1.0):
            raise ValueError("label matrix must be 0/1")


@dataclass
class DatasetStats:
    avg_tokens_per_doc: float
    avg_tokens_per_label: float
    avg_labels_per_doc: float
    avg_points_per_label: float
    label_frequencies: np.ndarray = field(repr=False)


_HEADER = re.compile(r"^\s*(\d+)\s+(\d+)\s+(\d+)\s*$")


def _parse_lines(lines, path, one_based=False):
    it = iter(lines)
    try:
        header = next(it)
    except StopIteration:
        raise ParseError(f"{path}: empty file", line=1) from None
    m = _HEADER.match(header)
    if not m:
        raise ParseError(f"{path}:1: malformed header {header.strip()!r}", line=1)
    n, v, num_labels = (int(g) for g in m.groups())

    ground_truth = []
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    lineno = 1
    for lineno, raw in enumerate(it, start=2):
        line = raw.rstrip("\r\n")
        if not line.strip() and len(ground_truth) >= n:
            continue
        if line[:1].isspace() or not line:
            label_part, feat_part = "", line
        else:
            head, _, rest = line.partition(" ")
            if ":" in head:
                label_part, feat_part = "", line
            else:
                label_part, feat_part = head, rest
        try:
            labels = [int(x) for x in label_part.split(",") if x]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad label list {label_part!r}", line=lineno) from None
        if len(set(labels)) != len(labels):
            raise ParseError(f"{path}:{lineno}: duplicate label id", line=lineno)
        for l in labels:
            if not 0 <= l < num_labels:
                raise ParseError(f"{path}:{lineno}: label id {l} outside [0, {num_labels})", line=lineno)
        feats = {}
        for item in feat_part.split():
            tok, sep, val = item.partition(":")
            if not sep:
                raise ParseError(f"{path}:{lineno}: bad feature {item!r}", line=lineno)
            try:
                t = int(tok) - (1 if one_based else 0)
                w = float(val)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad feature {item!r}", line=lineno) from None
            if not 0 <= t < v:
                raise ParseError(f"{path}:{lineno}: token id {tok} outside [0, {v})", line=lineno)
            if not math.isfinite(w):
                raise ParseError(f"{path}:{lineno}: non-finite weight {val!r}", line=lineno)
            if w < 0:
                raise ParseError(f"{path}:{lineno}: negative weight {val!r}", line=lineno)
            if t in feats:
                raise ParseError(f"{path}:{lineno}: duplicate token {tok}", line=lineno)
            feats[t] = w
        for t in sorted(feats):
            if feats[t] != 0.0:
                indices.append(t)
                data.append(feats[t])
        indptr.append(len(indices))
        ground_truth.append(sorted(labels))
    if len(ground_truth) != n:
        raise ParseError(
            f"{path}:{lineno}: header announces {n} data lines, found {len(ground_truth)}", line=lineno
        )
    features = sp.csr_matrix(
        (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(n, v),
    )
    return features, ground_truth, (n, v, num_labels)


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.readlines()


def parse_xc_file(path, one_based: bool = False) -> Dataset:
    """Read documents and ground truth; label texts are loaded separately."""
    features, ground_truth, (_, _, num_labels) = _parse_lines(read_lines(path), path, one_based)
    return Dataset(features, label_matrix(ground_truth, num_labels))


def parse_label_texts(path, num_labels: int | None = None, num_tokens: int | None = None,
                      one_based: bool = False) -> sp.csr_matrix:
    """Label-text file in the same sparse format with one row per label."""
    features, _, (n, v, _) = _parse_lines(read_lines(path), path, one_based)
    if num_labels is not None and n != num_labels:
        raise ParseError(f"{path}: {n} label rows, expected {num_labels}", line=1)
    if num_tokens is not None and v != num_tokens:
        raise ParseError(f"{path}: vocabulary {v}, expected {num_tokens}", line=1)
    return features


def write_xc_file(dataset: Dataset, path, label_rows: bool = False) -> None:
    """Inverse of :func:`parse_xc_file`; ``label_rows`` writes label texts instead."""
    mat = dataset.label_texts if label_rows else dataset.features
    n = mat.shape[0]
    num_labels = dataset.num_labels
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {mat.shape[1]} {num_labels}\n")
        for i in range(n):
            labels = "" if label_rows else ",".join(str(l) for l in dataset.ground_truth(i))
            lo, hi = mat.indptr[i], mat.indptr[i + 1]
            feats = " ".join(
                f"{t}:{float(w)!r}" for t, w in zip(mat.indices[lo:hi], mat.data[lo:hi])
            )
            fh.write(f"{labels} {feats}".rstrip() + "\n" if labels else f" {feats}".rstrip() + "\n")


def build_tfidf(raw_counts, vocab_size: int) -> sp.csr_matrix:
    """Smoothed TF-IDF with per-row L2 normalisation.

    ``weight = count * (ln((N + 1) / (df + 1)) + 1)``; empty rows stay empty.
    Accepts a CSR count matrix or a sequence of :class:`SparseVector`.
    """
    if vocab_size <= 0:
        raise ValueError("vocab_size must be positive")
    if sp.issparse(raw_counts):
        counts = sp.csr_matrix(raw_counts, dtype=np.float64)
    else:
        counts = csr_from_vectors(list(raw_counts), vocab_size)
    if counts.shape[1] != vocab_size:
        raise ValueError(f"counts have {counts.shape[1]} columns, vocab_size is {vocab_size}")
    counts.sum_duplicates()
    counts.eliminate_zeros()
    if np.any(counts.data < 0) or np.any(counts.data != np.round(counts.data)):
        raise ValueError("counts must be non-negative integers")
    n = counts.shape[0]
    df = np.bincount(counts.indices, minlength=vocab_size)
    idf = np.log((n + 1) / (df + 1)) + 1.0
    out = counts.copy()
    out.data = out.data * idf[out.indices]
    norms = np.sqrt(np.asarray(out.multiply(out).sum(axis=1)).ravel())
    row_of = np.repeat(np.arange(n), np.diff(out.indptr))
    if out.nnz:
        out.data /= norms[row_of]
    return out


def dataset_stats(d: Dataset) -> DatasetStats:
    n, num_labels = d.num_points, d.num_labels
    freqs = np.bincount(d.labels.indices, minlength=num_labels).astype(np.int64)
    avg_labels = d.labels.nnz / n if n else 0.0
    if d.label_texts is not None and num_labels:
        avg_label_tokens = d.label_texts.nnz / num_labels
    else:
        avg_label_tokens = 0.0
    return DatasetStats(
        avg_tokens_per_doc=d.features.nnz / n if n else 0.0,
        avg_tokens_per_label=avg_label_tokens,
        avg_labels_per_doc=avg_labels,
        avg_points_per_label=n * avg_labels / num_labels if num_labels else 0.0,
        label_frequencies=freqs,
    )


def whitespace_tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocabulary(texts: Iterable[str]) -> dict[str, int]:
    """Token -> id in order of first appearance."""
    vocab: dict[str, int] = {}
    for text in texts:
        for tok in whitespace_tokenize(text):
            vocab.setdefault(tok, len(vocab))
    return vocab


def titles_to_counts(titles: Sequence[str], vocab: dict[str, int]) -> sp.csr_matrix:
    """Raw count matrix; tokens missing from ``vocab`` are dropped."""
    vectors = []
    for text in titles:
        c = Counter(vocab[t] for t in whitespace_tokenize(text) if t in vocab)
        vectors.append(SparseVector.from_pairs(c.items()))
    return csr_from_vectors(vectors, len(vocab))
