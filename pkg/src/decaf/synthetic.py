"""Synthetic corpora with known structure, used by the tests and the CLI demo."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import Dataset, build_tfidf, label_matrix
from .linalg import make_rng

__all__ = ["random_dataset", "grouped_dataset", "TokenSharingSplit", "token_sharing_dataset"]


def _counts(token_lists, vocab_size):
    rows = np.repeat(np.arange(len(token_lists)), [len(t) for t in token_lists])
    cols = np.concatenate([np.asarray(t, dtype=np.int64) for t in token_lists]) if token_lists else np.zeros(0, np.int64)
    m = sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(len(token_lists), vocab_size))
    m.sum_duplicates()
    return m


def random_dataset(seed: int, num_points: int, num_labels: int, num_tokens: int,
                   labels_per_doc: float = 3.0, tokens_per_doc: float = 6.0,
                   tokens_per_label: float = 3.0) -> Dataset:
    """Independent random documents, labels and label texts (no structure).

    Every document has at least one label and one token; every label text
    has at least one token.
    """
    rng = make_rng(seed, 90)
    truth, docs = [], []
    for _ in range(num_points):
        nl = min(max(1, rng.poisson(labels_per_doc)), num_labels)
        truth.append(np.sort(rng.choice(num_labels, size=nl, replace=False)))
        nt = min(max(1, rng.poisson(tokens_per_doc)), num_tokens)
        docs.append(rng.choice(num_tokens, size=nt, replace=False))
    texts = []
    for _ in range(num_labels):
        nt = min(max(1, rng.poisson(tokens_per_label)), num_tokens)
        texts.append(rng.choice(num_tokens, size=nt, replace=False))
    return Dataset(
        build_tfidf(_counts(docs, num_tokens), num_tokens),
        label_matrix(truth, num_labels),
        build_tfidf(_counts(texts, num_tokens), num_tokens),
    )


def grouped_dataset(seed: int, num_points: int, num_groups: int, labels_per_group: int,
                    tokens_per_group: int, tokens_per_doc: int = 4) -> Dataset:
    """Labels and tokens fall into groups with disjoint token ranges; each
    document draws its labels and tokens from a single group, so a group is
    recoverable from the tokens alone."""
    rng = make_rng(seed, 91)
    L = num_groups * labels_per_group
    V = num_groups * tokens_per_group
    truth, docs = [], []
    for _ in range(num_points):
        g = rng.integers(num_groups)
        nl = rng.integers(1, min(3, labels_per_group) + 1)
        truth.append(np.sort(g * labels_per_group + rng.choice(labels_per_group, nl, replace=False)))
        docs.append(g * tokens_per_group + rng.choice(tokens_per_group, min(tokens_per_doc, tokens_per_group), replace=False))
    texts = []
    for l in range(L):
        g = l // labels_per_group
        texts.append(g * tokens_per_group + rng.choice(tokens_per_group, min(2, tokens_per_group), replace=False))
    return Dataset(
        build_tfidf(_counts(docs, V), V),
        label_matrix(truth, L),
        build_tfidf(_counts(texts, V), V),
    )


@dataclass
class TokenSharingSplit:
    train: Dataset
    test: Dataset
    tail_labels: np.ndarray
    head_labels: np.ndarray


def token_sharing_dataset(seed: int, num_train: int = 5000, num_test: int = 1000, num_pairs: int = 256,
                          num_tokens: int = 2000, max_tail_docs: int = 2, noise_tokens: int = 2,
                          keep_prob: float = 0.6, tail_test_share: float = 0.5) -> TokenSharingSplit:
    """Label pairs whose titles share two of three tokens.

    Pair ``p`` has a head label (title tokens ``a_p b_p c_p``) and a tail
    label (``a_p b_p d_p``) with at most ``max_tail_docs`` training
    documents.  A document about a label contains each title token
    independently with probability ``keep_prob`` (at least one survives)
    plus ``noise_tokens`` draws from a noise vocabulary, so a tail label's
    distinguishing token may be missing from all of its training documents.
    Test documents are drawn the same way, with ``tail_test_share`` of them
    about tail labels.
    """
    if 4 * num_pairs >= num_tokens:
        raise ValueError("vocabulary too small for the title tokens")
    rng = make_rng(seed, 92)
    L = 2 * num_pairs
    head = np.arange(0, L, 2)
    tail = head + 1

    def title(l):
        p = l // 2
        return [4 * p, 4 * p + 1, 4 * p + (2 if l % 2 == 0 else 3)]

    noise_lo = 4 * num_pairs

    def doc_for(primary):
        labels = [primary]
        toks = title(primary)
        bag = [t for t in toks if rng.random() < keep_prob]
        if not bag:
            bag = [toks[rng.integers(len(toks))]]
        bag += list(rng.integers(noise_lo, num_tokens, size=noise_tokens))
        return labels, bag

    tail_counts = rng.integers(1, max_tail_docs + 1, size=num_pairs)
    primaries = [int(t) for t, c in zip(tail, tail_counts) for _ in range(c)]
    n_head = num_train - len(primaries)
    if n_head < num_pairs:
        raise ValueError("too few training documents for the pair count")
    # every head label gets at least one document, the rest at random
    primaries += list(head) + list(rng.choice(head, size=n_head - num_pairs))
    primaries = [primaries[i] for i in rng.permutation(len(primaries))]
    train = [doc_for(l) for l in primaries]

    n_tail_test = int(round(num_test * tail_test_share))
    test_prim = list(rng.choice(tail, size=n_tail_test)) + list(rng.choice(head, size=num_test - n_tail_test))
    test = [doc_for(int(l)) for l in test_prim]

    texts = [title(l) for l in range(L)]
    Z = build_tfidf(_counts(texts, num_tokens), num_tokens)

    # one idf table for both splits
    feats = build_tfidf(_counts([d[1] for d in train + test], num_tokens), num_tokens)

    def make(docs, rows):
        return Dataset(feats[rows], label_matrix([sorted(d[0]) for d in docs], L), Z)

    n = len(train)
    return TokenSharingSplit(make(train, slice(0, n)), make(test, slice(n, None)), tail, head)
