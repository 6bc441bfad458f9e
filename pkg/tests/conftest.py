import numpy as np
import pytest
import scipy.sparse as sp

from decaf.clustering import centroids_sparse, hierarchical_cluster
from decaf.embedding import CombinationBlock, EmbeddingBlock
from decaf.model import Model
from decaf.shortlister import Shortlister
from decaf.synthetic import random_dataset


def random_block(rng, dim, scale=0.5, dtype=np.float64):
    return EmbeddingBlock(
        (rng.normal(size=(dim, dim)) * scale).astype(dtype),
        rng.normal(size=dim).astype(dtype),
        rng.normal(size=dim).astype(dtype),
    )


def random_gates(rng, dim, dtype=np.float64):
    return CombinationBlock(rng.normal(size=dim).astype(dtype), rng.normal(size=dim).astype(dtype))


def random_model(dataset, dim, num_levels, seed=0, dtype=np.float64, mode="full", refine_shortlister=True):
    """Model with every parameter drawn at random and a real clustering."""
    rng = np.random.default_rng(seed)
    clustering = hierarchical_cluster(centroids_sparse(dataset), num_levels, seed=seed)
    K = clustering.num_clusters
    sl = Shortlister(
        clustering,
        rng.normal(size=(K, dim)).astype(dtype),
        rng.normal(size=(K, dim)).astype(dtype) if refine_shortlister else None,
        random_gates(rng, dim, dtype) if refine_shortlister else None,
    )
    return Model(
        E=rng.normal(size=(dataset.num_tokens, dim)).astype(dtype),
        doc_block=random_block(rng, dim, dtype=dtype),
        label_block=random_block(rng, dim, dtype=dtype),
        classifier_gates=random_gates(rng, dim, dtype),
        label_texts=sp.csr_matrix(dataset.label_texts, dtype=dtype),
        refinement=rng.normal(size=(dataset.num_labels, dim)).astype(dtype),
        shortlister=sl,
        classifier_mode=mode,
    )


@pytest.fixture
def tiny_dataset():
    return random_dataset(0, num_points=8, num_labels=16, num_tokens=32)


@pytest.fixture
def small_dataset():
    return random_dataset(1, num_points=120, num_labels=32, num_tokens=60)


# acceptance results, filled in by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, status = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} ({title}): {status}")
