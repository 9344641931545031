"""Shared fixtures and independent reference implementations.

The oracle functions here deliberately take the slow, obvious route
(python sorts, explicit double loops) so the fast library paths are
checked against something with no shared selection logic.
"""

import numpy as np
import pytest

from retaug.store import build_table


def unit_rows(rng, count, dim):
    rows = rng.normal(size=(count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def random_table(rng, count, dim, prefix="row"):
    return build_table([f"{prefix}_{i:04d}" for i in range(count)], unit_rows(rng, count, dim))


def oracle_topk(vectors, query, k, largest=True):
    """Full-sort selection: python sort keyed on (score, index)."""
    query = np.asarray(query, dtype=np.float64)
    query = query / np.linalg.norm(query)
    sims = [float(vectors[i] @ query) for i in range(vectors.shape[0])]
    if largest:
        order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    else:
        order = sorted(range(len(sims)), key=lambda i: (sims[i], i))
    return order[:k]


def oracle_ranks(base_vectors, vocab_vectors):
    """Literal definition: rank = 1 + count of strictly more similar entries."""
    sims = base_vectors @ vocab_vectors.T
    n_base, n_vocab = sims.shape
    ranks = np.empty((n_base, n_vocab), dtype=np.int64)
    for c in range(n_base):
        for i in range(n_vocab):
            ranks[c, i] = 1 + int(np.sum(sims[c] > sims[c, i]))
    return ranks


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)


# One PASS/FAIL line per acceptance criterion, shown after the test run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
