"""Vocabulary store filtering and hard/easy negative set construction.

Pipeline: a raw vocabulary (names + vectors) is cleaned of case-folded
duplicates and of anything that collides with the novel-category list, then
optionally thinned by rank variance, and finally split per base category
into the m most similar (hard) and m least similar (easy) vocabulary names.
Per training iteration, n of those m are subsampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyStoreAfterFilter,
    MTooLarge,
    NTooLarge,
    UnknownCategory,
)
from .store import EmbeddingTable, bottomk, build_table, subset, topk

REASON_NOVEL = "novel-overlap"
REASON_DUPLICATE = "case-duplicate"
REASON_LOW_VARIANCE = "low-rank-variance"


@dataclass(frozen=True)
class VocabularyStore:
    """Filtered vocabulary table plus an audit trail of removals.

    Every input name is either in the table or in `excluded`, so nothing is
    dropped silently.
    """

    table: EmbeddingTable
    excluded: tuple[tuple[str, str], ...]  # (name, reason)


@dataclass(frozen=True)
class RankMatrix:
    """Similarity ranks of each vocabulary entry under each base category.

    ranks[c, i] = 1 + number of vocabulary entries strictly more similar to
    base category c than entry i; tied entries share the smaller rank.
    variance[i] is the population variance of column i across base rows.
    """

    ranks: np.ndarray  # (n_base, n_vocab) int64, values in [1, n_vocab]
    variance: np.ndarray  # (n_vocab,) float64


@dataclass(frozen=True)
class NegativeVocabularySets:
    """Per-base-category hard and easy negative name lists, m each.

    hard is ordered by descending similarity to the category embedding,
    easy by ascending; the two sets are disjoint whenever m <= floor(V/2).
    """

    m: int
    categories: dict[str, tuple[tuple[str, ...], tuple[str, ...]]]  # name -> (hard, easy)

    def hard(self, category: str) -> tuple[str, ...]:
        return self._lookup(category)[0]

    def easy(self, category: str) -> tuple[str, ...]:
        return self._lookup(category)[1]

    def _lookup(self, category: str):
        try:
            return self.categories[category]
        except KeyError:
            raise UnknownCategory(f"no negative sets for category {category!r}") from None

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "categories": {
                name: {"hard": list(hard), "easy": list(easy)}
                for name, (hard, easy) in self.categories.items()
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NegativeVocabularySets":
        cats = {
            name: (tuple(entry["hard"]), tuple(entry["easy"]))
            for name, entry in data["categories"].items()
        }
        return cls(int(data["m"]), cats)


def build_store(names, vectors, novel_names) -> VocabularyStore:
    """Filter a raw vocabulary into a store disjoint from the novel list.

    Case-folded duplicates keep their first occurrence; any name that
    case-matches a novel category is removed.  Removals are recorded with
    reason tags.
    """
    names = [str(n) for n in names]
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(names):
        raise DimensionMismatch(
            f"{len(names)} names for vector array of shape {vectors.shape}"
        )
    novel = {str(n).casefold() for n in novel_names}
    kept_idx: list[int] = []
    excluded: list[tuple[str, str]] = []
    seen: set[str] = set()
    for i, name in enumerate(names):
        folded = name.casefold()
        if folded in novel:
            excluded.append((name, REASON_NOVEL))
        elif folded in seen:
            excluded.append((name, REASON_DUPLICATE))
        else:
            seen.add(folded)
            kept_idx.append(i)
    if not kept_idx:
        raise EmptyStoreAfterFilter("no vocabulary left after novel/duplicate filtering")
    table = build_table([names[i] for i in kept_idx], vectors[kept_idx])
    return VocabularyStore(table, tuple(excluded))


def compute_ranks(store: VocabularyStore, base: EmbeddingTable) -> RankMatrix:
    """Rank every vocabulary entry by similarity under each base category.

    An entry's rank is one plus the count of strictly more similar entries,
    so exact ties share the smaller rank.  Column variances are population
    variances across base categories.
    """
    if base.dim != store.table.dim:
        raise DimensionMismatch(f"base dim {base.dim} != store dim {store.table.dim}")
    sims = base.vectors @ store.table.vectors.T  # (n_base, n_vocab)
    n_vocab = sims.shape[1]
    ranks = np.empty(sims.shape, dtype=np.int64)
    for c in range(sims.shape[0]):
        row = sims[c]
        ascending = np.sort(row)
        # strictly-greater count = n - insertion point right of the value
        ranks[c] = n_vocab - np.searchsorted(ascending, row, side="right") + 1
    variance = np.var(ranks.astype(np.float64), axis=0)
    return RankMatrix(ranks, variance)


def filter_by_rank_variance(ranks: RankMatrix, keep_fraction: float) -> np.ndarray:
    """Indices of the ceil(keep_fraction * V) highest-variance entries.

    Ties at the cut are resolved by ascending index.  The returned indices
    are sorted ascending, so keep_fraction=1.0 is the identity.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_vocab = ranks.variance.shape[0]
    n_keep = int(np.ceil(keep_fraction * n_vocab))
    order = np.argsort(-ranks.variance, kind="stable")[:n_keep]
    return np.sort(order).astype(np.int64)


def build_negative_sets(
    store: VocabularyStore, base: EmbeddingTable, kept, m: int
) -> NegativeVocabularySets:
    """Top-m (hard) and bottom-m (easy) vocabulary names per base category."""
    kept = np.asarray(kept, dtype=np.int64)
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    if m > kept.shape[0] // 2:
        raise MTooLarge(
            f"m={m} would overlap hard and easy sets over {kept.shape[0]} kept entries"
        )
    pool = subset(store.table, kept)
    categories: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {}
    for name in base.names:
        query = base.row(name)
        hard = topk(pool, query, m)
        easy = bottomk(pool, query, m)
        categories[name] = (
            tuple(pool.names[i] for i in hard.indices),
            tuple(pool.names[i] for i in easy.indices),
        )
    return NegativeVocabularySets(m, categories)


def sample_iteration(
    sets: NegativeVocabularySets,
    category: str,
    n: int,
    rng_seed: int,
    mode: str = "random",
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Pick this iteration's n hard and n easy names for one category.

    mode "random" draws uniformly without replacement (deterministic per
    seed, hard and easy sampled independently); mode "similarity" takes the
    first n of each stored ordering instead.
    """
    hard, easy = sets._lookup(category)
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if n > sets.m:
        raise NTooLarge(f"n={n} exceeds m={sets.m}")
    if mode == "similarity":
        return hard[:n], easy[:n]
    if mode != "random":
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    hard_idx = rng.choice(len(hard), size=n, replace=False)
    easy_idx = rng.choice(len(easy), size=n, replace=False)
    return (
        tuple(hard[i] for i in hard_idx),
        tuple(easy[i] for i in easy_idx),
    )


def derive_item_seed(global_seed: int, item_index: int) -> int:
    """Stable per-item seed for batch sampling, derived from the run seed."""
    seq = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFFFFFFFFFF, int(item_index)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])
