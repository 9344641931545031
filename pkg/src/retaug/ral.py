"""Hinge losses over retrieved negative vocabularies, with exact box gradients.

Both losses are piecewise-linear in the ground-truth box embedding, so the
gradients are closed form: the mean negative embedding scaled by the
multiplier, minus the competing term, whenever the hinge is active, and
exactly zero otherwise (the zero branch is chosen at the boundary).

Box embeddings are expected unit-norm; normalization is an ingestion
concern (see the JSONL loader in the CLI), not repeated here, so dot
products stay plain linear maps and gradients are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownName
from .store import EmbeddingTable


@dataclass(frozen=True)
class RalHyperParams:
    """Scalars of the hard/easy hinge losses plus the per-iteration sample size.

    Defaults are the shipped configuration (margins 0/1, multipliers 1/5,
    unit loss weights, n=10).
    """

    lambda_hard: float = 1.0
    lambda_easy: float = 5.0
    alpha_hard: float = 0.0
    alpha_easy: float = 1.0
    beta_hard: float = 1.0
    beta_easy: float = 1.0
    n: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.beta_hard < 0 or self.beta_easy < 0:
            raise ValueError("beta weights must be nonnegative")


@dataclass(frozen=True)
class RalBatchItem:
    """One ground-truth box: its unit embedding, label, and iteration sample."""

    box_embedding: np.ndarray
    label: str
    hard_n: tuple[str, ...]
    easy_n: tuple[str, ...]


@dataclass(frozen=True)
class RalBatchResult:
    loss: float
    loss_hard: float
    loss_easy: float
    grads: np.ndarray  # (n_items, dim), d(batch loss)/d(e_b) per item
    items: tuple[dict, ...] = field(default=())


def avg_similarity(vocab_names, table: EmbeddingTable, e_b) -> float:
    """Mean dot product between the named rows and the box embedding."""
    e_b = np.asarray(e_b, dtype=np.float64)
    rows = _rows_for(vocab_names, table)
    return float(np.mean(rows @ e_b))


def hard_loss(u_hard: float, sim_gt: float, hp: RalHyperParams) -> float:
    """Hinge pushing the box to be closer to its label than to hard negatives."""
    return max(hp.lambda_hard * u_hard - sim_gt + hp.alpha_hard, 0.0)


def easy_loss(u_easy: float, u_hard: float, hp: RalHyperParams) -> float:
    """Hinge keeping easy negatives further from the box than hard ones."""
    return max(hp.lambda_easy * u_easy - u_hard + hp.alpha_easy, 0.0)


def ral_total(
    batch: list[RalBatchItem],
    base_table: EmbeddingTable,
    vocab_table: EmbeddingTable,
    hp: RalHyperParams,
) -> RalBatchResult:
    """Batch-mean weighted loss and per-item gradients w.r.t. each box embedding.

    Per item: beta_hard * hard_loss + beta_easy * easy_loss, averaged over
    the batch.  Gradients use the zero branch at inactive or boundary
    hinges, so a clamped loss contributes an exactly-zero gradient.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    n_items = len(batch)
    dim = base_table.dim
    grads = np.zeros((n_items, dim), dtype=np.float64)
    total_hard = 0.0
    total_easy = 0.0
    per_item: list[dict] = []
    for idx, item in enumerate(batch):
        e_b = np.asarray(item.box_embedding, dtype=np.float64)
        t_gt = base_table.row(item.label)
        hard_rows = _rows_for(item.hard_n, vocab_table)
        easy_rows = _rows_for(item.easy_n, vocab_table)
        hard_mean = hard_rows.mean(axis=0)
        easy_mean = easy_rows.mean(axis=0)

        sim_gt = float(t_gt @ e_b)
        u_hard = float(hard_mean @ e_b)
        u_easy = float(easy_mean @ e_b)

        pre_hard = hp.lambda_hard * u_hard - sim_gt + hp.alpha_hard
        pre_easy = hp.lambda_easy * u_easy - u_hard + hp.alpha_easy
        l_hard = max(pre_hard, 0.0)
        l_easy = max(pre_easy, 0.0)

        grad = np.zeros(dim, dtype=np.float64)
        if pre_hard > 0.0:
            grad += hp.beta_hard * (hp.lambda_hard * hard_mean - t_gt)
        if pre_easy > 0.0:
            grad += hp.beta_easy * (hp.lambda_easy * easy_mean - hard_mean)
        grads[idx] = grad / n_items

        total_hard += l_hard
        total_easy += l_easy
        per_item.append(
            {
                "label": item.label,
                "sim_gt": sim_gt,
                "u_hard": u_hard,
                "u_easy": u_easy,
                "loss_hard": l_hard,
                "loss_easy": l_easy,
                "loss": hp.beta_hard * l_hard + hp.beta_easy * l_easy,
            }
        )
    loss_hard = total_hard / n_items
    loss_easy = total_easy / n_items
    loss = hp.beta_hard * loss_hard + hp.beta_easy * loss_easy
    return RalBatchResult(loss, loss_hard, loss_easy, grads, tuple(per_item))


def _rows_for(names, table: EmbeddingTable) -> np.ndarray:
    if not names:
        raise UnknownName("empty vocabulary name list")
    idx = [table.index_of(name) for name in names]
    return table.vectors[idx]
