"""Fuse baseline detector logits with auxiliary logits.

Each baseline family scores categories on a different scale, so three fusion
rules are supported.  Only the categories whose auxiliary logits land in the
per-proposal top set are touched; every other entry keeps the baseline value
bit for bit, so an untrusted auxiliary head can never perturb scores it was
not selected for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import BadTruncate, LengthMismatch

MODES = ("additive-sigmoid", "multiplicative-detpro", "additive-raw")

# CLI spelling -> rule name
MODE_ALIASES = {
    "ocovd": "additive-sigmoid",
    "detpro": "multiplicative-detpro",
    "oadp": "additive-raw",
}


@dataclass(frozen=True)
class LogitBundle:
    base_logits: np.ndarray
    aux_logits: np.ndarray
    final_logits: np.ndarray
    mode: str
    truncate_top: int


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown ensemble mode {mode!r}; expected one of {MODES}")
    return mode


def _top_set(aux: np.ndarray, truncate_top: int) -> np.ndarray:
    # largest aux entries; equal values resolved toward the lower index
    return np.argsort(-aux, kind="stable")[:truncate_top]


def ensemble(base, aux, mode: str, truncate_top: int) -> np.ndarray:
    """Final logits for one proposal.

    With S the indices of the truncate_top largest auxiliary entries:
    additive-sigmoid adds sigmoid(aux_i) on S, multiplicative-detpro scales
    base_i by (sigmoid(aux_i) - 0.25) on S, additive-raw adds aux_i on S.
    truncate_top=0 returns the base logits unchanged.
    """
    mode = canonical_mode(mode)
    base = np.asarray(base, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if base.shape != aux.shape or base.ndim != 1:
        raise LengthMismatch(f"base {base.shape} vs aux {aux.shape}")
    if truncate_top < 0 or truncate_top > base.shape[0]:
        raise BadTruncate(f"truncate_top={truncate_top} for {base.shape[0]} categories")
    final = base.copy()
    selected = _top_set(aux, truncate_top)
    if mode == "additive-sigmoid":
        final[selected] = base[selected] + expit(aux[selected])
    elif mode == "multiplicative-detpro":
        final[selected] = base[selected] * (expit(aux[selected]) - 0.25)
    else:
        final[selected] = base[selected] + aux[selected]
    return final


def ensemble_bundle(base, aux, mode: str, truncate_top: int) -> LogitBundle:
    final = ensemble(base, aux, mode, truncate_top)
    return LogitBundle(
        np.asarray(base, dtype=np.float64),
        np.asarray(aux, dtype=np.float64),
        final,
        canonical_mode(mode),
        truncate_top,
    )


def ensemble_matrix(base, aux, mode: str, truncate_top: int) -> np.ndarray:
    """Row-wise fusion over a proposals-by-categories logit matrix; the top
    set is chosen independently for every proposal."""
    base = np.asarray(base, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if base.shape != aux.shape or base.ndim != 2:
        raise LengthMismatch(f"base {base.shape} vs aux {aux.shape}")
    return np.vstack(
        [ensemble(base[i], aux[i], mode, truncate_top) for i in range(base.shape[0])]
    )


def classify(final) -> int:
    """Predicted category index; equal maxima resolve to the lowest index."""
    final = np.asarray(final, dtype=np.float64)
    if final.ndim != 1 or final.size == 0:
        raise LengthMismatch(f"expected a non-empty vector, got shape {final.shape}")
    return int(np.argmax(final))
