"""Clustered synthetic fixtures so the whole pipeline runs offline.

Categories are random unit cluster centers; boxes and proposals are noisy
samples around them; vocabulary entries are half center-adjacent (so their
similarity ranks vary across categories) and half isotropic noise; concepts
perturb the center they describe.  The vocabulary deliberately contains a
few rows that collide with novel category names and one case-folded
duplicate, so the filtering stages have real work to do.

Everything is drawn from a single seeded generator in a fixed order:
the same seed always produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tableio
from .concepts import ConceptRecord, write_concept_jsonl


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def generate(
    out_dir: str | Path,
    seed: int,
    n_base: int = 8,
    n_novel: int = 4,
    n_vocab: int = 100,
    n_concepts: int = 64,
    n_proposals: int = 64,
    n_boxes: int = 48,
    dim: int = 16,
    noise: float = 0.1,
) -> dict[str, Path]:
    """Write the full fixture set into out_dir and return the path map."""
    if min(n_base, n_vocab, n_concepts, n_proposals, n_boxes, dim) < 1 or n_novel < 0:
        raise ValueError("all counts must be positive (novel may be zero)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_cats = n_base + n_novel
    centers = _unit(rng.normal(size=(n_cats, dim)))
    base_names = [f"base_{i:03d}" for i in range(n_base)]
    novel_names = [f"novel_{i:03d}" for i in range(n_novel)]
    cat_names = base_names + novel_names

    paths: dict[str, Path] = {}

    def write(key: str, filename: str, names, values) -> Path:
        path = out / filename
        tableio.write_matrix(path, list(names), np.asarray(values))
        paths[key] = path
        return path

    write("base_categories", "base_categories.bin", base_names, centers[:n_base])
    write("novel_categories", "novel_categories.bin", novel_names, centers[n_base:])
    # the evaluation-time category table: base and novel together, in the
    # column order of the synthesized detector logits
    write("categories", "categories.bin", cat_names, centers)

    # vocabulary: informative half hugs a base center, the rest is isotropic;
    # then rows that must be filtered out downstream
    vocab_names = [f"vocab_{i:04d}" for i in range(n_vocab)]
    vocab_rows = np.empty((n_vocab, dim))
    for i in range(n_vocab):
        if i < n_vocab // 2:
            vocab_rows[i] = centers[i % n_base] + 0.35 * rng.normal(size=dim)
        else:
            vocab_rows[i] = rng.normal(size=dim)
    vocab_rows = _unit(vocab_rows)
    leak_names = novel_names[: min(2, n_novel)]
    leak_rows = _unit(
        centers[n_base : n_base + len(leak_names)] + 0.05 * rng.normal(size=(len(leak_names), dim))
    )
    dup_names = [vocab_names[0].upper()]
    dup_rows = _unit(rng.normal(size=(1, dim)))
    write(
        "vocabulary",
        "vocabulary.bin",
        vocab_names + leak_names + dup_names,
        np.vstack([vocab_rows, leak_rows, dup_rows]),
    )

    # concepts: perturbations of the base center they talk about, plus one
    # duplicated text with a different source to exercise ingestion dedup
    records = [
        ConceptRecord(f"trait {i:04d}", (base_names[i % n_base],))
        for i in range(n_concepts)
    ]
    concept_rows = _unit(
        np.stack(
            [centers[i % n_base] + noise * rng.normal(size=dim) for i in range(n_concepts)]
        )
    )
    records.append(ConceptRecord(records[0].text, (base_names[1 % n_base],)))
    concept_rows = np.vstack([concept_rows, _unit(rng.normal(size=(1, dim)))])
    concepts_jsonl = out / "concepts.jsonl"
    write_concept_jsonl(concepts_jsonl, records)
    paths["concept_records"] = concepts_jsonl
    write("concept_embeddings", "concepts.bin", [r.text for r in records], concept_rows)

    def sample_cluster(prefix: str, count: int, cat_pool: int):
        names = [f"{prefix}_{i:04d}" for i in range(count)]
        labels = {}
        rows = np.empty((count, dim))
        for i in range(count):
            c = i % cat_pool
            rows[i] = centers[c] + noise * rng.normal(size=dim)
            labels[names[i]] = cat_names[c]
        return names, _unit(rows), labels

    box_names, box_rows, box_labels = sample_cluster("box", n_boxes, n_base)
    write("boxes", "boxes.bin", box_names, box_rows)
    box_labels_path = out / "boxes.labels.json"
    box_labels_path.write_text(
        json.dumps(box_labels, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["box_labels"] = box_labels_path

    prop_names, prop_rows, prop_labels = sample_cluster("prop", n_proposals, n_cats)
    write("proposals", "proposals.bin", prop_names, prop_rows)
    prop_labels_path = out / "proposals.labels.json"
    prop_labels_path.write_text(
        json.dumps(prop_labels, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["proposal_labels"] = prop_labels_path

    # a stand-in detector's logits over all categories, one row per proposal
    base_logits = 5.0 * (prop_rows @ centers.T) + 0.5 * rng.normal(size=(n_proposals, n_cats))
    write("base_logits", "base_logits.bin", prop_names, base_logits)
    columns_path = out / "base_logits.columns.json"
    columns_path.write_text(
        json.dumps(cat_names, separators=(",", ":")) + "\n", encoding="utf-8"
    )
    paths["base_logit_columns"] = columns_path

    return paths
