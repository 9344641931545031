"""Concept corpus ingestion and similarity retrieval.

Concept text generation and noun-chunk extraction happen upstream; this
module ingests the resulting corpus (JSONL of {"text", "sources"} records
plus an embedding row per record, aligned by line order) and answers
top-k queries for visual features.  Scores are raw cosines: softmax
weighting happens inside the feature augmenter, not here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentMismatch, NovelLeakage
from .store import EmbeddingTable, build_table, topk


@dataclass(frozen=True)
class ConceptRecord:
    """One noun-chunk concept and the vocabulary names it came from."""

    text: str
    sources: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConceptStore:
    """Deduplicated concept records aligned with an embedding table."""

    records: tuple[ConceptRecord, ...]
    table: EmbeddingTable

    @property
    def size(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class RetrievedConcepts:
    """The k concepts most similar to a visual feature, scores descending."""

    embeddings: np.ndarray  # (k, dim)
    scores: np.ndarray  # (k,)
    texts: tuple[str, ...]
    indices: np.ndarray  # (k,) rows into the store table


def ingest_concepts(
    records,
    vectors,
    novel_names=(),
) -> ConceptStore:
    """Build a concept store from records and their embedding rows.

    Records must align one-to-one with rows.  Case-folded duplicate texts
    are merged (first row kept, sources unioned in first-seen order).  Any
    record sourced from a novel-category name is rejected outright: novel
    categories must not leak into the concept store.
    """
    records = [
        r if isinstance(r, ConceptRecord) else ConceptRecord(str(r["text"]), tuple(r.get("sources", ())))
        for r in records
    ]
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(records):
        raise AlignmentMismatch(
            f"{len(records)} records for vector array of shape {vectors.shape}"
        )
    novel = {str(n).casefold() for n in novel_names}
    merged: dict[str, tuple[str, list[str]]] = {}  # folded text -> (text, sources)
    rows: dict[str, int] = {}
    for i, record in enumerate(records):
        text = record.text.strip()
        if not text:
            raise AlignmentMismatch(f"record {i} has empty text")
        leaked = [s for s in record.sources if s.casefold() in novel]
        if leaked:
            raise NovelLeakage(
                f"concept {text!r} is sourced from novel categor{'ies' if len(leaked) > 1 else 'y'} {leaked}"
            )
        folded = text.casefold()
        if folded in merged:
            _, sources = merged[folded]
            for s in record.sources:
                if s not in sources:
                    sources.append(s)
        else:
            merged[folded] = (text, list(record.sources))
            rows[folded] = i
    texts = [text for text, _ in merged.values()]
    out_records = tuple(
        ConceptRecord(text, tuple(sources)) for text, sources in merged.values()
    )
    table = build_table(texts, vectors[[rows[t.casefold()] for t in texts]])
    return ConceptStore(out_records, table)


def retrieve(store: ConceptStore, v_r, k: int) -> RetrievedConcepts:
    """The k most relevant concepts for a visual feature, by cosine."""
    result = topk(store.table, v_r, k)
    return RetrievedConcepts(
        embeddings=store.table.vectors[result.indices],
        scores=result.scores,
        texts=tuple(store.table.names[i] for i in result.indices),
        indices=result.indices,
    )


def read_concept_jsonl(path: str | Path) -> list[ConceptRecord]:
    """Read a concept corpus: one JSON object {"text", "sources"} per line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "text" not in obj:
                raise AlignmentMismatch(f"{path}:{line_no}: missing 'text'")
            records.append(ConceptRecord(str(obj["text"]), tuple(obj.get("sources", ()))))
    return records


def write_concept_jsonl(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {"text": record.text, "sources": list(record.sources)},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
