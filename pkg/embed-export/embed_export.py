"""Encode category names or concept texts into binary embedding tables,
and turn description text into concept records.

This is a standalone companion tool for the retaug CLI.  It talks to
retaug only through files, never through imports, so it can live in an
environment where only the encoder stack is installed.  Two on-disk
contracts are re-implemented here from their documented layouts:

matrix container (all little-endian):

    offset  size          field
    0       4             magic bytes b"RALF"
    4       4             format version, u32 (currently 1)
    8       8             row count, u64
    16      4             column count (dim), u32
    20      count*dim*4   IEEE-754 f32 values, row-major

with a companion ``<stem>.names.json`` holding a JSON array of row names,
and concept JSONL: one ``{"text": ..., "sources": [...]}`` object per line.

Encoders:

    hashed          deterministic feature hashing, no model download,
                    byte-identical output for identical input (default)
    <model id>      any sentence-transformers model available locally,
                    e.g. all-MiniLM-L6-v2 or a local checkpoint path

The hashed encoder exists so that fixture generation and tests never
depend on model weights; swap in a real text encoder for actual use.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import re
import struct
import sys
from pathlib import Path

import numpy as np

MAGIC = b"RALF"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")

_TOKEN = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")

# Pragmatic stop list, not a linguistic one: articles, pronouns,
# prepositions, conjunctions, auxiliaries, and the light verbs and
# participles that generated descriptions lean on.  Chunks are the
# maximal token runs left after removing these.
STOPWORDS = frozenset("""
    a an the and or but nor so yet of in on at to for from by as with
    without within upon across along behind beyond near off out up down
    into onto over under above below between among through during before
    after around about against it its this that these those they their
    them he she his her him hers which who whom whose what when where
    while if because since although though unless until whether than then
    there here also very often usually typically such like unlike other
    another each every all any some many much most more less few several
    both either neither own same not no is are was were be been being am
    has have had having can could will would shall should may might must
    do does did done use used uses using make makes made known called
    named found seen considered
""".split())


class EmbedExportError(Exception):
    """Base class for the tool's own failures."""


class EncoderUnavailable(EmbedExportError):
    """The requested text encoder cannot be loaded on this machine."""


class EmptyInput(EmbedExportError):
    """Nothing to encode."""


class EmptyCorpus(EmbedExportError):
    """The description corpus has no entries."""


# ---------------------------------------------------------------------------
# encoders

def tokenize(text: str) -> list:
    return _TOKEN.findall(text.casefold())


def _bucket_sign(feature: str, dim: int):
    # blake2b keeps this stable across processes and platforms, unlike
    # the salted builtin hash()
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    bucket = int.from_bytes(digest[:4], "little") % dim
    sign = 1.0 if digest[4] & 1 else -1.0
    return bucket, sign


def hashed_encoder(dim: int):
    """Deterministic bag-of-hashed-tokens encoder.

    Token unigrams weigh 1.0 and adjacent bigrams 0.5, each hashed into
    one of ``dim`` signed buckets.  Rows are L2-normalized.  Texts that
    produce no tokens at all cannot be encoded and raise EmptyInput.
    """
    if dim < 2:
        raise ValueError(f"encoder dim must be at least 2, got {dim}")

    def encode(texts):
        out = np.zeros((len(texts), dim))
        for i, text in enumerate(texts):
            toks = tokenize(text)
            if not toks:
                raise EmptyInput(f"no encodable tokens in {text!r}")
            feats = [("1:" + t, 1.0) for t in toks]
            feats += [("2:" + a + " " + b, 0.5) for a, b in zip(toks, toks[1:])]
            for feat, weight in feats:
                bucket, sign = _bucket_sign(feat, dim)
                out[i, bucket] += sign * weight
        norms = np.linalg.norm(out, axis=1)
        if np.any(norms == 0.0):
            bad = texts[int(np.argmin(norms))]
            raise EmptyInput(f"hashed features cancelled for {bad!r}")
        return out / norms[:, None]

    return encode


def sentence_encoder(model_id: str):
    """Wrap a locally available sentence-transformers model."""
    try:
        st = importlib.import_module("sentence_transformers")
    except ImportError as exc:
        raise EncoderUnavailable(
            f"sentence-transformers is not installed ({exc})"
        ) from exc
    try:
        model = st.SentenceTransformer(model_id)
    except Exception as exc:
        raise EncoderUnavailable(f"cannot load encoder {model_id!r}: {exc}") from exc

    def encode(texts):
        vecs = model.encode(list(texts), normalize_embeddings=True)
        return np.asarray(vecs, dtype=np.float64)

    return encode


def load_encoder(name: str, dim: int):
    if name == "hashed":
        return hashed_encoder(dim)
    return sentence_encoder(name)


# ---------------------------------------------------------------------------
# export

def read_names(path) -> list:
    """One name per line; surrounding whitespace stripped, blanks skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = [line.strip() for line in lines if line.strip()]
    if not names:
        raise EmptyInput(f"{path}: no names to encode")
    seen = set()
    for name in names:
        folded = name.casefold()
        if folded in seen:
            # the consumer rejects case-folded duplicates at load time;
            # fail here, next to the input, instead
            raise ValueError(f"duplicate name after case-folding: {name!r}")
        seen.add(folded)
    return names


def write_table(prefix, names, vectors) -> Path:
    """Write ``<prefix>.bin`` plus ``<prefix>.names.json``."""
    values = np.ascontiguousarray(vectors, dtype="<f4")
    count, dim = values.shape
    out = Path(str(prefix) + ".bin")
    with open(out, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, count, dim))
        fh.write(values.tobytes())
    names_file = out.with_name(out.stem + ".names.json")
    with open(names_file, "w", encoding="utf-8") as fh:
        json.dump(list(names), fh, ensure_ascii=False, separators=(",", ":"))
    return out


def export_embeddings(names_file, out_prefix, encoder="hashed", dim=512) -> Path:
    names = read_names(names_file)
    vectors = load_encoder(encoder, dim)(names)
    return write_table(out_prefix, names, vectors)


# ---------------------------------------------------------------------------
# concept extraction

def noun_chunks(text: str) -> list:
    """Maximal runs of non-stopword tokens, in order of appearance."""
    chunks = []
    run = []
    for tok in tokenize(text):
        if tok in STOPWORDS:
            if run:
                chunks.append(" ".join(run))
                run = []
        else:
            run.append(tok)
    if run:
        chunks.append(" ".join(run))
    return chunks


def _is_self_reference(chunk: str, name: str) -> bool:
    # a description almost always names its own subject; that token run
    # (or its bare plural) is the vocabulary entry, not a concept about it
    folded = name.casefold()
    return chunk == folded or chunk == folded + "s" or chunk + "s" == folded


def extract_concepts(entries) -> list:
    """Turn ``(name, description)`` pairs into deduplicated concept records.

    Returns ``[{"text": ..., "sources": [...]}, ...]`` with texts unique
    after case-folding, the first-seen spelling kept, and sources in
    first-seen order.  Empty descriptions contribute nothing.
    """
    records = {}
    for name, description in entries:
        for chunk in noun_chunks(description):
            if _is_self_reference(chunk, name):
                continue
            rec = records.setdefault(chunk.casefold(), {"text": chunk, "sources": []})
            if name not in rec["sources"]:
                rec["sources"].append(name)
    return list(records.values())


def read_corpus(path) -> list:
    """JSONL corpus: one ``{"name": ..., "description": ...}`` per line."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            if not isinstance(doc, dict) or "name" not in doc or "description" not in doc:
                raise ValueError(
                    f"{path}:{lineno}: expected an object with 'name' and 'description'"
                )
            entries.append((str(doc["name"]), str(doc["description"])))
    if not entries:
        raise EmptyCorpus(f"{path}: corpus has no entries")
    return entries


def write_concepts(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# CLI

def cmd_export(args) -> int:
    out = export_embeddings(args.names, args.out, args.encoder, args.dim)
    names_file = out.with_name(out.stem + ".names.json")
    count = len(json.loads(names_file.read_text(encoding="utf-8")))
    print(f"wrote {count} embeddings to {out}")
    return 0


def cmd_extract(args) -> int:
    records = extract_concepts(read_corpus(args.corpus))
    write_concepts(args.out, records)
    print(f"wrote {len(records)} concept records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Encode names into binary embedding tables and "
        "extract concept records from description text.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="encode a name list into a binary table")
    p.add_argument("--names", required=True, help="text file, one name per line")
    p.add_argument("--out", required=True, metavar="PREFIX",
                   help="output prefix; writes PREFIX.bin and PREFIX.names.json")
    p.add_argument("--encoder", default="hashed",
                   help="'hashed' or a sentence-transformers model id (default: hashed)")
    p.add_argument("--dim", type=int, default=512,
                   help="embedding width for the hashed encoder (default: 512)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("extract", help="extract concept records from descriptions")
    p.add_argument("--corpus", required=True,
                   help="JSONL file of {'name','description'} objects")
    p.add_argument("--out", required=True, help="output concept JSONL path")
    p.set_defaults(func=cmd_extract)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EmbedExportError, ValueError, OSError) as exc:
        print(f"embed-export: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
