"""Binary matrix container used for embeddings, logits, and rank exports.

Layout (all little-endian):

    offset  size          field
    0       4             magic bytes b"RALF"
    4       4             format version, u32 (currently 1)
    8       8             row count, u64
    16      4             column count (dim), u32
    20      count*dim*4   IEEE-754 f32 values, row-major

A matrix file ``<stem>.<ext>`` is accompanied by ``<stem>.names.json``, a
UTF-8 JSON array of row names in row order.

This module is a raw container: it does no normalization or validation
beyond structural checks.  Building validated embedding tables is the job
of :mod:`retaug.store`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RALF"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def names_path(path: str | Path) -> Path:
    """Companion names file: same directory and basename, ``.names.json`` suffix."""
    p = Path(path)
    return p.with_name(p.stem + ".names.json")


def write_matrix(path: str | Path, names: list[str], values: np.ndarray) -> None:
    """Write a matrix and its companion names file.

    Values are stored as f32 regardless of the input dtype.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"expected a 2-d matrix, got shape {values.shape}")
    if len(names) != values.shape[0]:
        raise FormatError(
            f"{len(names)} names for {values.shape[0]} rows"
        )
    path = Path(path)
    payload = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, values.shape[0], values.shape[1]))
        fh.write(payload.tobytes())
    with open(names_path(path), "w", encoding="utf-8") as fh:
        json.dump(list(names), fh, ensure_ascii=False, separators=(",", ":"))


def read_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a matrix file, returning ``(names, values)`` with f64 values.

    Raises FormatError on a bad magic, version, or truncated payload, and
    when the names file disagrees with the header row count.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, count, dim = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        raw = fh.read(count * dim * 4)
    if len(raw) != count * dim * 4:
        raise FormatError(f"{path}: truncated payload")
    values = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float64)
    with open(names_path(path), "r", encoding="utf-8") as fh:
        names = json.load(fh)
    if not isinstance(names, list) or len(names) != count:
        raise FormatError(f"{names_path(path)}: expected {count} names")
    return [str(n) for n in names], values
