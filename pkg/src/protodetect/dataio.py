"""Dataset serialization: the KED binary format and its CSV twin.

Binary layout (little-endian throughout):

    magic  b"KED1"
    u32    d            embedding dimension
    u32    m            class count
    u64    n            row count
    n x    u32 label, u8 attacked, f32 x d embedding

The binary format stores no row ids; readers synthesize "0".."n-1". CSV rows
are ``id,label,attacked,e0..e{d-1}`` with full round-trip decimal printing, so
CSV preserves ids and float64 values exactly while binary quantizes to f32.

Rows violating simplex invariants are rejected with their row index, never
renormalized. The sum tolerance is 1e-9 for CSV and 1e-6 for binary (an f32
row that summed to 1 in float64 can drift by a few 1e-8 after quantization).
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .classifier import PrototypeSet
from .core import EmbeddingDataset, LabeledEmbedding, as_simplex
from .errors import FormatError, InvalidInput

__all__ = [
    "BINARY_SUM_TOL",
    "MAGIC",
    "dataset_to_prototypes",
    "infer_format",
    "prototypes_to_dataset",
    "read_dataset",
    "read_prototypes",
    "write_dataset",
    "write_prototypes",
]

MAGIC = b"KED1"
_HEADER = struct.Struct("<4sIIQ")
BINARY_SUM_TOL = 1e-6
FORMATS = ("csv", "binary")


def infer_format(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def _check_row(i: int, label: int, attacked: int, emb: np.ndarray, m: int, sum_tol: float) -> None:
    if not 0 <= label < m:
        raise FormatError(f"row {i}: label {label} outside [0, {m})")
    if attacked not in (0, 1):
        raise FormatError(f"row {i}: attacked flag {attacked} not in {{0,1}}")
    if not np.all(np.isfinite(emb)):
        raise FormatError(f"row {i}: non-finite embedding entry")
    if np.any(emb <= 0.0):
        raise FormatError(f"row {i}: embedding not strictly positive")
    total = float(np.sum(emb))
    if abs(total - 1.0) > sum_tol:
        raise FormatError(f"row {i}: embedding sums to {total!r}, outside tolerance {sum_tol}")


def read_dataset(path, format: str) -> EmbeddingDataset:
    """Read a KED file, validating every row. Raises FormatError with the row index."""
    if format not in FORMATS:
        raise InvalidInput(f"unknown format {format!r}, expected one of {FORMATS}")
    if format == "binary":
        return _read_binary(path)
    return _read_csv(path)


def write_dataset(dataset: EmbeddingDataset, path, format: str) -> None:
    if format not in FORMATS:
        raise InvalidInput(f"unknown format {format!r}, expected one of {FORMATS}")
    if format == "binary":
        _write_binary(dataset, path)
    else:
        _write_csv(dataset, path)


def _read_binary(path) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(blob)} bytes)")
    magic, d, m, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if d < 2:
        raise FormatError(f"dimension {d} below minimum 2")
    row_dtype = np.dtype([("label", "<u4"), ("attacked", "u1"), ("emb", "<f4", (d,))])
    expected = _HEADER.size + n * row_dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"file size {len(blob)} != expected {expected} for n={n}, d={d}")
    raw = np.frombuffer(blob, dtype=row_dtype, count=n, offset=_HEADER.size)
    rows = []
    for i in range(n):
        emb = raw["emb"][i].astype(np.float64)
        _check_row(i, int(raw["label"][i]), int(raw["attacked"][i]), emb, m, BINARY_SUM_TOL)
        # Undo the float32 quantization drift so rows satisfy the strict
        # simplex invariant again; the drift is bounded by BINARY_SUM_TOL.
        emb = emb / emb.sum()
        rows.append(
            LabeledEmbedding(
                id=str(i),
                label=int(raw["label"][i]),
                attacked=bool(raw["attacked"][i]),
                embedding=emb,
            )
        )
    return EmbeddingDataset(d=int(d), m=int(m), rows=tuple(rows))


def _write_binary(dataset: EmbeddingDataset, path) -> None:
    parts = [_HEADER.pack(MAGIC, dataset.d, dataset.m, len(dataset))]
    row_prefix = struct.Struct("<IB")
    for row in dataset:
        parts.append(row_prefix.pack(row.label, 1 if row.attacked else 0))
        parts.append(np.asarray(row.embedding, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _read_csv(path) -> EmbeddingDataset:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file, expected a header row") from None
        d = len(header) - 3
        if d < 2 or header[:3] != ["id", "label", "attacked"] or header[3:] != [f"e{i}" for i in range(d)]:
            raise FormatError(f"bad header {header[:6]}..., expected id,label,attacked,e0..e{{d-1}}")
        rows = []
        max_label = -1
        for i, rec in enumerate(reader):
            if len(rec) != d + 3:
                raise FormatError(f"row {i}: {len(rec)} fields, expected {d + 3}")
            try:
                label = int(rec[1])
                attacked = int(rec[2])
                emb = np.array([float(x) for x in rec[3:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"row {i}: {exc}") from None
            max_label = max(max_label, label)
            rows.append((rec[0], label, attacked, emb))
    # The CSV carries no class count; it is inferred as max(label) + 1.
    m = max_label + 1 if rows else 1
    out = []
    for i, (rid, label, attacked, emb) in enumerate(rows):
        _check_row(i, label, attacked, emb, m, 1e-9)
        out.append(LabeledEmbedding(id=rid, label=label, attacked=bool(attacked), embedding=emb))
    return EmbeddingDataset(d=d, m=m, rows=tuple(out))


def _write_csv(dataset: EmbeddingDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "attacked"] + [f"e{i}" for i in range(dataset.d)])
        for row in dataset:
            writer.writerow(
                [row.id, row.label, 1 if row.attacked else 0] + [repr(float(x)) for x in row.embedding]
            )


def prototypes_to_dataset(protos: PrototypeSet) -> EmbeddingDataset:
    """Prototype files reuse KED with one clean row per class, label = class."""
    rows = tuple(
        LabeledEmbedding(id=str(k), label=k, attacked=False, embedding=protos.vectors[k])
        for k in range(protos.m)
    )
    return EmbeddingDataset(d=protos.d, m=protos.m, rows=rows)


def dataset_to_prototypes(dataset: EmbeddingDataset) -> PrototypeSet:
    if len(dataset) != dataset.m:
        raise FormatError(f"prototype file has {len(dataset)} rows for {dataset.m} classes")
    vectors = np.zeros((dataset.m, dataset.d))
    seen = set()
    for i, row in enumerate(dataset):
        if row.attacked:
            raise FormatError(f"row {i}: prototype rows must have attacked=0")
        if row.label in seen:
            raise FormatError(f"row {i}: duplicate prototype for class {row.label}")
        seen.add(row.label)
        vectors[row.label] = as_simplex(row.embedding, sum_tol=BINARY_SUM_TOL)
    return PrototypeSet(vectors=vectors)


def read_prototypes(path, format: str) -> PrototypeSet:
    return dataset_to_prototypes(read_dataset(path, format))


def write_prototypes(protos: PrototypeSet, path, format: str) -> None:
    write_dataset(prototypes_to_dataset(protos), path, format)
