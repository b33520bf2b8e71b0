"""Writers for the KED container, binary and CSV.

The format is shared with the detection toolkit that consumes these files.
This module encodes it from the published layout instead of importing the
consumer, so the file format stays the only coupling between the packages.

Binary layout, little endian: a 20-byte header (magic ``KED1``, u32
embedding width d, u32 class count m, u64 row count n) followed by n rows,
each a u32 label and a u8 attacked flag, then d f32 components. Exports are
always clean, so the flag is written as 0.

The CSV variant prints floats with repr under the header
``id,label,attacked,e0..e{d-1}``. The consumer's CSV reader checks row sums
far more strictly than the 1e-6 its binary reader allows for f32 rounding,
so CSV rows are renormalized in float64 after the f32 quantization; binary
rows store the f32 values as they are.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ExportError

MAGIC = b"KED1"
_HEADER = struct.Struct("<4sIIQ")
_ROW_PREFIX = struct.Struct("<IB")

__all__ = ["MAGIC", "write_rows"]


def _validated(labels, rows, m: int) -> tuple[np.ndarray, np.ndarray]:
    rows32 = np.asarray(rows, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if rows32.ndim != 2 or rows32.shape[1] < 2:
        raise ExportError(f"rows must be (n, d) with d >= 2, got {rows32.shape}")
    if labels.shape != (rows32.shape[0],):
        raise ExportError(f"{labels.shape[0]} labels for {rows32.shape[0]} rows")
    if m < 1:
        raise ExportError(f"class count must be >= 1, got {m}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ExportError(f"labels must lie in [0, {m})")
    if not np.all(rows32 > 0.0):
        raise ExportError("embedding components must stay strictly positive after f32")
    sums = rows32.astype(np.float64).sum(axis=1)
    worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if worst > 1e-6:
        raise ExportError(f"row sum off the simplex by {worst:.2e} (limit 1e-6)")
    return labels, rows32


def _write_binary(path: str, labels: np.ndarray, rows32: np.ndarray, m: int) -> None:
    n, d = rows32.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d, m, n))
        for label, row in zip(labels, rows32):
            fh.write(_ROW_PREFIX.pack(int(label), 0))
            fh.write(row.tobytes())


def _write_csv(path: str, labels: np.ndarray, rows32: np.ndarray, m: int) -> None:
    renorm = rows32.astype(np.float64)
    renorm /= renorm.sum(axis=1, keepdims=True)
    d = rows32.shape[1]
    header = "id,label,attacked," + ",".join(f"e{i}" for i in range(d))
    lines = [header]
    for i, (label, row) in enumerate(zip(labels, renorm)):
        lines.append(f"{i},{int(label)},0," + ",".join(repr(float(x)) for x in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_rows(path: str, labels, rows, m: int) -> None:
    """Write labeled clean rows to ``path``; the extension picks the format."""
    labels, rows32 = _validated(labels, rows, m)
    if path.endswith(".csv"):
        _write_csv(path, labels, rows32, m)
    else:
        _write_binary(path, labels, rows32, m)
