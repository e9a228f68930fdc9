"""Embedding matrices on disk: csv with an f0..f{d-1} header, or raw little-endian float64."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from ..errors import IngestionError

FORMATS = ("csv", "raw-f64-le")
_RAW = np.dtype("<f8")


@dataclass(frozen=True)
class EmbeddingFile:
    path: str
    format: str = "csv"
    dimension: int | None = None

    def __post_init__(self):
        fmt = "raw-f64-le" if self.format == "raw" else self.format
        if fmt not in FORMATS:
            raise IngestionError(f"unknown embedding format {self.format!r}")
        object.__setattr__(self, "format", fmt)
        if fmt == "raw-f64-le" and not self.dimension:
            raise IngestionError("raw embedding files need a declared dimension")


def _load_csv(path: str, dimension: int | None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path} is empty", row=0)
        header = [h.strip() for h in header]
        d = len(header)
        if header != [f"f{i}" for i in range(d)]:
            raise IngestionError(f"header must read f0..f{d - 1}, got {','.join(header)}", row=0)
        if dimension is not None and d != dimension:
            raise IngestionError(f"header has {d} columns, declared dimension is {dimension}", row=0)
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != d:
                raise IngestionError(f"expected {d} values, found {len(rec)}", row=i)
            try:
                vals = [float(v) for v in rec]
            except ValueError as exc:
                raise IngestionError(f"unparseable value ({exc})", row=i) from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError("non-finite value", row=i)
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(len(rows), d)


def _load_raw(path: str, dimension: int) -> np.ndarray:
    size = os.path.getsize(path)
    if size % (8 * dimension):
        raise IngestionError(f"{path}: {size} bytes is not a multiple of 8*d = {8 * dimension}")
    data = np.fromfile(path, dtype=_RAW).astype(np.float64).reshape(-1, dimension)
    bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad.size:
        raise IngestionError("non-finite value", row=int(bad[0]) + 1)
    return data


def load_embedding_matrix(file: EmbeddingFile | str, format: str | None = None, dimension: int | None = None) -> np.ndarray:
    """Rows are samples, columns are embedding coordinates. Row numbers in errors are 1-based."""
    if not isinstance(file, EmbeddingFile):
        file = EmbeddingFile(str(file), format or "csv", dimension)
    if not os.path.isfile(file.path):
        raise IngestionError(f"embedding file not found: {file.path}")
    if file.format == "csv":
        return _load_csv(file.path, file.dimension)
    return _load_raw(file.path, file.dimension)


def write_embedding_matrix(path: str, matrix, format: str = "csv") -> EmbeddingFile:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise IngestionError(f"expected a 2-D matrix, got shape {m.shape}")
    ef = EmbeddingFile(str(path), format, m.shape[1])
    if ef.format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"f{i}" for i in range(m.shape[1])])
            w.writerows([repr(float(v)) for v in row] for row in m)
    else:
        np.ascontiguousarray(m, dtype=_RAW).tofile(path)
    return ef
