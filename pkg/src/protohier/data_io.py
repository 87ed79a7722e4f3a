"""Embedding and label file I/O.

Two on-disk formats are supported:

* ``binary`` (canonical): little-endian throughout. An 8-byte ASCII magic,
  ``u32`` counts, then a packed ``float32``/``int32`` payload. Round-trips
  are bit exact.

  ===========  =======================================================
  embeddings   ``HIRLEMB1`` | n:u32 | d:u32 | n*d float32, row major
  labels       ``HIRLLAB1`` | n:u32 | n int32
  ===========  =======================================================

* ``csv`` (interchange): one row per sample, comma-separated decimal floats,
  optionally a trailing integer label column. Only accepted for files of at
  most ``CSV_MAX_VALUES`` values; the binary format is the fast path.

Non-finite values are rejected at load time regardless of format.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError
from .util import atomic_write_bytes

EMBEDDING_MAGIC = b"HIRLEMB1"
LABEL_MAGIC = b"HIRLLAB1"
CSV_MAX_VALUES = 10**6


@dataclass
class EmbeddingSet:
    """An (n, d) float32 matrix of row vectors plus optional integer labels."""

    data: np.ndarray
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DataError(f"embedding data must be 2-d, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"embedding data must be non-empty, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise DataError("embedding data contains NaN or Inf")
        self.data = arr
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.ndim != 1 or lab.shape[0] != arr.shape[0]:
                raise DataError(
                    f"labels must be a length-{arr.shape[0]} vector, got shape {lab.shape}"
                )
            if not np.issubdtype(lab.dtype, np.integer):
                raise DataError("labels must be integers")
            if lab.min(initial=0) < 0:
                raise DataError("labels must be non-negative")
            self.labels = np.ascontiguousarray(lab, dtype=np.int32)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]


def _read_file(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _parse_embedding_bytes(raw, source):
    header = struct.calcsize("<8sII")
    if len(raw) < header:
        raise FormatError(f"{source}: truncated header ({len(raw)} bytes)")
    magic, n, d = struct.unpack_from("<8sII", raw, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if n < 1 or d < 1:
        raise DataError(f"{source}: header declares empty matrix n={n} d={d}")
    expected = header + 4 * n * d
    if len(raw) != expected:
        raise DataError(
            f"{source}: payload size mismatch, header implies {expected} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=header).reshape(n, d)
    if not np.isfinite(data).all():
        raise DataError(f"{source}: payload contains NaN or Inf")
    return EmbeddingSet(data=data.copy())


def _parse_csv_text(text, source, has_labels):
    rows = []
    labels = []
    width = None
    n_values = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
            if has_labels and width < 2:
                raise DataError(f"{source}:{lineno}: label column requires >= 2 columns")
        elif len(cells) != width:
            raise DataError(
                f"{source}:{lineno}: expected {width} columns, got {len(cells)}"
            )
        n_values += len(cells)
        if n_values > CSV_MAX_VALUES:
            raise DataError(
                f"{source}: more than {CSV_MAX_VALUES} values; use the binary format"
            )
        if has_labels:
            value_cells, label_cell = cells[:-1], cells[-1]
            try:
                labels.append(int(label_cell))
            except ValueError as exc:
                raise FormatError(
                    f"{source}:{lineno}: label column is not an integer: {label_cell!r}"
                ) from exc
        else:
            value_cells = cells
        try:
            rows.append([float(c) for c in value_cells])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: unparsable float") from exc
    if not rows:
        raise DataError(f"{source}: no rows")
    data = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        raise DataError(f"{source}: payload contains NaN or Inf")
    lab = np.asarray(labels, dtype=np.int64) if has_labels else None
    return EmbeddingSet(data=data.astype(np.float32), labels=lab)


def read_embeddings(path, format="binary", csv_has_labels=False):
    """Load an :class:`EmbeddingSet` from ``path``.

    ``format`` is ``"binary"`` or ``"csv"``. ``csv_has_labels`` marks the
    final CSV column as an integer label column.
    """
    if format == "binary":
        return _parse_embedding_bytes(_read_file(path), str(path))
    if format == "csv":
        raw = _read_file(path)
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: not valid utf-8 text") from exc
        return _parse_csv_text(text, str(path), csv_has_labels)
    raise ConfigError(f"unknown format {format!r}, expected 'binary' or 'csv'")


def write_embeddings(embeddings, path):
    """Write the binary embedding format atomically (temp file + rename)."""
    es = embeddings
    buf = io.BytesIO()
    buf.write(struct.pack("<8sII", EMBEDDING_MAGIC, es.n, es.d))
    buf.write(np.ascontiguousarray(es.data, dtype="<f4").tobytes())
    try:
        atomic_write_bytes(path, buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_labels(path):
    """Load an int32 label vector from the binary label format."""
    raw = _read_file(path)
    header = struct.calcsize("<8sI")
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n = struct.unpack_from("<8sI", raw, 0)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n < 1:
        raise DataError(f"{path}: header declares n=0 labels")
    expected = header + 4 * n
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload size mismatch, header implies {expected} bytes, file has {len(raw)}"
        )
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=header)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return labels.copy()


def write_labels(labels, path):
    """Write the binary label format atomically."""
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] < 1:
        raise DataError(f"labels must be a non-empty vector, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise DataError("labels must be integers")
    if lab.min() < 0:
        raise DataError("labels must be non-negative")
    buf = io.BytesIO()
    buf.write(struct.pack("<8sI", LABEL_MAGIC, lab.shape[0]))
    buf.write(np.ascontiguousarray(lab, dtype="<i4").tobytes())
    try:
        atomic_write_bytes(path, buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_embeddings_csv(embeddings, path, include_labels=False):
    """Write the CSV interchange format (mainly for interop and tests)."""
    es = embeddings
    if es.n * es.d > CSV_MAX_VALUES:
        raise DataError(f"refusing to write more than {CSV_MAX_VALUES} values as CSV")
    if include_labels and es.labels is None:
        raise ConfigError("include_labels=True but the embedding set has no labels")
    lines = []
    for i in range(es.n):
        cells = [repr(float(v)) for v in es.data[i]]
        if include_labels:
            cells.append(str(int(es.labels[i])))
        lines.append(",".join(cells))
    try:
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
