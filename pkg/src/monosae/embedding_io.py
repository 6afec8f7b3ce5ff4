"""Embedding/label file I/O and train-split normalization.

Matrices are plain 2-D ``float64`` numpy arrays. On disk they use the SAEM
container::

    b"SAEM" | version u16 | dtype u16 (0=f32, 1=f64) | rows u64 | cols u64 | payload

all little-endian, payload row-major. Several SAEM blobs may be concatenated
in one file (checkpoints do this); :func:`read_matrices` walks such a file.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateData,
    DimensionMismatch,
    EmptyHeader,
    IoFailure,
    MalformedHeader,
    NonBinaryEntry,
    NonFiniteEntry,
    RaggedRow,
    ShapeMismatch,
)

MAGIC = b"SAEM"
VERSION = 1
HEADER = struct.Struct("<4sHHQQ")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}


@dataclass(frozen=True)
class LabelMatrix:
    values: np.ndarray  # n x k, float64 entries in {0, 1}
    names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    scale: float

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        # float repr round-trips exactly through JSON
        return {"d": self.d, "scale": float(self.scale), "mean": [float(v) for v in self.mean]}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormalizationStats":
        mean = np.asarray(payload["mean"], dtype=np.float64)
        if mean.shape != (payload["d"],):
            raise ShapeMismatch(f"normalization mean has length {mean.size}, expected {payload['d']}")
        scale = float(payload["scale"])
        if not (math.isfinite(scale) and scale > 0):
            raise DegenerateData(f"normalization scale must be positive and finite, got {scale}")
        return cls(mean=mean, scale=scale)


def as_matrix(values) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got {m.ndim} dimensions")
    return m


def _check_finite(m: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(m.ravel()))
    if bad.size:
        raise NonFiniteEntry(int(bad[0]))


def encode_matrix(m: np.ndarray, dtype: str = "f64") -> bytes:
    m = as_matrix(m)
    _check_finite(m)
    code = DTYPE_CODES[dtype]
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype=DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, VERSION, code, rows, cols) + payload


def _read_one(stream: BinaryIO, *, exact: bool) -> np.ndarray:
    head = stream.read(HEADER.size)
    if len(head) != HEADER.size:
        raise MalformedHeader(f"header truncated: {len(head)} of {HEADER.size} bytes")
    magic, version, code, rows, cols = HEADER.unpack(head)
    if magic != MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeader(f"unsupported version {version}")
    if code not in DTYPES:
        raise MalformedHeader(f"unknown dtype code {code}")
    dt = DTYPES[code]
    want = rows * cols * dt.itemsize
    payload = stream.read(want)
    if len(payload) != want:
        raise ShapeMismatch(f"payload holds {len(payload)} bytes, header declares {rows}x{cols} ({want} bytes)")
    if exact and stream.read(1):
        raise ShapeMismatch(f"trailing bytes after {rows}x{cols} payload")
    m = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(rows, cols)
    _check_finite(m)
    return m


def decode_matrix(blob: bytes) -> np.ndarray:
    return _read_one(io.BytesIO(blob), exact=True)


def write_matrix(m: np.ndarray, path, dtype: str = "f64") -> None:
    blob = encode_matrix(m, dtype)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrix(path) -> np.ndarray:
    """Load a single-matrix SAEM file, promoting f32 payloads to float64."""
    try:
        with open(path, "rb") as fh:
            return _read_one(fh, exact=True)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_matrices(mats: Iterable[np.ndarray], path, dtype: str = "f64") -> None:
    blob = b"".join(encode_matrix(m, dtype) for m in mats)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrices(path) -> list[np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    stream = io.BytesIO(data)
    out = []
    while stream.tell() < len(data):
        out.append(_read_one(stream, exact=False))
    return out


def read_labels(path) -> LabelMatrix:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise EmptyHeader(f"{path}: missing label header")
    names = tuple(name.strip() for name in lines[0].split(","))
    if any(not name for name in names):
        raise EmptyHeader(f"{path}: empty label name in header")
    if len(set(names)) != len(names):
        raise EmptyHeader(f"{path}: duplicate label names")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(names):
            raise RaggedRow(f"{path}:{lineno}: {len(cells)} cells, expected {len(names)}")
        row = []
        for cell in cells:
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise NonBinaryEntry(f"{path}:{lineno}: entry {cell!r} is not 0 or 1")
            row.append(float(cell))
        rows.append(row)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return LabelMatrix(values=values, names=names)


def write_labels(labels: LabelMatrix, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(labels.names)
    for row in labels.values.astype(int):
        writer.writerow(row.tolist())
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def make_labels(values, names: Sequence[str]) -> LabelMatrix:
    values = as_matrix(values)
    if values.shape[1] != len(names):
        raise ShapeMismatch(f"{values.shape[1]} label columns but {len(names)} names")
    if not np.isin(values, (0.0, 1.0)).all():
        raise NonBinaryEntry("label values must be 0 or 1")
    names = tuple(names)
    if any(not n for n in names) or len(set(names)) != len(names):
        raise EmptyHeader("label names must be unique and non-empty")
    return LabelMatrix(values=values, names=names)


def fit_normalization(train: np.ndarray) -> NormalizationStats:
    """Center on the column mean and scale so the mean row norm is sqrt(d)."""
    train = as_matrix(train)
    n, d = train.shape
    if n < 1:
        raise DegenerateData("cannot fit normalization on an empty matrix")
    mean = train.mean(axis=0)
    mean_norm = np.linalg.norm(train - mean, axis=1).mean()
    if not mean_norm > 0:
        raise DegenerateData("all training rows are identical; centered norm is zero")
    return NormalizationStats(mean=mean, scale=math.sqrt(d) / mean_norm)


def apply_normalization(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != stats.d:
        raise DimensionMismatch(f"matrix has {x.shape[1]} columns, stats expect {stats.d}")
    return stats.scale * (x - stats.mean)


def invert_normalization(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != stats.d:
        raise DimensionMismatch(f"matrix has {x.shape[1]} columns, stats expect {stats.d}")
    return x / stats.scale + stats.mean
