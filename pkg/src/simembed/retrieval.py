"""Embedding index: store (id, label, vector) records, answer top-k queries.

Storage is a linear scan over a dense matrix; queries are exact by
construction, which keeps every ranked result usable as an oracle.  The
metric (including its exponent) is a property of the index and travels
with the file, so an index built under one exponent cannot be silently
queried under another.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .distance import DistanceMetric, knn
from .errors import DataError, DimensionError, FormatError

Array = np.ndarray

EMBED_MAGIC = b"EMBIDX01"
EMBED_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    """One stored item.  Vectors coming out of the network are unit norm
    (within 1e-4); the index itself only requires a consistent dimension."""

    id: str
    class_label: int
    vector: Array

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise DimensionError(
                f"record {self.id!r}: vector must be 1-D and non-empty, "
                f"got shape {np.asarray(self.vector).shape}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"record {self.id!r}: non-finite vector entries")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class EmbeddingIndex:
    dim: int
    metric: DistanceMetric
    records: tuple[EmbeddingRecord, ...]
    vectors: Array = field(repr=False, compare=False, default=None)
    ids: tuple[str, ...] = field(compare=False, default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors",
                           np.stack([r.vector for r in self.records]))
        object.__setattr__(self, "ids",
                           tuple(r.id for r in self.records))

    @property
    def size(self) -> int:
        return len(self.records)

    def labels_of(self, ids: Iterable[str]) -> list[int]:
        by_id = {r.id: r.class_label for r in self.records}
        return [by_id[i] for i in ids]


def build_index(records: Sequence[EmbeddingRecord],
                metric: DistanceMetric) -> EmbeddingIndex:
    """Validate and freeze records into a queryable index.

    Insertion order is preserved; ties in later queries break by id, so
    order only matters for reproducibility of the stored file.
    """
    if not records:
        raise DataError("an index needs at least one record")
    dim = records[0].vector.shape[0]
    seen: set[str] = set()
    for r in records:
        if r.vector.shape[0] != dim:
            raise DimensionError(
                f"record {r.id!r} has dim {r.vector.shape[0]}, "
                f"index dim is {dim}")
        if r.id in seen:
            raise DataError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
    return EmbeddingIndex(dim=dim, metric=metric, records=tuple(records))


def query_topk(index: EmbeddingIndex, query_vector: Array,
               k: int) -> list[tuple[str, float]]:
    """Exact top-k of the index under its own metric, ascending by
    (distance, id)."""
    q = np.asarray(query_vector, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise DimensionError(
            f"query vector must have shape ({index.dim},), got {q.shape}")
    return knn(q, index, k)


def _write_exact(fh: BinaryIO, data: bytes) -> None:
    fh.write(data)


def write_embeddings(path: str, index: EmbeddingIndex) -> None:
    if index.size == 0:
        raise DataError("refusing to write an empty index")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<I", EMBED_VERSION))
        fh.write(struct.pack("<d", index.metric.exponent))
        fh.write(struct.pack("<I", index.dim))
        fh.write(struct.pack("<Q", index.size))
        for r in index.records:
            raw_id = r.id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise DataError(f"id too long to store: {r.id[:32]!r}...")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<i", r.class_label))
            fh.write(r.vector.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated embedding file: expected {n} bytes for {what}, "
            f"got {len(data)}")
    return data


def read_embeddings(path: str) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != EMBED_MAGIC:
            raise FormatError(
                f"bad magic: expected {EMBED_MAGIC!r}, got {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != EMBED_VERSION:
            raise FormatError(f"unsupported embedding file version "
                              f"{version}, expected {EMBED_VERSION}")
        (exponent,) = struct.unpack("<d", _read_exact(fh, 8, "exponent"))
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dim"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "count"))
        if count == 0:
            raise FormatError("embedding file declares zero records")
        records = []
        for i in range(count):
            (id_len,) = struct.unpack(
                "<H", _read_exact(fh, 2, f"id length of record {i}"))
            raw_id = _read_exact(fh, id_len, f"id of record {i}")
            (label,) = struct.unpack(
                "<i", _read_exact(fh, 4, f"label of record {i}"))
            vec_bytes = _read_exact(fh, 4 * dim, f"vector of record {i}")
            vector = np.frombuffer(vec_bytes, dtype="<f4").copy()
            records.append(EmbeddingRecord(raw_id.decode("utf-8"),
                                           label, vector))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after the last record")
    return build_index(records, DistanceMetric(exponent))


def recall_at_k(index: EmbeddingIndex, query_vector: Array,
                ground_truth_ids: Sequence[str], k: int) -> float:
    """1.0 if any ground-truth id lands in the top-k, else 0.0."""
    if not ground_truth_ids:
        raise DataError("recall needs at least one ground-truth id")
    top = {item_id for item_id, _ in query_topk(index, query_vector, k)}
    return 1.0 if any(t in top for t in ground_truth_ids) else 0.0
