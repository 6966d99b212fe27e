"""Embedding matrices: binary CIRE files, row normalization, blocked cosine kernels.

The CIRE file layout (little-endian) is:

    magic   4 bytes  b"CIRE"
    version u16      1
    n       u64      row count
    dim     u32      embedding dimension
    dtype   u8       1 (float32)
    reserved 9 bytes of zeros
    data    n * dim float32, row-major
    ids     per row: u16 byte length + UTF-8 id bytes, in row order

The format is canonical: loading then writing reproduces the file byte for
byte, which is what run manifests hash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericsError

MAGIC = b"CIRE"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sHQIB9s")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Immutable N x d float32 matrix keyed by unique string ids."""

    ids: tuple[str, ...]
    data: np.ndarray  # (N, d) float32
    normalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.ids)})
        self.data.setflags(write=False)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, item_id: str) -> np.ndarray:
        try:
            return self.data[self._index[item_id]]
        except KeyError:
            raise DataFormatError(f"unknown id {item_id!r}") from None

    def index_of(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise DataFormatError(f"unknown id {item_id!r}") from None

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def rows(self, item_ids: list[str]) -> np.ndarray:
        return self.data[[self.index_of(i) for i in item_ids]]


@dataclass
class SimilarityBlock:
    """Cosine scores for a contiguous range of query rows against a corpus."""

    query_rows: range
    scores: np.ndarray  # (q, N) float64
    argsort_cache: np.ndarray | None = None  # (q, N) int64, descending rank order


def make_matrix(ids, data, normalized: bool = False) -> EmbeddingMatrix:
    """Validate and wrap raw ids + array into an EmbeddingMatrix."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DataFormatError(f"expected a 2-D matrix, got shape {arr.shape}")
    ids = tuple(str(s) for s in ids)
    if len(ids) != arr.shape[0]:
        raise DataFormatError(f"{len(ids)} ids for {arr.shape[0]} rows")
    if arr.shape[1] < 1:
        raise DataFormatError("dim must be >= 1")
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for s in ids:
            if s in seen:
                raise DataFormatError(f"duplicate id {s!r}")
            seen.add(s)
    if not np.isfinite(arr).all():
        bad = np.where(~np.isfinite(arr).all(axis=1))[0][0]
        raise DataFormatError(f"non-finite values in row for id {ids[bad]!r}")
    return EmbeddingMatrix(ids=ids, data=arr, normalized=normalized)


def load_embeddings(path) -> EmbeddingMatrix:
    """Load a CIRE file. Rows are returned as stored, not normalized."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, dim, dtype, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise DataFormatError(f"{path}: unsupported dtype tag {dtype}")
    if reserved != b"\x00" * 9:
        raise DataFormatError(f"{path}: nonzero reserved header bytes")
    if dim < 1:
        raise DataFormatError(f"{path}: dim must be >= 1, got {dim}")
    off = _HEADER.size
    payload = n * dim * 4
    if len(raw) < off + payload:
        have = (len(raw) - off) // (dim * 4) if dim else 0
        raise DataFormatError(
            f"{path}: truncated payload, header declares {n} rows but file holds {have}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += payload
    ids = []
    for i in range(n):
        if off + 2 > len(raw):
            raise DataFormatError(f"{path}: truncated id table at row {i}")
        (blen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + blen > len(raw):
            raise DataFormatError(f"{path}: truncated id table at row {i}")
        ids.append(raw[off : off + blen].decode("utf-8"))
        off += blen
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes after id table")
    return make_matrix(ids, np.array(data, dtype=np.float32))


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    """Write an EmbeddingMatrix to a canonical CIRE file."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m.n, m.dim, DTYPE_F32, b"\x00" * 9))
        fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
        for item_id in m.ids:
            b = item_id.encode("utf-8")
            if len(b) > 0xFFFF:
                raise DataFormatError(f"id too long to encode ({len(b)} bytes)")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm. Idempotent; errors on zero-norm rows."""
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    if (norms < 1e-12).any():
        bad = int(np.argmin(norms))
        raise NumericsError(f"zero-norm row for id {m.ids[bad]!r}")
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(ids=m.ids, data=data, normalized=True)


def cosine_scores(
    queries: np.ndarray,
    corpus: EmbeddingMatrix,
    chunk: int = 1024,
    query_rows: range | None = None,
    with_ranks: bool = False,
) -> SimilarityBlock:
    """Dot-product similarity of unit query rows against a unit corpus.

    Accumulates in float64 so results are identical for every chunk size;
    chunking over query rows keeps the intermediate working set at
    O(chunk x N). `with_ranks` additionally caches each row's descending
    rank permutation with ties broken by ascending corpus id.
    """
    queries = np.atleast_2d(np.asarray(queries))
    if queries.shape[1] != corpus.dim:
        raise DataFormatError(
            f"query dim {queries.shape[1]} != corpus dim {corpus.dim}"
        )
    if chunk < 1:
        raise DataFormatError(f"chunk must be positive, got {chunk}")
    q = queries.shape[0]
    corpus_t = corpus.data.astype(np.float64).T
    scores = np.empty((q, corpus.n), dtype=np.float64)
    for lo in range(0, q, chunk):
        hi = min(lo + chunk, q)
        scores[lo:hi] = queries[lo:hi].astype(np.float64) @ corpus_t
    ranks = rank_rows(scores, corpus.ids) if with_ranks else None
    return SimilarityBlock(
        query_rows=query_rows if query_rows is not None else range(q),
        scores=scores,
        argsort_cache=ranks,
    )


def rank_rows(scores: np.ndarray, ids) -> np.ndarray:
    """Descending-score argsort per row, ties broken by ascending id.

    Columns are pre-permuted into id order so that a stable sort on the
    negated scores yields the tie-break for free.
    """
    by_id = np.argsort(np.asarray(ids), kind="stable").astype(np.int64)
    order = np.argsort(-scores[:, by_id], axis=1, kind="stable")
    return by_id[order]
