"""Dense embedding tables, cosine top-k search and PCA-style projection.

Binary table format (little-endian)::

    b"EMB1" | u32 count | u32 dim | count*dim float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, FormatError, NumericError, ShapeError

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class EmbeddingTable:
    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise ShapeError(f"embedding rows must be 2-D with dim >= 1, got shape {rows.shape}")
        if not np.isfinite(rows).all():
            raise DataError("embedding table contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_array(cls, rows, normalize: bool = True) -> "EmbeddingTable":
        rows = np.asarray(rows, dtype=np.float32)
        if normalize:
            rows = normalize_rows(rows)
        return cls(rows, normalized=normalize)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __getitem__(self, idx):
        return self.rows[idx]


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float32)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DataError(f"row {bad} has zero norm and cannot be normalized")
    return (rows / norms[:, None]).astype(np.float32)


def save_embeddings(table: EmbeddingTable | np.ndarray, path) -> None:
    rows = table.rows if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float32)
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes(order="C"))


def load_embeddings(path, expected_count: int | None = None, normalize: bool = True) -> EmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for header", path)
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if expected_count is not None and count != expected_count:
        raise FormatError(f"header declares {count} rows, expected {expected_count}", path)
    if dim == 0:
        raise FormatError("zero dimension", path)
    body = raw[_HEADER.size:]
    if len(body) != 4 * count * dim:
        raise FormatError(f"body holds {len(body) // 4} floats, header declares {count}x{dim}", path)
    rows = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.isfinite(rows).all():
        raise DataError(f"{path}: non-finite value in embedding table")
    if normalize:
        try:
            rows = normalize_rows(rows)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
    return EmbeddingTable(rows, normalized=normalize)


def cosine_scores(table: EmbeddingTable, q: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``q`` with every row (float64)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != table.dim:
        raise ShapeError(f"query dim {q.shape[0]} != table dim {table.dim}")
    qn = np.linalg.norm(q)
    if qn == 0:
        return np.zeros(len(table))
    rows = table.rows.astype(np.float64)
    s = rows @ (q / qn)
    if not table.normalized:
        norms = np.linalg.norm(rows, axis=1)
        s = np.divide(s, norms, out=np.zeros_like(s), where=norms > 0)
    return s


def rank_by_score(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Order ``ids`` by descending score, ties by ascending id."""
    order = np.lexsort((ids, -scores))
    return ids[order]


def cosine_topk(table: EmbeddingTable, q, k: int, exclude: Iterable[int] = ()) -> list[tuple[int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = cosine_scores(table, q)
    ids = np.arange(len(table))
    excl = np.fromiter((int(v) for v in exclude), dtype=np.int64)
    if len(excl):
        keep = np.ones(len(table), dtype=bool)
        keep[excl[(excl >= 0) & (excl < len(table))]] = False
        ids = ids[keep]
    if len(ids) > k:
        # partial selection first, then exact ordering of the survivors
        s = scores[ids]
        kth = np.partition(-s, k - 1)[k - 1]
        ids = ids[-s <= kth]
    ranked = rank_by_score(ids, scores[ids])[:k]
    return [(int(i), float(scores[i])) for i in ranked]


# ---------------------------------------------------------------------------
# linear projection (PCA)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearProjection:
    matrix: np.ndarray  # dim_in x dim_out, orthonormal columns
    mean: np.ndarray
    explained_variance: np.ndarray

    @property
    def dim_in(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim_out(self) -> int:
        return self.matrix.shape[1]


def fit_projection(table: EmbeddingTable | np.ndarray, out_dim: int) -> LinearProjection:
    """Top ``out_dim`` principal directions of the mean-centered rows.

    Uses a symmetric eigendecomposition of the covariance; components come
    out in non-increasing order of explained variance.
    """
    rows = table.rows if isinstance(table, EmbeddingTable) else np.asarray(table)
    x = np.asarray(rows, dtype=np.float64)
    n, dim = x.shape
    if not 1 <= out_dim <= min(dim, n):
        raise ValueError(f"out_dim must be in [1, {min(dim, n)}], got {out_dim}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    try:
        vals, vecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from None
    order = np.argsort(-vals, kind="stable")[:out_dim]
    comps = vecs[:, order]
    # fix the sign so that results do not depend on LAPACK internals
    flip = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(out_dim)])
    comps = comps * np.where(flip == 0, 1, flip)
    return LinearProjection(comps.astype(np.float32), mean.astype(np.float32), np.maximum(vals[order], 0.0))


def apply_projection(p: LinearProjection, v) -> tuple[np.ndarray, bool]:
    """Center, project and unit-normalize. Returns ``(vector, degenerate)``."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != p.dim_in:
        raise ShapeError(f"vector dim {v.shape[0]} != projection input dim {p.dim_in}")
    out = (v - p.mean) @ p.matrix.astype(np.float64)
    norm = np.linalg.norm(out)
    if norm <= 1e-12:
        return np.zeros(p.dim_out, dtype=np.float32), True
    return (out / norm).astype(np.float32), False


def project_table(p: LinearProjection, table: EmbeddingTable) -> EmbeddingTable:
    """Row-wise :func:`apply_projection`; degenerate rows raise."""
    out = (table.rows.astype(np.float64) - p.mean) @ p.matrix.astype(np.float64)
    return EmbeddingTable(normalize_rows(out), normalized=True)
