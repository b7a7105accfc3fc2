"""Text-embedding cache: build, persist and exact cosine top-1 retrieval.

Rows are stored as float32; similarities are evaluated in float64. Retrieval
first scores every row with a blocked matrix product, then re-scores the
rows within :data:`_REFINE_TOL` of the best with a correctly rounded
``math.fsum`` dot product. The final argmax (lowest index on ties) therefore
does not depend on BLAS blocking, query batching or thread count.

File layout (little endian)::

    b"TEC1" | u32 version=1 | u32 D | u64 M
    M x D float32, row major
    M x (u32 byte length, UTF-8 caption bytes)
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import TextEncoder
from .errors import ConfigError, CorruptCacheError, DimensionError, InvalidQueryError

_HEADER = struct.Struct("<4sIIQ")
_MAGIC = b"TEC1"
_VERSION = 1

_BLOCK_ROWS = 32768
_REFINE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EmbeddingCache:
    matrix: np.ndarray  # (M, D) float32
    captions: tuple[str, ...]
    row_norms: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ConfigError(f"cache matrix must be (M >= 1, D), got shape {matrix.shape}")
        if matrix.shape[0] != len(self.captions):
            raise DimensionError(f"{matrix.shape[0]} rows but {len(self.captions)} captions")
        if not np.all(np.isfinite(matrix)):
            raise ConfigError("cache matrix contains NaN or Inf")
        matrix.setflags(write=False)
        wide = matrix.astype(np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", wide, wide))
        norms.setflags(write=False)
        unit = wide / np.where(norms > 0, norms, 1.0)[:, None]
        unit.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "captions", tuple(self.captions))
        object.__setattr__(self, "row_norms", norms)
        object.__setattr__(self, "_unit_rows", unit)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def digest(self) -> str:
        """Short content hash used for provenance columns."""
        h = hashlib.sha256(self.matrix.tobytes())
        for c in self.captions:
            h.update(c.encode("utf-8") + b"\0")
        return h.hexdigest()[:12]


def build_cache(captions: Sequence[str], text_encoder: TextEncoder) -> EmbeddingCache:
    """Encode every caption, in order, duplicates kept."""
    if not captions:
        raise ConfigError("cannot build an embedding cache from an empty caption list")
    rows = []
    for i, caption in enumerate(captions):
        try:
            rows.append(text_encoder.encode_text(caption))
        except Exception as exc:
            raise type(exc)(f"encoding caption {i} ({caption!r}) failed: {exc}") from exc
    return EmbeddingCache(np.stack(rows).astype(np.float32), tuple(captions))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def _check_queries(cache: EmbeddingCache, queries: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != cache.dim:
        raise DimensionError(f"queries must have shape (B, {cache.dim}), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidQueryError("query contains NaN or Inf")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise InvalidQueryError(f"zero-norm query at position {int(np.argmin(norms))}")
    return q / norms[:, None]


def _exact_cos(q_unit: np.ndarray, cache: EmbeddingCache, row: int) -> float:
    return math.fsum(q_unit * cache._unit_rows[row])


def _top1_block(cache: EmbeddingCache, q_unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = cache._unit_rows
    n_q = q_unit.shape[0]
    best = np.full(n_q, -np.inf)
    candidates: list[list[tuple[float, int]]] = [[] for _ in range(n_q)]
    for start in range(0, len(cache), _BLOCK_ROWS):
        sims = q_unit @ rows[start:start + _BLOCK_ROWS].T
        best = np.maximum(best, sims.max(axis=1))
        for b in range(n_q):
            hits = np.flatnonzero(sims[b] >= best[b] - _REFINE_TOL)
            candidates[b].extend(zip(sims[b, hits].tolist(), (start + hits).tolist()))
    idx = np.empty(n_q, dtype=np.int64)
    sim = np.empty(n_q)
    for b in range(n_q):
        # rescore every near-best row exactly, then take the first maximum
        near = [j for s, j in candidates[b] if s >= best[b] - _REFINE_TOL]
        scores = [_exact_cos(q_unit[b], cache, j) for j in near]
        k = int(np.argmax(scores))
        idx[b], sim[b] = near[k], min(1.0, max(-1.0, scores[k]))
    return idx, sim


def retrieve_top1(cache: EmbeddingCache, query: np.ndarray) -> tuple[int, float]:
    """Index and cosine similarity of the most similar cache row."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise DimensionError(f"query must be 1-D, got shape {q.shape}")
    idx, sim = retrieve_batch(cache, q[None, :])
    return int(idx[0]), float(sim[0])


def retrieve_batch(
    cache: EmbeddingCache, queries: np.ndarray, n_threads: int = 1, chunk: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 retrieval for a (B, D) batch; identical to B calls of :func:`retrieve_top1`."""
    q_unit = _check_queries(cache, queries)
    parts = [q_unit[i:i + chunk] for i in range(0, q_unit.shape[0], chunk)]
    if n_threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda p: _top1_block(cache, p), parts))
    else:
        results = [_top1_block(cache, p) for p in parts]
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


def retrieve_topk(cache: EmbeddingCache, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Diagnostic top-k listing, similarity descending then index ascending."""
    q_unit = _check_queries(cache, np.asarray(query, dtype=np.float64)[None, :])[0]
    sims = cache._unit_rows @ q_unit
    k = min(k, len(cache))
    order = np.lexsort((np.arange(len(cache)), -sims))[:k]
    return [(int(i), float(np.clip(sims[i], -1.0, 1.0))) for i in order]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_cache(cache: EmbeddingCache, path: str | os.PathLike) -> None:
    """Write atomically (temp file then rename)."""
    m, d = cache.matrix.shape
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, d, m))
        fh.write(cache.matrix.astype("<f4").tobytes())
        for caption in cache.captions:
            raw = caption.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    os.replace(tmp, path)


def load_cache(path: str | os.PathLike, expected_dim: int | None = None) -> EmbeddingCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptCacheError("truncated header", len(blob))
    magic, version, d, m = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CorruptCacheError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise CorruptCacheError(f"unsupported version {version}", 4)
    if expected_dim is not None and d != expected_dim:
        raise CorruptCacheError(f"dimension {d} does not match expected {expected_dim}", 8)
    if m < 1 or d < 1:
        raise CorruptCacheError(f"empty cache (M={m}, D={d})", 12)
    offset = _HEADER.size
    n_bytes = m * d * 4
    if len(blob) < offset + n_bytes:
        raise CorruptCacheError(f"matrix block needs {n_bytes} bytes", len(blob))
    matrix = np.frombuffer(blob, dtype="<f4", count=m * d, offset=offset).reshape(m, d)
    offset += n_bytes
    captions = []
    for i in range(m):
        if len(blob) < offset + 4:
            raise CorruptCacheError(f"truncated length prefix of caption {i}", offset)
        (n,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) < offset + n:
            raise CorruptCacheError(f"caption {i} needs {n} bytes", offset)
        try:
            captions.append(blob[offset:offset + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptCacheError(f"caption {i} is not valid UTF-8", offset) from exc
        offset += n
    if offset != len(blob):
        raise CorruptCacheError(f"{len(blob) - offset} trailing bytes", offset)
    return EmbeddingCache(matrix.astype(np.float32), tuple(captions))
