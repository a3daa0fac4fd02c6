"""Exact cosine-similarity vector index.

Search is an exhaustive scan, which keeps ranking exact and reproducible.
Vectors are unit-normalized at build time; ranking ties break by ascending
item id. Persistence is a binary file: a JSON header line, then for each
entry a length-prefixed id and little-endian float32 components.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np


class ZeroVectorError(ValueError):
    pass


class IndexBuildError(RuntimeError):
    pass


SOURCE_MODES = ("text_description", "raw_code")

_INDEX_FORMAT_VERSION = 1


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


@dataclass(frozen=True)
class VectorIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray  # unit rows, float64, read-only
    provider_id: str
    source_mode: str

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(cls, ids, vectors, provider_id: str, source_mode: str) -> "VectorIndex":
        if source_mode not in SOURCE_MODES:
            raise ValueError(f"source_mode must be one of {SOURCE_MODES}, got {source_mode!r}")
        ids = tuple(ids)
        if len(set(ids)) != len(ids):
            raise IndexBuildError("duplicate item ids in index")
        matrix = np.array(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("vectors must be a 2-d array matching ids")
        norms = np.linalg.norm(matrix, axis=1)
        zero = [ids[i] for i in np.nonzero(norms == 0.0)[0]]
        if zero:
            raise IndexBuildError(f"zero vectors for items: {', '.join(zero)}")
        matrix = matrix / norms[:, None]
        matrix.setflags(write=False)
        return cls(ids=ids, matrix=matrix, provider_id=provider_id, source_mode=source_mode)


def build_index(items, provider, source_mode: str) -> VectorIndex:
    """Embed (id, text) items with `provider` and build an index.

    Any per-item embedding failure aborts the build, listing the failed ids.
    """
    ids = [item_id for item_id, _ in items]
    vectors = []
    failed: list[str] = []
    for item_id, text in items:
        try:
            vectors.append(provider.embed(text))
        except Exception as exc:
            failed.append(f"{item_id} ({exc})")
            vectors.append(None)
    if failed:
        raise IndexBuildError(f"embedding failed for: {'; '.join(failed)}")
    if not vectors:
        return VectorIndex.from_vectors((), np.zeros((0, provider.dim)), provider.provider_id, source_mode)
    return VectorIndex.from_vectors(ids, np.stack(vectors), provider.provider_id, source_mode)


def top_k(index: VectorIndex, query, k: int) -> list[tuple[str, float]]:
    """Exact top-k by descending cosine, ties by ascending item id."""
    if not 1 <= k <= len(index.ids):
        raise ValueError(f"k must be in 1..{len(index.ids)}, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ZeroVectorError("cannot search with a zero query vector")
    qn = q / norm
    # per-entry dot products keep the scan arithmetic exact and reproducible
    scores = [float(np.dot(index.matrix[i], qn)) for i in range(len(index.ids))]
    order = sorted(range(len(index.ids)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], scores[i]) for i in order[:k]]


@dataclass(frozen=True)
class ApiRetrievalSet:
    """Per-description winners plus the deduplicated id list, first wins."""

    pairs: list  # (description_id, api_id, score)
    api_ids: tuple[str, ...]


def retrieve_apis(description_vectors, index: VectorIndex) -> ApiRetrievalSet:
    """Top-1 API per description vector, deduplicated preserving first hit.

    `description_vectors` is a sequence of (description_id, vector). An empty
    sequence is valid and yields an empty set.
    """
    pairs = []
    seen: list[str] = []
    for desc_id, vec in description_vectors:
        (api_id, score), = top_k(index, vec, 1)
        pairs.append((desc_id, api_id, score))
        if api_id not in seen:
            seen.append(api_id)
    return ApiRetrievalSet(pairs=pairs, api_ids=tuple(seen))


def retrieve_similar(target_vector, window_index: VectorIndex, windows_by_key,
                     k: int = 5, exclude_path: str | None = None,
                     exclude_span=None) -> list:
    """Top-k most similar code windows, excluding any window overlapping the
    target span. Returns fewer than k when the index is small."""
    if len(window_index) == 0:
        return []
    ranked = top_k(window_index, target_vector, len(window_index))
    out = []
    for key, _score in ranked:
        window = windows_by_key[key]
        if (
            exclude_path is not None
            and exclude_span is not None
            and window.path == exclude_path
            and window.span().overlaps(exclude_span)
        ):
            continue
        out.append(window)
        if len(out) == k:
            break
    return out


def save_index(index: VectorIndex, path) -> None:
    header = {
        "version": _INDEX_FORMAT_VERSION,
        "dim": index.dim,
        "provider_id": index.provider_id,
        "source_mode": index.source_mode,
        "count": len(index.ids),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for i, item_id in enumerate(index.ids):
            raw_id = item_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_id)))
            fh.write(raw_id)
            fh.write(index.matrix[i].astype("<f4").tobytes())


def load_index(path) -> VectorIndex:
    """Load a persisted index, verifying the entry count and unit norms."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        dim = header["dim"]
        count = header["count"]
        ids = []
        rows = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            prefix = fh.read(4)
            if len(prefix) != 4:
                raise ValueError(f"index truncated at entry {i}")
            (id_len,) = struct.unpack("<I", prefix)
            raw_id = fh.read(id_len)
            vec = fh.read(dim * 4)
            if len(raw_id) != id_len or len(vec) != dim * 4:
                raise ValueError(f"index truncated at entry {i}")
            ids.append(raw_id.decode("utf-8"))
            rows[i] = np.frombuffer(vec, dtype="<f4").astype(np.float64)
        if fh.read(1):
            raise ValueError("trailing bytes after declared entry count")
    norms = np.linalg.norm(rows, axis=1)
    if count and not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError("persisted vectors are not unit-normalized")
    rows.setflags(write=False)
    return VectorIndex(
        ids=tuple(ids), matrix=rows,
        provider_id=header["provider_id"], source_mode=header["source_mode"],
    )
