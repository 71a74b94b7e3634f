"""Frozen-retriever similarity: cosine scores over unit embeddings, an
exact top-H neighbor index, and a memoizing text-embedding cache.

The neighbor index is brute force by design (N is a few thousand at
most); the score matrix is evaluated in row blocks and each row is
ranked with a fully deterministic tie rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimMismatchError


def video_video_similarity(f_i, f_j) -> float:
    """Dot product of two unit video embeddings (cosine)."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise DimMismatchError(f"dim mismatch: {f_i.shape} vs {f_j.shape}")
    return float(f_i @ f_j)


def video_text_similarity(f_i, t_j) -> float:
    """Dot product of a video embedding with a caption embedding.

    Identical math to the video-video score; kept as a separate entry
    point because the two scores play different roles.
    """
    return video_video_similarity(f_i, t_j)


@dataclass
class NeighborIndex:
    """Per-video list of the top-H most similar videos, self included.

    ``order[i]`` holds neighbor row indices sorted by score descending;
    ties go to self first, then ascending row index. ``scores[i]`` are
    the matching similarities.
    """

    video_ids: list[str]
    order: np.ndarray   # (N, H') int
    scores: np.ndarray  # (N, H') float64

    def __post_init__(self):
        self._row_of = {v: i for i, v in enumerate(self.video_ids)}

    @property
    def h(self) -> int:
        return self.order.shape[1]

    def row(self, video_id: str) -> int:
        try:
            return self._row_of[video_id]
        except KeyError:
            raise DataError(f"unknown video id: {video_id}") from None

    def neighbors_of(self, video_id: str) -> list[tuple[str, float]]:
        i = self.row(video_id)
        return [
            (self.video_ids[j], float(s))
            for j, s in zip(self.order[i], self.scores[i])
        ]

    def to_json(self, path) -> None:
        doc = {
            vid: [[self.video_ids[j], float(s)] for j, s in zip(row, srow)]
            for vid, row, srow in zip(self.video_ids, self.order, self.scores)
        }
        Path(path).write_text(json.dumps(doc, indent=2))


def build_neighbor_index(embeddings, video_ids, h: int, block: int = 256) -> NeighborIndex:
    """Exact top-H index over unit embeddings.

    Scores are computed blockwise (rows of E @ E.T) to cap peak memory.
    Ranking per row: score descending, self before any equal-scoring
    other video, remaining ties by ascending row index. Self-first keeps
    the self-neighbor invariant intact even in the presence of exact
    duplicate embeddings.
    """
    if h < 1:
        raise ValueError("H must be >= 1")
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError(f"expected (N, d) embeddings, got shape {emb.shape}")
    n = emb.shape[0]
    if len(video_ids) != n:
        raise ValueError("video_ids length does not match embeddings")
    h_eff = min(h, n)

    order = np.empty((n, h_eff), dtype=np.int64)
    scores = np.empty((n, h_eff), dtype=np.float64)
    idx = np.arange(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = emb[start:stop] @ emb.T  # (b, N)
        for local, i in enumerate(range(start, stop)):
            row = sims[local]
            not_self = (idx != i).astype(np.int64)
            # lexsort: last key is primary
            perm = np.lexsort((idx, not_self, -row))[:h_eff]
            order[i] = perm
            scores[i] = row[perm]
    return NeighborIndex(video_ids=list(video_ids), order=order, scores=scores)


class TextEmbeddingCache:
    """Memoized caption -> unit embedding map over a provider callable.

    The provider is invoked exactly once per distinct caption; repeat
    lookups return the identical (read-only) array. ``provider_calls``
    exposes the invocation count for precomputation audits.
    """

    def __init__(self, provider):
        self._provider = provider
        self._store: dict[str, np.ndarray] = {}
        self.provider_calls = 0

    def __contains__(self, caption: str) -> bool:
        return caption in self._store

    def __len__(self) -> int:
        return len(self._store)

    def embed(self, caption: str) -> np.ndarray:
        hit = self._store.get(caption)
        if hit is not None:
            return hit
        try:
            vec = np.asarray(self._provider(caption), dtype=np.float64)
        except Exception as exc:
            raise DataError(f"text embedding provider failed for {caption!r}: {exc}") from exc
        self.provider_calls += 1
        vec.flags.writeable = False
        self._store[caption] = vec
        return vec

    def embed_batch(self, captions) -> list[np.ndarray]:
        return [self.embed(c) for c in captions]


def embed_text_batch(captions, cache: TextEmbeddingCache) -> list[np.ndarray]:
    """Embed captions through the cache; misses hit the provider once."""
    return cache.embed_batch(captions)
