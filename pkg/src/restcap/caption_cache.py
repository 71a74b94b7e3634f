"""Per-video pseudo-caption lifecycle: initialization from per-frame
captions, candidate pools gathered from retrieved neighbors, top-K
refresh by video-text relevance, and appends of self-generated text.

Caption texts are normalized (lowercase, punctuation stripped, capped
at MAX_CAPTION_TOKENS words) on ingestion and deduplicated exactly;
every stored relevance is the cosine between the owning video's
embedding and the caption embedding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .caption_norm import MAX_CAPTION_TOKENS, normalize_caption
from .errors import CacheParseError, DataError
from .similarity import NeighborIndex, TextEmbeddingCache, video_text_similarity

log = logging.getLogger(__name__)

__all__ = [
    "MAX_CAPTION_TOKENS",
    "normalize_caption",
    "Origin",
    "ScoredCaption",
    "CaptionCache",
    "init_caches",
    "build_candidate_pool",
    "refresh_cache",
    "refresh_all",
    "append_generated",
    "save_caches",
    "load_caches",
    "cache_stats",
]


class Origin(str, Enum):
    INIT = "init"
    SELF_GENERATED = "self_generated"
    RETRIEVED = "retrieved"


@dataclass(frozen=True)
class ScoredCaption:
    text: str
    embedding: np.ndarray | None
    relevance: float
    origin: Origin
    round: int


class CaptionCache:
    """Ordered pseudo-caption lists keyed by video id.

    ``mutations`` counts committed writes; the training loop asserts it
    stays flat during training phases (cache writes happen only at
    retrieval barriers).
    """

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("K must be >= 1")
        self.k = k
        self.entries: dict[str, list[ScoredCaption]] = {}
        self.mutations = 0

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.entries

    def video_ids(self) -> list[str]:
        return list(self.entries)

    def get(self, video_id: str) -> list[ScoredCaption]:
        try:
            return self.entries[video_id]
        except KeyError:
            raise DataError(f"unknown video id: {video_id}") from None

    def set(self, video_id: str, captions: list[ScoredCaption]) -> None:
        self.entries[video_id] = captions
        self.mutations += 1


def _scored(text: str, embedding: np.ndarray, video_embedding, origin: Origin,
            round_no: int) -> ScoredCaption:
    rel = video_text_similarity(video_embedding, embedding)
    return ScoredCaption(text=text, embedding=embedding, relevance=rel,
                         origin=origin, round=round_no)


def _dedup_keep_first(captions: list[ScoredCaption]) -> list[ScoredCaption]:
    seen: dict[str, ScoredCaption] = {}
    for cap in captions:
        if cap.text not in seen:
            seen[cap.text] = cap
    return list(seen.values())


def init_caches(per_frame_captions: dict[str, list[str]], index: NeighborIndex,
                k: int, video_embeddings: dict[str, np.ndarray],
                text_cache: TextEmbeddingCache) -> CaptionCache:
    """Seed every video's pool with its per-frame captions, then run one
    retrieval refresh so each list holds at most K entries.

    Raises if any video ends up with zero usable captions.
    """
    cache = CaptionCache(k)
    for vid in index.video_ids:
        raw = per_frame_captions.get(vid, [])
        texts = [normalize_caption(t) for t in raw]
        texts = [t for t in texts if t]
        if not texts:
            raise DataError(f"video {vid} has no usable initial captions")
        f_v = video_embeddings[vid]
        entries = [
            _scored(t, text_cache.embed(t), f_v, Origin.INIT, 0)
            for t in texts
        ]
        cache.set(vid, _dedup_keep_first(entries))
    refresh_all(cache, index, k, video_embeddings, round_no=0)
    return cache


def build_candidate_pool(video_id: str, index: NeighborIndex,
                         cache: CaptionCache,
                         snapshot: dict[str, list[ScoredCaption]] | None = None,
                         ) -> list[ScoredCaption]:
    """Concatenate the caches of the video's top-H neighbors, nearest
    first. Size is bounded by H * (K + 1)."""
    entries = snapshot if snapshot is not None else cache.entries
    pool: list[ScoredCaption] = []
    for neighbor_id, _score in index.neighbors_of(video_id):
        pool.extend(entries.get(neighbor_id, ()))
    return pool


def refresh_cache(video_id: str, pool: list[ScoredCaption], cache: CaptionCache,
                  k: int, video_embedding, round_no: int,
                  resident: list[ScoredCaption] | None = None,
                  ) -> list[ScoredCaption]:
    """Top-K of dedup(resident + pool) by relevance against this video.

    Resident entries keep their origin, round and (already coherent)
    relevance; entries arriving from the pool are rescored against the
    owning video and tagged RETRIEVED. Ties keep insertion order
    (resident first, then pool order).
    """
    if resident is None:
        resident = cache.get(video_id)
    resident_by_text = {c.text: c for c in resident}
    candidates: list[ScoredCaption] = list(resident)
    for cap in pool:
        if cap.text in resident_by_text:
            continue
        if cap.embedding is None:
            raise DataError(f"candidate caption without embedding: {cap.text!r}")
        candidates.append(
            _scored(cap.text, cap.embedding, video_embedding, Origin.RETRIEVED, round_no)
        )
    candidates = _dedup_keep_first(candidates)
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].relevance, i))
    return [candidates[i] for i in order[:k]]


def refresh_all(cache: CaptionCache, index: NeighborIndex, k: int,
                video_embeddings: dict[str, np.ndarray], round_no: int) -> None:
    """Refresh every video against a frozen snapshot of all caches, then
    commit the new lists atomically."""
    snapshot = {vid: list(entries) for vid, entries in cache.entries.items()}
    updated: dict[str, list[ScoredCaption]] = {}
    for vid in index.video_ids:
        pool = build_candidate_pool(vid, index, cache, snapshot=snapshot)
        updated[vid] = refresh_cache(
            vid, pool, cache, k, video_embeddings[vid], round_no,
            resident=snapshot[vid],
        )
    for vid, entries in updated.items():
        cache.set(vid, entries)


def append_generated(cache: CaptionCache, video_id: str, text: str,
                     text_cache: TextEmbeddingCache, video_embedding,
                     round_no: int) -> bool:
    """Add a self-generated caption (bounded growth to K+1).

    A duplicate of a resident text does not grow the list; its origin
    and round are updated instead. Empty text is skipped with a warning.
    Returns True if the cache changed.
    """
    norm = normalize_caption(text)
    if not norm:
        log.warning("video %s: empty generated caption skipped", video_id)
        return False
    resident = cache.get(video_id)
    if len(resident) > cache.k:
        raise DataError(
            f"video {video_id}: append on a cache already holding {len(resident)} entries"
        )
    for pos, cap in enumerate(resident):
        if cap.text == norm:
            updated = list(resident)
            updated[pos] = replace(cap, origin=Origin.SELF_GENERATED, round=round_no)
            cache.set(video_id, updated)
            return True
    entry = _scored(norm, text_cache.embed(norm), video_embedding,
                    Origin.SELF_GENERATED, round_no)
    cache.set(video_id, list(resident) + [entry])
    return True


def save_caches(cache: CaptionCache, path) -> None:
    """JSON Lines, one record per video."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for vid, entries in cache.entries.items():
            record = {
                "id": vid,
                "captions": [
                    {
                        "text": c.text,
                        "score": c.relevance,
                        "origin": c.origin.value,
                        "round": c.round,
                    }
                    for c in entries
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_caches(path, k: int | None = None,
                text_cache: TextEmbeddingCache | None = None) -> CaptionCache:
    """Read a cache file back; embeddings are rehydrated through
    ``text_cache`` when given, else left as None (inspection use)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"cache file not found: {path}")
    records: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CacheParseError(f"corrupt cache record: {exc.msg}", lineno) from exc
    max_len = max((len(r.get("captions", [])) for r in records), default=1)
    cache = CaptionCache(k if k is not None else max(1, max_len))
    for rec in records:
        entries = []
        for cap in rec["captions"]:
            emb = text_cache.embed(cap["text"]) if text_cache is not None else None
            entries.append(
                ScoredCaption(
                    text=cap["text"],
                    embedding=emb,
                    relevance=float(cap["score"]),
                    origin=Origin(cap["origin"]),
                    round=int(cap["round"]),
                )
            )
        cache.entries[rec["id"]] = entries
    return cache


def cache_stats(cache: CaptionCache) -> dict:
    """Summary numbers logged once per retrieval round."""
    sizes, relevances = [], []
    origin_counts = {o.value: 0 for o in Origin}
    texts: set[str] = set()
    for entries in cache.entries.values():
        sizes.append(len(entries))
        for c in entries:
            relevances.append(c.relevance)
            origin_counts[c.origin.value] += 1
            texts.add(c.text)
    return {
        "videos": len(cache.entries),
        "mean_size": float(np.mean(sizes)) if sizes else 0.0,
        "mean_relevance": float(np.mean(relevances)) if relevances else 0.0,
        "min_relevance": float(np.min(relevances)) if relevances else 0.0,
        "distinct_captions": len(texts),
        "origins": origin_counts,
    }
