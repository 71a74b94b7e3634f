"""Foundational types and operations: unit embeddings, word-level
tokenization, dataset manifests and the binary embedding-blob format.

Embeddings are plain float64 numpy vectors kept L2-normalized; every
similarity in the engine is therefore a cosine. Tokenization is a
deterministic lowercase word-level scheme with four reserved ids.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BlobFormatError,
    DataError,
    DegenerateEmbeddingError,
    DimMismatchError,
    DuplicateIdError,
    MissingBlobError,
)

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
OOV_ID = 3
RESERVED_TOKENS = ("<bos>", "<eos>", "<pad>", "<oov>")
N_RESERVED = len(RESERVED_TOKENS)

BLOB_MAGIC = b"RSTE"

_WORD_RE = re.compile(r"[a-z0-9']+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_WORD_RE.findall(text.lower()))


def l2_normalize(v) -> np.ndarray:
    """Return ``v / ||v||`` as a float64 vector.

    Raises DegenerateEmbeddingError on an (effectively) zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected 1-d vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateEmbeddingError("degenerate embedding: zero or non-finite norm")
    return v / norm


def aggregate_video_embedding(frames) -> np.ndarray:
    """Sum per-frame embeddings and renormalize.

    Frame order does not matter; scaling by the frame count is removed
    by the normalization.
    """
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a nonempty (T, d) array, got shape {arr.shape}")
    return l2_normalize(arr.sum(axis=0))


class Vocabulary:
    """Word-level vocabulary with fixed reserved ids.

    ids 0..3 are <bos>/<eos>/<pad>/<oov>; words get ids 4.. in sorted
    order, so the mapping is deterministic for a given word set.
    """

    def __init__(self, words):
        uniq = sorted({w for w in words if w})
        self._id_of = {w: N_RESERVED + i for i, w in enumerate(uniq)}
        self._word_of = list(RESERVED_TOKENS) + uniq

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        words: set[str] = set()
        for t in texts:
            words.update(normalize_text(t).split())
        return cls(words)

    def __len__(self) -> int:
        return len(self._word_of)

    def __contains__(self, word: str) -> bool:
        return word in self._id_of

    def encode(self, text: str) -> list[int]:
        """Tokenize to ids; unknown words map to the OOV id. BOS/EOS are
        not emitted here (the decoder pipeline adds them)."""
        return [self._id_of.get(w, OOV_ID) for w in normalize_text(text).split()]

    def decode(self, ids) -> str:
        """Inverse of encode for in-vocabulary ids; reserved ids are
        dropped except <oov>, which round-trips as its literal token."""
        words = []
        for i in ids:
            if i in (BOS_ID, EOS_ID, PAD_ID):
                continue
            words.append(self._word_of[i])
        return " ".join(words)

    def words(self) -> list[str]:
        return self._word_of[N_RESERVED:]


@dataclass(frozen=True)
class FrameFeatures:
    """Captioner-side per-video features: a spatial token grid per frame
    plus one class token per frame."""

    spatial: np.ndarray  # (T, S, d_feat)
    cls: np.ndarray      # (T, d_feat)

    def __post_init__(self):
        if self.spatial.ndim != 3 or self.cls.ndim != 2:
            raise ValueError("spatial must be (T,S,d), cls must be (T,d)")
        if self.spatial.shape[0] != self.cls.shape[0]:
            raise ValueError("frame counts differ between spatial and cls tokens")
        if self.spatial.shape[2] != self.cls.shape[1]:
            raise ValueError("feature dims differ between spatial and cls tokens")
        if not (np.isfinite(self.spatial).all() and np.isfinite(self.cls).all()):
            raise ValueError("non-finite frame features")

    @property
    def frames(self) -> int:
        return self.spatial.shape[0]

    @property
    def spatial_tokens(self) -> int:
        return self.spatial.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.spatial.shape[2]


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frame_embeddings: np.ndarray  # (T, d), unit rows, retriever space
    features: FrameFeatures
    label: str | None = None

    @property
    def frame_count(self) -> int:
        return self.frame_embeddings.shape[0]


@dataclass
class DatasetManifest:
    records: list[VideoRecord]
    dim: int
    feature_dim: int
    spatial_tokens: int
    classes: list[str] | None = None
    load_warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {r.video_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise DuplicateIdError("duplicate id in manifest records")

    def __len__(self) -> int:
        return len(self.records)

    def video_ids(self) -> list[str]:
        return [r.video_id for r in self.records]

    def get(self, video_id: str) -> VideoRecord:
        try:
            return self._by_id[video_id]
        except KeyError:
            raise DataError(f"unknown video id: {video_id}") from None


def write_embedding_blob(path, array) -> None:
    """Write a (count, dim) float32 blob: magic 'RSTE', u32 LE count,
    u32 LE dim, then row-major float32 little-endian payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim != 2:
        raise ValueError(f"blob payload must be 2-d, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_embedding_blob(path) -> np.ndarray:
    """Read an RSTE blob back as a float64 (count, dim) array."""
    path = Path(path)
    if not path.exists():
        raise MissingBlobError(f"missing blob: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != BLOB_MAGIC:
        raise BlobFormatError(f"bad blob header in {path}")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise BlobFormatError(
            f"blob size mismatch in {path}: expected {expected} bytes, got {len(raw)}"
        )
    payload = np.frombuffer(raw, dtype="<f4", offset=12)
    return payload.reshape(count, dim).astype(np.float64)


# Renormalization thresholds for retriever embeddings loaded from disk.
# float32 round-trips of unit vectors land well under WARN.
NORM_WARN_TOL = 1e-5
NORM_ERROR_TOL = 1e-3


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    The manifest is a JSON file with keys ``dim``, ``feature_dim``,
    optional ``classes`` and ``videos``: a list of ``{id, frames,
    embedding_file, feature_file, label?}``. Blob paths are resolved
    relative to the manifest file. Retriever embeddings are checked for
    unit norm (warning beyond NORM_WARN_TOL, error beyond
    NORM_ERROR_TOL) and then renormalized exactly.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc

    for key in ("dim", "feature_dim", "videos"):
        if key not in doc:
            raise DataError(f"manifest missing required key: {key}")
    dim = int(doc["dim"])
    feature_dim = int(doc["feature_dim"])
    classes = doc.get("classes")
    if classes is not None:
        classes = [str(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise DuplicateIdError("duplicate class name in manifest")

    base = path.parent
    warnings: list[str] = []
    records: list[VideoRecord] = []
    seen_ids: set[str] = set()
    spatial_tokens: int | None = None

    for entry in doc["videos"]:
        vid = str(entry["id"])
        if vid in seen_ids:
            raise DuplicateIdError(f"duplicate id: {vid}")
        seen_ids.add(vid)
        frames = int(entry["frames"])
        if frames < 1:
            raise DataError(f"video {vid}: frame count must be positive")

        emb = read_embedding_blob(base / entry["embedding_file"])
        if emb.shape != (frames, dim):
            raise DimMismatchError(
                f"video {vid}: embedding blob shape {emb.shape}, expected {(frames, dim)}"
            )
        norms = np.linalg.norm(emb, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateEmbeddingError(f"video {vid}: zero frame embedding")
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_ERROR_TOL:
            raise DataError(f"video {vid}: embeddings far from unit norm (|delta|={worst:.2e})")
        if worst > NORM_WARN_TOL:
            warnings.append(f"video {vid}: renormalized embeddings (|delta|={worst:.2e})")
        emb = emb / norms[:, None]

        feat = read_embedding_blob(base / entry["feature_file"])
        if feat.shape[0] != frames:
            raise DimMismatchError(
                f"video {vid}: feature blob has {feat.shape[0]} rows, expected {frames}"
            )
        if feat.shape[1] % feature_dim != 0 or feat.shape[1] < 2 * feature_dim:
            raise DimMismatchError(
                f"video {vid}: feature row width {feat.shape[1]} is not (S+1)*{feature_dim}"
            )
        s_tokens = feat.shape[1] // feature_dim - 1
        if spatial_tokens is None:
            spatial_tokens = s_tokens
        elif s_tokens != spatial_tokens:
            raise DimMismatchError(
                f"video {vid}: spatial token count {s_tokens} != {spatial_tokens}"
            )
        cls = feat[:, :feature_dim]
        spatial = feat[:, feature_dim:].reshape(frames, s_tokens, feature_dim)

        label = entry.get("label")
        if label is not None:
            label = str(label)
            if classes is not None and label not in classes:
                raise DataError(f"video {vid}: label {label!r} not in manifest classes")

        records.append(
            VideoRecord(
                video_id=vid,
                frame_embeddings=emb,
                features=FrameFeatures(spatial=spatial, cls=cls),
                label=label,
            )
        )

    if not records:
        raise DataError("manifest contains no videos")
    return DatasetManifest(
        records=records,
        dim=dim,
        feature_dim=feature_dim,
        spatial_tokens=int(spatial_tokens),
        classes=classes,
        load_warnings=warnings,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest plus one embedding and one feature blob per video.

    Feature rows are packed as [class token | flattened spatial tokens].
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    videos = []
    for rec in manifest.records:
        emb_rel = f"blobs/{rec.video_id}.emb"
        feat_rel = f"blobs/{rec.video_id}.feat"
        write_embedding_blob(base / emb_rel, rec.frame_embeddings)
        t = rec.features.frames
        packed = np.concatenate(
            [rec.features.cls, rec.features.spatial.reshape(t, -1)], axis=1
        )
        write_embedding_blob(base / feat_rel, packed)
        entry = {
            "id": rec.video_id,
            "frames": rec.frame_count,
            "embedding_file": emb_rel,
            "feature_file": feat_rel,
        }
        if rec.label is not None:
            entry["label"] = rec.label
        videos.append(entry)
    doc = {
        "dim": manifest.dim,
        "feature_dim": manifest.feature_dim,
        "videos": videos,
    }
    if manifest.classes is not None:
        doc["classes"] = manifest.classes
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
