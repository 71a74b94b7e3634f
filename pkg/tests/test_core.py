import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restcap.core import (
    BOS_ID,
    EOS_ID,
    OOV_ID,
    PAD_ID,
    DatasetManifest,
    FrameFeatures,
    VideoRecord,
    Vocabulary,
    aggregate_video_embedding,
    l2_normalize,
    load_manifest,
    normalize_text,
    read_embedding_blob,
    save_manifest,
    write_embedding_blob,
)
from restcap.errors import (
    BlobFormatError,
    DataError,
    DegenerateEmbeddingError,
    DimMismatchError,
    DuplicateIdError,
    MissingBlobError,
)


# ---------------------------------------------------------------------------
# l2_normalize

def test_normalize_already_unit():
    np.testing.assert_array_equal(l2_normalize([1, 0, 0, 0]), [1, 0, 0, 0])


def test_normalize_3_4_5():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-12)


def test_normalize_random_against_manual_norm():
    rng = np.random.default_rng(0)
    v = rng.normal(size=32)
    norm = np.sqrt(sum(x * x for x in v))  # brute-force norm
    np.testing.assert_allclose(l2_normalize(v), v / norm, atol=1e-9)


def test_normalize_zero_vector_raises():
    with pytest.raises(DegenerateEmbeddingError, match="degenerate embedding"):
        l2_normalize(np.zeros(8))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16))
def test_normalize_idempotent(values):
    v = np.asarray(values)
    if np.linalg.norm(v) < 1e-9:
        return
    once = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(once), once, atol=1e-9)


# ---------------------------------------------------------------------------
# aggregate_video_embedding

def test_aggregate_single_frame_identity():
    e = l2_normalize(np.arange(1, 9, dtype=float))
    np.testing.assert_allclose(aggregate_video_embedding([e]), e, atol=1e-12)


def test_aggregate_identical_frames_identity():
    e = l2_normalize(np.arange(1, 9, dtype=float))
    np.testing.assert_allclose(aggregate_video_embedding([e] * 7), e, atol=1e-12)


def test_aggregate_orthogonal_pair():
    a = np.zeros(4); a[0] = 1.0
    b = np.zeros(4); b[1] = 1.0
    out = aggregate_video_embedding([a, b])
    np.testing.assert_allclose(out[:2], [1 / np.sqrt(2)] * 2, atol=1e-12)


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(1)
    frames = [l2_normalize(rng.normal(size=16)) for _ in range(6)]
    base = aggregate_video_embedding(frames)
    perm = aggregate_video_embedding([frames[i] for i in (3, 0, 5, 1, 4, 2)])
    np.testing.assert_allclose(base, perm, atol=1e-12)


def test_aggregate_empty_raises():
    with pytest.raises(ValueError):
        aggregate_video_embedding(np.zeros((0, 4)))


# ---------------------------------------------------------------------------
# tokenizer

def test_tokenize_empty_string():
    vocab = Vocabulary(["hello"])
    assert vocab.encode("") == []


def test_tokenize_prompt_is_three_ids():
    vocab = Vocabulary.from_texts(["a video of"])
    ids = vocab.encode("a video of")
    assert len(ids) == 3
    assert all(i >= 4 for i in ids)


def test_reserved_ids():
    assert (BOS_ID, EOS_ID, PAD_ID, OOV_ID) == (0, 1, 2, 3)


def test_tokenize_round_trip_dictionary_walk():
    words = ["alpha", "beta", "gamma", "delta", "riding", "bike"]
    vocab = Vocabulary(words)
    # brute-force dictionary walk: every word must map to a unique id and back
    seen = {}
    for w in words:
        (i,) = vocab.encode(w)
        assert i not in seen
        seen[i] = w
        assert vocab.decode([i]) == w
    text = "Alpha,  BETA gamma!"
    assert vocab.decode(vocab.encode(text)) == normalize_text(text)


def test_tokenize_oov():
    vocab = Vocabulary(["known"])
    assert vocab.encode("unknown word known") == [OOV_ID, OOV_ID, vocab.encode("known")[0]]


def test_tokenizer_deterministic_across_instances():
    texts = ["one two three", "three four"]
    a = Vocabulary.from_texts(texts)
    b = Vocabulary.from_texts(list(reversed(texts)))
    assert a.encode("one four three") == b.encode("one four three")


# ---------------------------------------------------------------------------
# blobs

def test_blob_round_trip(tmp_path):
    arr = np.random.default_rng(2).normal(size=(5, 7)).astype(np.float32)
    p = tmp_path / "x.emb"
    write_embedding_blob(p, arr)
    back = read_embedding_blob(p)
    np.testing.assert_array_equal(back, arr.astype(np.float64))


def test_blob_missing_file(tmp_path):
    with pytest.raises(MissingBlobError):
        read_embedding_blob(tmp_path / "nope.emb")


def test_blob_bad_magic(tmp_path):
    p = tmp_path / "bad.emb"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(BlobFormatError):
        read_embedding_blob(p)


def test_blob_truncated(tmp_path):
    arr = np.ones((2, 3), dtype=np.float32)
    p = tmp_path / "t.emb"
    write_embedding_blob(p, arr)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(BlobFormatError):
        read_embedding_blob(p)


# ---------------------------------------------------------------------------
# manifests

def _tiny_manifest(n=3, t=2, d=4, dp=3, s=2, labels=None):
    rng = np.random.default_rng(7)
    records = []
    for i in range(n):
        emb = np.stack([l2_normalize(rng.normal(size=d)) for _ in range(t)])
        feats = FrameFeatures(spatial=rng.normal(size=(t, s, dp)),
                              cls=rng.normal(size=(t, dp)))
        records.append(VideoRecord(
            video_id=f"v{i}", frame_embeddings=emb, features=feats,
            label=None if labels is None else labels[i]))
    return DatasetManifest(records=records, dim=d, feature_dim=dp,
                           spatial_tokens=s,
                           classes=None if labels is None else sorted(set(labels)))


def test_manifest_round_trip(tmp_path):
    m = _tiny_manifest(labels=["a b", "c d", "a b"])
    save_manifest(m, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert len(back) == 3
    assert back.load_warnings == []
    assert back.classes == m.classes
    for rec, orig in zip(back.records, m.records):
        assert rec.video_id == orig.video_id
        assert rec.label == orig.label
        # float32 quantization on disk
        np.testing.assert_allclose(rec.frame_embeddings, orig.frame_embeddings, atol=1e-6)
        np.testing.assert_allclose(rec.features.spatial, orig.features.spatial, atol=1e-6)


def test_manifest_missing_blob(tmp_path):
    m = _tiny_manifest()
    save_manifest(m, tmp_path / "manifest.json")
    (tmp_path / "blobs" / "v1.emb").unlink()
    with pytest.raises(MissingBlobError, match="missing blob"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_duplicate_id(tmp_path):
    m = _tiny_manifest()
    save_manifest(m, tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["videos"].append(dict(doc["videos"][0]))
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DuplicateIdError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_dim_mismatch(tmp_path):
    m = _tiny_manifest()
    save_manifest(m, tmp_path / "manifest.json")
    write_embedding_blob(tmp_path / "blobs" / "v0.emb",
                         np.ones((2, 9), dtype=np.float32))
    with pytest.raises(DimMismatchError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_label_outside_classes(tmp_path):
    m = _tiny_manifest(labels=["a b", "c d", "a b"])
    save_manifest(m, tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["videos"][0]["label"] = "zzz"
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_renormalizes_with_warning(tmp_path):
    m = _tiny_manifest()
    save_manifest(m, tmp_path / "manifest.json")
    emb = read_embedding_blob(tmp_path / "blobs" / "v0.emb") * 1.0001
    write_embedding_blob(tmp_path / "blobs" / "v0.emb", emb)
    back = load_manifest(tmp_path / "manifest.json")
    assert len(back.load_warnings) == 1
    norms = np.linalg.norm(back.get("v0").frame_embeddings, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
