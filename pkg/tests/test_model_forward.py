import numpy as np
import pytest

from restcap.core import BOS_ID, FrameFeatures
from restcap.errors import DataError
from restcap.model import (
    LN_EPS,
    ModelConfig,
    ToyCaptioner,
    decode_forward,
    decode_logits,
    encode_video,
    temporal_adapter,
)


def rand_features(rng, t=5, s=3, dp=4):
    return FrameFeatures(spatial=rng.normal(size=(t, s, dp)),
                         cls=rng.normal(size=(t, dp)))


# ---------------------------------------------------------------------------
# temporal adapter

def test_adapter_zero_kernel_is_identity():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 3, 4))
    np.testing.assert_array_equal(temporal_adapter(z, np.zeros((3, 4))), z)


def test_adapter_single_frame_center_tap_only():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(1, 2, 4))
    k = rng.normal(size=(3, 4))
    out = temporal_adapter(z, k)
    np.testing.assert_allclose(out, z * (1.0 + k[1]), atol=1e-12)


def test_adapter_matches_triple_loop_oracle():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(7, 3, 5))
    k = rng.normal(size=(3, 5))
    t_n, s_n, c_n = z.shape
    expected = np.zeros_like(z)
    for t in range(t_n):
        for s in range(s_n):
            for c in range(c_n):
                acc = z[t, s, c]
                for tau in (-1, 0, 1):
                    if 0 <= t + tau < t_n:
                        acc += k[tau + 1, c] * z[t + tau, s, c]
                expected[t, s, c] = acc
    np.testing.assert_allclose(temporal_adapter(z, k), expected, atol=1e-9)


def test_adapter_shape_mismatch():
    with pytest.raises(ValueError):
        temporal_adapter(np.zeros((2, 2, 4)), np.zeros((3, 5)))


# ---------------------------------------------------------------------------
# encode_video

def _cfg(**kw):
    base = dict(vocab_size=11, feature_dim=4, spatial_tokens=3, d_model=6,
                n_blocks=1, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


def test_encode_adapter_off_identical_frames():
    rng = np.random.default_rng(3)
    model = ToyCaptioner(_cfg(adapter_enabled=False), seed=0)
    frame_sp = rng.normal(size=(1, 3, 4))
    frame_cls = rng.normal(size=(1, 4))
    feats = FrameFeatures(spatial=np.repeat(frame_sp, 5, axis=0),
                          cls=np.repeat(frame_cls, 5, axis=0))
    visual = encode_video(feats, model)
    tokens0 = np.concatenate([frame_cls, frame_sp[0]], axis=0)
    np.testing.assert_allclose(visual, tokens0 @ model.params["encoder.proj"],
                               atol=1e-12)


def test_encode_zero_init_adapter_equals_disabled():
    rng = np.random.default_rng(4)
    model = ToyCaptioner(_cfg(adapter_enabled=True), seed=0)
    assert not model.params["adapter.kernel"].any()
    for _ in range(20):
        feats = rand_features(rng, t=4, s=3, dp=4)
        on = encode_video(feats, model, adapter_enabled=True)
        off = encode_video(feats, model, adapter_enabled=False)
        np.testing.assert_array_equal(on, off)


def test_encode_matches_unfused_oracle():
    rng = np.random.default_rng(5)
    model = ToyCaptioner(_cfg(), seed=0)
    model.params["adapter.kernel"] = rng.normal(0, 0.2, (3, 4))
    feats = rand_features(rng, t=6, s=3, dp=4)
    visual = encode_video(feats, model)

    k = model.params["adapter.kernel"]
    t_n = feats.frames
    z1 = np.zeros_like(feats.spatial)
    for t in range(t_n):
        for s in range(3):
            for c in range(4):
                acc = feats.spatial[t, s, c]
                for tau in (-1, 0, 1):
                    if 0 <= t + tau < t_n:
                        acc += k[tau + 1, c] * feats.spatial[t + tau, s, c]
                z1[t, s, c] = acc
    rows = [feats.cls.mean(axis=0)]
    for s in range(3):
        rows.append(z1[:, s, :].mean(axis=0))
    expected = np.stack([r @ model.params["encoder.proj"] for r in rows])
    np.testing.assert_allclose(visual, expected, atol=1e-9)


# ---------------------------------------------------------------------------
# decoder

def test_decode_requires_bos():
    model = ToyCaptioner(_cfg(), seed=0)
    visual = np.zeros((4, 6))
    with pytest.raises(DataError):
        decode_logits(visual, [5, 6], model)


def test_decode_max_len():
    model = ToyCaptioner(_cfg(max_len=8), seed=0)
    visual = np.zeros((4, 6))
    ids = [BOS_ID] + [4] * 8
    with pytest.raises(DataError):
        decode_logits(visual, ids, model)


def test_decode_causality_exact():
    rng = np.random.default_rng(6)
    model = ToyCaptioner(_cfg(n_blocks=2), seed=1)
    visual = rng.normal(size=(4, 6))
    ids = [BOS_ID, 4, 5, 6, 7, 8]
    base = decode_logits(visual, ids, model)
    for j in range(1, len(ids)):
        mutated = list(ids)
        mutated[j] = 9 if mutated[j] != 9 else 10
        out = decode_logits(visual, mutated, model)
        np.testing.assert_array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j:], base[j:])


def test_decode_cross_attention_is_live_everywhere():
    rng = np.random.default_rng(7)
    model = ToyCaptioner(_cfg(), seed=2)
    visual = rng.normal(size=(4, 6))
    ids = [BOS_ID, 4, 5, 6]
    base = decode_logits(visual, ids, model)
    for row in range(visual.shape[0]):
        bumped = visual.copy()
        bumped[row] += 0.25
        out = decode_logits(bumped, ids, model)
        assert np.all(np.abs(out - base).max(axis=1) > 0)


def _oracle_ln(x, g, b):
    mu = float(np.mean(x))
    var = float(np.mean((x - mu) ** 2))
    return g * ((x - mu) / np.sqrt(var + LN_EPS)) + b


def _oracle_softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def test_decode_matches_hand_rolled_forward():
    """Step-by-step single-position reimplementation of the decoder."""
    rng = np.random.default_rng(8)
    cfg = _cfg(d_model=4, n_blocks=1, vocab_size=9, feature_dim=3,
               spatial_tokens=2)
    model = ToyCaptioner(cfg, seed=3)
    for name, p in model.params.items():
        if p.ndim >= 2:
            model.params[name] = rng.normal(0, 0.5, p.shape)
    visual = rng.normal(size=(3, 4))
    ids = [BOS_ID, 4, 5, 6, 7]
    got = decode_logits(visual, ids, model)

    prm = model.params
    n = len(ids)
    d = 4
    x = [prm["tok.emb"][ids[i]] + prm["pos.emb"][i] for i in range(n)]
    p = "block0"
    # self-attention, one query position at a time
    a1 = [_oracle_ln(x[i], prm[f"{p}.ln1.g"], prm[f"{p}.ln1.b"]) for i in range(n)]
    q = [a1[i] @ prm[f"{p}.sa.wq"] for i in range(n)]
    k = [a1[i] @ prm[f"{p}.sa.wk"] for i in range(n)]
    v = [a1[i] @ prm[f"{p}.sa.wv"] for i in range(n)]
    x1 = []
    for i in range(n):
        scores = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(i + 1)])
        w = _oracle_softmax(scores)
        ctx = sum(w[j] * v[j] for j in range(i + 1))
        x1.append(x[i] + ctx @ prm[f"{p}.sa.wo"])
    # cross-attention
    a2 = [_oracle_ln(x1[i], prm[f"{p}.ln2.g"], prm[f"{p}.ln2.b"]) for i in range(n)]
    kc = [visual[r] @ prm[f"{p}.ca.wk"] for r in range(3)]
    vc = [visual[r] @ prm[f"{p}.ca.wv"] for r in range(3)]
    x2 = []
    for i in range(n):
        qc = a2[i] @ prm[f"{p}.ca.wq"]
        scores = np.array([qc @ kc[r] / np.sqrt(d) for r in range(3)])
        w = _oracle_softmax(scores)
        ctx = sum(w[r] * vc[r] for r in range(3))
        x2.append(x1[i] + ctx @ prm[f"{p}.ca.wo"])
    # feedforward and head
    expected = []
    for i in range(n):
        a3 = _oracle_ln(x2[i], prm[f"{p}.ln3.g"], prm[f"{p}.ln3.b"])
        h = np.maximum(a3 @ prm[f"{p}.ff.w1"] + prm[f"{p}.ff.b1"], 0.0)
        x3 = x2[i] + h @ prm[f"{p}.ff.w2"] + prm[f"{p}.ff.b2"]
        xf = _oracle_ln(x3, prm["final.ln.g"], prm["final.ln.b"])
        expected.append(xf @ prm["out.proj"])
    np.testing.assert_allclose(got, np.stack(expected), atol=1e-6)


def test_decode_batched_equals_single():
    rng = np.random.default_rng(9)
    cfg = _cfg(n_blocks=2)
    model = ToyCaptioner(cfg, seed=4)
    visual = rng.normal(size=(2, 4, 6))
    ids = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 7, 8, 9]])
    batched, _ = decode_forward(model.params, cfg, visual, ids)
    for b in range(2):
        single, _ = decode_forward(model.params, cfg, visual[b][None], ids[b][None])
        np.testing.assert_allclose(batched[b], single[0], atol=1e-12)
