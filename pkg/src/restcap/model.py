"""Trainable toy captioner: a frame encoder with a residual depthwise
temporal adapter feeding a small cross-attending autoregressive decoder.

Everything is plain numpy in float64 with hand-written backward passes
(verified against finite differences), an AdamW-style optimizer with a
cosine schedule, and deterministic beam-search generation. The adapter
kernel starts at zero, so the encoder is exactly the temporal-average
baseline at initialization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BOS_ID, EOS_ID, OOV_ID, PAD_ID, FrameFeatures, Vocabulary
from .errors import DataError, NumericError

LN_EPS = 1e-5
ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"RSTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    spatial_tokens: int
    d_model: int = 64
    n_blocks: int = 2
    d_ff: int = 0  # 0 -> 2 * d_model
    max_len: int = 64
    adapter_enabled: bool = True

    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff > 0 else 2 * self.d_model

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "spatial_tokens": self.spatial_tokens,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "adapter_enabled": self.adapter_enabled,
        }


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    d, v, ff = cfg.d_model, cfg.vocab_size, cfg.ff_dim()
    specs: list[tuple[str, tuple, str]] = [
        ("adapter.kernel", (3, cfg.feature_dim), "zeros"),
        ("encoder.proj", (cfg.feature_dim, d), "normal"),
        ("tok.emb", (v, d), "normal"),
        ("pos.emb", (cfg.max_len, d), "normal"),
    ]
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        for sub in ("sa", "ca"):
            for w in ("wq", "wk", "wv", "wo"):
                specs.append((f"{p}.{sub}.{w}", (d, d), "normal"))
        for ln in ("ln1", "ln2", "ln3"):
            specs.append((f"{p}.{ln}.g", (d,), "ones"))
            specs.append((f"{p}.{ln}.b", (d,), "zeros"))
        specs.append((f"{p}.ff.w1", (d, ff), "normal"))
        specs.append((f"{p}.ff.b1", (ff,), "zeros"))
        specs.append((f"{p}.ff.w2", (ff, d), "normal"))
        specs.append((f"{p}.ff.b2", (d,), "zeros"))
    specs.append(("final.ln.g", (d,), "ones"))
    specs.append(("final.ln.b", (d,), "zeros"))
    specs.append(("out.proj", (d, v), "normal"))
    return specs


class ToyCaptioner:
    """Parameter container plus convenience wrappers over the functional
    forward/backward passes below."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            self.params = {}
            for name, shape, kind in _param_specs(config):
                if kind == "zeros":
                    self.params[name] = np.zeros(shape)
                elif kind == "ones":
                    self.params[name] = np.ones(shape)
                else:
                    self.params[name] = rng.normal(0.0, 0.02, shape)

    def copy(self) -> "ToyCaptioner":
        return ToyCaptioner(self.config,
                            params={k: v.copy() for k, v in self.params.items()})

    def param_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# encoder

def temporal_adapter(z: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Residual 3-tap depthwise temporal filter with zero padding.

    z is (T, S, d); kernel is (3, d) with rows for offsets -1, 0, +1.
    Class tokens are not touched here; callers route only spatial tokens
    through the adapter.
    """
    z = np.asarray(z, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if z.ndim != 3 or kernel.shape != (3, z.shape[2]):
        raise ValueError(f"shape mismatch: z {z.shape}, kernel {kernel.shape}")
    conv = z * kernel[1]
    conv[1:] += z[:-1] * kernel[0]
    conv[:-1] += z[1:] * kernel[2]
    return z + conv


def _adapter_kernel_grad(z: np.ndarray, dconv: np.ndarray) -> np.ndarray:
    dk = np.empty((3, z.shape[2]))
    dk[0] = np.einsum("tsc,tsc->c", dconv[1:], z[:-1])
    dk[1] = np.einsum("tsc,tsc->c", dconv, z)
    dk[2] = np.einsum("tsc,tsc->c", dconv[:-1], z[1:])
    return dk


def encode_forward(params: dict, cfg: ModelConfig, features: FrameFeatures,
                   adapter_enabled: bool | None = None):
    """Adapter -> temporal average -> linear projection. Returns the
    (S+1, d_model) visual tokens (class token first) and a tape."""
    if adapter_enabled is None:
        adapter_enabled = cfg.adapter_enabled
    z = features.spatial
    if z.shape[1] != cfg.spatial_tokens or z.shape[2] != cfg.feature_dim:
        raise ValueError(f"feature shape {z.shape} does not match model config")
    z1 = temporal_adapter(z, params["adapter.kernel"]) if adapter_enabled else z
    sp_mean = z1.mean(axis=0)            # (S, d_feat)
    cls_mean = features.cls.mean(axis=0)  # (d_feat,)
    tokens0 = np.concatenate([cls_mean[None, :], sp_mean], axis=0)
    visual = tokens0 @ params["encoder.proj"]
    tape = {"z": z, "tokens0": tokens0, "adapter": adapter_enabled, "t": z.shape[0]}
    return visual, tape


def encode_video(features: FrameFeatures, model: ToyCaptioner,
                 adapter_enabled: bool | None = None) -> np.ndarray:
    visual, _ = encode_forward(model.params, model.config, features, adapter_enabled)
    return visual


def encode_backward(params: dict, tape: dict, dvisual: np.ndarray,
                    grads: dict) -> None:
    """Accumulate encoder gradients for one sample into ``grads``."""
    grads["encoder.proj"] += tape["tokens0"].T @ dvisual
    dtokens0 = dvisual @ params["encoder.proj"].T
    if tape["adapter"]:
        dz1 = np.broadcast_to(dtokens0[1:] / tape["t"],
                              (tape["t"],) + dtokens0[1:].shape)
        grads["adapter.kernel"] += _adapter_kernel_grad(tape["z"], dz1)


# ---------------------------------------------------------------------------
# decoder

def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)

def _layernorm_bwd(dy, tape, g):
    xhat, inv = tape
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db

def _softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)

def _softmax_bwd(dA, A):
    return A * (dA - (dA * A).sum(axis=-1, keepdims=True))

def _mat_grad(x, dy):
    """Gradient of Y = X @ W for batched X: (B,L,i),(B,L,o) -> (i,o)."""
    return np.tensordot(x, dy, axes=([0, 1], [0, 1]))


def decode_forward(params: dict, cfg: ModelConfig, visual: np.ndarray,
                   ids: np.ndarray):
    """Batched decoder forward.

    visual: (B, S+1, d_model); ids: (B, L) int. Returns logits (B, L, V)
    and the activation tape. Causal masking uses -inf scores, so future
    tokens have exactly zero attention weight.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be (B, L)")
    b, length = ids.shape
    if length > cfg.max_len:
        raise DataError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    d = cfg.d_model
    scale = 1.0 / math.sqrt(d)
    causal = np.tril(np.ones((length, length), dtype=bool))

    x = params["tok.emb"][ids] + params["pos.emb"][:length][None, :, :]
    tape: dict = {"ids": ids, "blocks": [], "visual": visual, "causal": causal}

    for i in range(cfg.n_blocks):
        p = f"block{i}"
        bt: dict = {}
        a1, bt["ln1"] = _layernorm_fwd(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = a1 @ params[f"{p}.sa.wq"]
        k = a1 @ params[f"{p}.sa.wk"]
        v = a1 @ params[f"{p}.sa.wv"]
        s = np.matmul(q, k.transpose(0, 2, 1)) * scale
        s = np.where(causal[None, :, :], s, -np.inf)
        att_w = _softmax(s)
        att = np.matmul(att_w, v)
        x = x + att @ params[f"{p}.sa.wo"]
        bt.update(a1=a1, q=q, k=k, v=v, att_w=att_w, att=att)

        a2, bt["ln2"] = _layernorm_fwd(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        qc = a2 @ params[f"{p}.ca.wq"]
        kc = visual @ params[f"{p}.ca.wk"]
        vc = visual @ params[f"{p}.ca.wv"]
        sc = np.matmul(qc, kc.transpose(0, 2, 1)) * scale
        attc_w = _softmax(sc)
        attc = np.matmul(attc_w, vc)
        x = x + attc @ params[f"{p}.ca.wo"]
        bt.update(a2=a2, qc=qc, kc=kc, vc=vc, attc_w=attc_w, attc=attc)

        a3, bt["ln3"] = _layernorm_fwd(x, params[f"{p}.ln3.g"], params[f"{p}.ln3.b"])
        h1 = a3 @ params[f"{p}.ff.w1"] + params[f"{p}.ff.b1"]
        relu = np.maximum(h1, 0.0)
        x = x + relu @ params[f"{p}.ff.w2"] + params[f"{p}.ff.b2"]
        bt.update(a3=a3, h1=h1, relu=relu)
        tape["blocks"].append(bt)

    xf, tape["lnf"] = _layernorm_fwd(x, params["final.ln.g"], params["final.ln.b"])
    tape["xf"] = xf
    logits = xf @ params["out.proj"]
    return logits, tape


def decode_backward(params: dict, cfg: ModelConfig, tape: dict,
                    dlogits: np.ndarray, grads: dict) -> np.ndarray:
    """Backward through the decoder; accumulates parameter grads into
    ``grads`` and returns d(visual tokens) of shape (B, S+1, d_model)."""
    d = cfg.d_model
    scale = 1.0 / math.sqrt(d)
    visual = tape["visual"]

    grads["out.proj"] += _mat_grad(tape["xf"], dlogits)
    dxf = dlogits @ params["out.proj"].T
    dx, dg, db = _layernorm_bwd(dxf, tape["lnf"], params["final.ln.g"])
    grads["final.ln.g"] += dg
    grads["final.ln.b"] += db
    dvisual = np.zeros_like(visual)

    for i in reversed(range(cfg.n_blocks)):
        p = f"block{i}"
        bt = tape["blocks"][i]

        # feedforward sublayer
        dff = dx
        grads[f"{p}.ff.b2"] += dff.reshape(-1, d).sum(axis=0)
        grads[f"{p}.ff.w2"] += _mat_grad(bt["relu"], dff)
        drelu = dff @ params[f"{p}.ff.w2"].T
        dh1 = drelu * (bt["h1"] > 0.0)
        grads[f"{p}.ff.b1"] += dh1.reshape(-1, dh1.shape[-1]).sum(axis=0)
        grads[f"{p}.ff.w1"] += _mat_grad(bt["a3"], dh1)
        da3 = dh1 @ params[f"{p}.ff.w1"].T
        dx_ln, dg, db = _layernorm_bwd(da3, bt["ln3"], params[f"{p}.ln3.g"])
        grads[f"{p}.ln3.g"] += dg
        grads[f"{p}.ln3.b"] += db
        dx = dx + dx_ln

        # cross-attention sublayer
        dca = dx
        grads[f"{p}.ca.wo"] += _mat_grad(bt["attc"], dca)
        dattc = dca @ params[f"{p}.ca.wo"].T
        dAc = np.matmul(dattc, bt["vc"].transpose(0, 2, 1))
        dvc = np.matmul(bt["attc_w"].transpose(0, 2, 1), dattc)
        dSc = _softmax_bwd(dAc, bt["attc_w"]) * scale
        dqc = np.matmul(dSc, bt["kc"])
        dkc = np.matmul(dSc.transpose(0, 2, 1), bt["qc"])
        grads[f"{p}.ca.wq"] += _mat_grad(bt["a2"], dqc)
        grads[f"{p}.ca.wk"] += _mat_grad(visual, dkc)
        grads[f"{p}.ca.wv"] += _mat_grad(visual, dvc)
        dvisual += dkc @ params[f"{p}.ca.wk"].T + dvc @ params[f"{p}.ca.wv"].T
        da2 = dqc @ params[f"{p}.ca.wq"].T
        dx_ln, dg, db = _layernorm_bwd(da2, bt["ln2"], params[f"{p}.ln2.g"])
        grads[f"{p}.ln2.g"] += dg
        grads[f"{p}.ln2.b"] += db
        dx = dx + dx_ln

        # causal self-attention sublayer
        dsa = dx
        grads[f"{p}.sa.wo"] += _mat_grad(bt["att"], dsa)
        datt = dsa @ params[f"{p}.sa.wo"].T
        dA = np.matmul(datt, bt["v"].transpose(0, 2, 1))
        dv = np.matmul(bt["att_w"].transpose(0, 2, 1), datt)
        dS = _softmax_bwd(dA, bt["att_w"]) * scale
        dq = np.matmul(dS, bt["k"])
        dk = np.matmul(dS.transpose(0, 2, 1), bt["q"])
        grads[f"{p}.sa.wq"] += _mat_grad(bt["a1"], dq)
        grads[f"{p}.sa.wk"] += _mat_grad(bt["a1"], dk)
        grads[f"{p}.sa.wv"] += _mat_grad(bt["a1"], dv)
        da1 = dq @ params[f"{p}.sa.wq"].T + dk @ params[f"{p}.sa.wk"].T \
            + dv @ params[f"{p}.sa.wv"].T
        dx_ln, dg, db = _layernorm_bwd(da1, bt["ln1"], params[f"{p}.ln1.g"])
        grads[f"{p}.ln1.g"] += dg
        grads[f"{p}.ln1.b"] += db
        dx = dx + dx_ln

    ids = tape["ids"]
    np.add.at(grads["tok.emb"], ids.reshape(-1), dx.reshape(-1, d))
    grads["pos.emb"][:ids.shape[1]] += dx.sum(axis=0)
    return dvisual


def decode_logits(visual: np.ndarray, token_ids, model: ToyCaptioner) -> np.ndarray:
    """Single-sequence decoder logits; the sequence must start with BOS."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] == 0 or ids[0] != BOS_ID:
        raise DataError("token sequence must be 1-d and begin with BOS")
    logits, _ = decode_forward(model.params, model.config, visual[None, :, :],
                               ids[None, :])
    return logits[0]


# ---------------------------------------------------------------------------
# language-modeling loss

def smoothed_ce(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                smoothing: float):
    """Label-smoothed cross-entropy summed over masked positions.

    logits: (..., V); targets int (...,); mask float (...,) selecting the
    positions that count. Returns (loss, dlogits) where dlogits is the
    gradient of the summed loss.
    """
    v = logits.shape[-1]
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    uniform = -logp.mean(axis=-1)
    per_pos = (1.0 - smoothing) * nll + smoothing * uniform
    loss = float((per_pos * mask).sum())

    p = np.exp(logp)
    q = np.full_like(p, smoothing / v)
    np.put_along_axis(
        q, targets[..., None],
        np.take_along_axis(q, targets[..., None], axis=-1) + (1.0 - smoothing),
        axis=-1,
    )
    dlogits = (p - q) * mask[..., None]
    return loss, dlogits


def lm_loss(logits: np.ndarray, y_ids, prompt_len: int, smoothing: float = 0.0):
    """Loss over the caption span of one sequence.

    y_ids = [BOS, prompt (P), caption (M), EOS]; logits row i predicts
    y_ids[i+1]. Only the M+1 positions predicting caption tokens and the
    EOS contribute; BOS and prompt predictions are masked out. Returns
    (loss, dlogits).
    """
    y = np.asarray(y_ids, dtype=np.int64)
    n = y.shape[0]
    if n < prompt_len + 2:
        raise DataError("sequence too short for the stated prompt length")
    if logits.shape[0] < n:
        raise DataError(f"logits cover {logits.shape[0]} positions, need {n}")
    targets = np.zeros(logits.shape[0], dtype=np.int64)
    targets[: n - 1] = y[1:]
    mask = np.zeros(logits.shape[0])
    mask[prompt_len: n - 1] = 1.0  # predicts y[P+1] .. y[P+M+1] == caption + EOS
    return smoothed_ce(logits, targets, mask, smoothing)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ToyCaptioner) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
        )


def adamw_update(params: dict, grads: dict, opt: OptimizerState, lr: float,
                 betas=(0.9, 0.98), weight_decay: float = 0.001) -> None:
    """One decoupled-weight-decay adaptive-moment step over all tensors."""
    b1, b2 = betas
    opt.step += 1
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        mhat = opt.m[name] / bc1
        vhat = opt.v[name] / bc2
        p -= lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + weight_decay * p)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr_init
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# training step

def batch_forward_backward(model: ToyCaptioner, batch, prompt_ids,
                           smoothing: float):
    """Shared forward/backward over a batch of (FrameFeatures, caption ids).

    Sequences are right-padded with PAD; pads and prompt positions carry
    zero loss. Returns (mean loss over the batch, grads dict).
    """
    cfg = model.config
    p_len = len(prompt_ids)
    seqs = []
    for _feat, cap_ids in batch:
        seqs.append([BOS_ID] + list(prompt_ids) + list(cap_ids) + [EOS_ID])
    max_n = max(len(s) for s in seqs)
    if max_n > cfg.max_len:
        raise DataError(f"batch sequence length {max_n} exceeds max_len {cfg.max_len}")
    bsz = len(batch)
    ids = np.full((bsz, max_n), PAD_ID, dtype=np.int64)
    targets = np.zeros((bsz, max_n), dtype=np.int64)
    mask = np.zeros((bsz, max_n))
    for r, s in enumerate(seqs):
        n = len(s)
        ids[r, :n] = s
        targets[r, : n - 1] = s[1:]
        mask[r, p_len: n - 1] = 1.0

    visuals = np.empty((bsz, cfg.spatial_tokens + 1, cfg.d_model))
    enc_tapes = []
    for r, (feat, _cap) in enumerate(batch):
        visuals[r], tape = encode_forward(model.params, cfg, feat)
        enc_tapes.append(tape)

    logits, dec_tape = decode_forward(model.params, cfg, visuals, ids)
    loss_sum, dlogits = smoothed_ce(logits, targets, mask, smoothing)
    loss = loss_sum / bsz
    dlogits /= bsz

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    dvisual = decode_backward(model.params, cfg, dec_tape, dlogits, grads)
    for r in range(bsz):
        encode_backward(model.params, enc_tapes[r], dvisual[r], grads)
    return loss, grads


def train_step(batch, model: ToyCaptioner, opt: OptimizerState, *,
               prompt_ids, lr: float, smoothing: float = 0.2,
               betas=(0.9, 0.98), weight_decay: float = 0.001) -> float:
    """One optimizer step on a batch; returns the mean loss.

    Aborts with NumericError (carrying parameter norms) if the loss is
    not finite.
    """
    loss, grads = batch_forward_backward(model, batch, prompt_ids, smoothing)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss {loss}; parameter norms: {model.param_norms()}"
        )
    adamw_update(model.params, grads, opt, lr, betas=betas,
                 weight_decay=weight_decay)
    return loss


def finetune_supervised(model: ToyCaptioner, labeled, *, prompt_ids,
                        epochs: int, batch_size: int, lr_init: float,
                        lr_min: float, seed: int, smoothing: float = 0.2,
                        betas=(0.9, 0.98), weight_decay: float = 0.001,
                        opt: OptimizerState | None = None) -> ToyCaptioner:
    """Supervised training loop with fixed target captions per sample.

    ``labeled`` is a list of (FrameFeatures, caption token ids); class
    names tokenized upstream. Zero epochs returns the model untouched.
    """
    if epochs <= 0:
        return model
    if opt is None:
        opt = OptimizerState.for_model(model)
    rng = np.random.default_rng(seed)
    steps_per_epoch = max(1, math.ceil(len(labeled) / batch_size))
    total_steps = epochs * steps_per_epoch
    for _epoch in range(epochs):
        order = rng.permutation(len(labeled))
        for start in range(0, len(labeled), batch_size):
            chunk = [labeled[i] for i in order[start:start + batch_size]]
            lr = cosine_lr(opt.step, total_steps, lr_init, lr_min)
            train_step(chunk, model, opt, prompt_ids=prompt_ids, lr=lr,
                       smoothing=smoothing, betas=betas,
                       weight_decay=weight_decay)
    return model


# ---------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_ids: tuple[int, ...]  # generated tokens, prompt stripped, no EOS
    score: float                # mean log-probability per generated token
    reached_eos: bool


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

_BANNED_GEN_IDS = (BOS_ID, PAD_ID, OOV_ID)


def _beam_search(model: ToyCaptioner, visual: np.ndarray, prompt_ids,
                 width: int, max_new: int):
    """Deterministic beam search; returns (finished, live) candidate
    lists of (ids_tuple, logp_sum, n_generated) sorted best-first by
    mean log-probability, ties by token ids."""
    cfg = model.config
    seq0 = tuple([BOS_ID] + list(prompt_ids))
    max_new = min(max_new, cfg.max_len - len(seq0))
    if max_new <= 0:
        raise DataError("prompt leaves no room for generation under max_len")

    def mean_score(lsum, n):
        return lsum / max(n, 1)

    live = [(seq0, 0.0, 0)]
    finished: list[tuple[tuple[int, ...], float, int]] = []
    for _step in range(max_new):
        if not live:
            break
        ids = np.array([c[0] for c in live], dtype=np.int64)
        vis = np.broadcast_to(visual, (len(live),) + visual.shape)
        logits, _ = decode_forward(model.params, cfg, vis, ids)
        logp = _log_softmax(logits[:, -1, :])
        candidates = []
        for row, (seq, lsum, n) in enumerate(live):
            for tok in range(cfg.vocab_size):
                if tok in _BANNED_GEN_IDS:
                    continue
                cand = (seq + (tok,), lsum + float(logp[row, tok]), n + 1)
                candidates.append(cand)
        candidates.sort(key=lambda c: (-mean_score(c[1], c[2]), c[0]))
        # only the top `width` candidates survive; EOS ones retire to the
        # finished pool and give up their beam slot
        new_live = []
        for cand in candidates[:width]:
            if cand[0][-1] == EOS_ID:
                finished.append(cand)
            else:
                new_live.append(cand)
        live = new_live
    finished.sort(key=lambda c: (-mean_score(c[1], c[2]), c[0]))
    live.sort(key=lambda c: (-mean_score(c[1], c[2]), c[0]))
    return finished[:width], live


def generate(visual: np.ndarray, model: ToyCaptioner, prompt: str,
             vocab: Vocabulary, beam: int = 3, max_len: int = 24) -> GenerationResult:
    """Beam-search caption generation seeded with [BOS, prompt].

    The full ranking key is (reached EOS, mean log-probability per
    generated token, EOS included): any completed sequence outranks any
    partial one, so a partial comes back (with reached_eos False) only
    when nothing terminates within the length budget. The single-path
    greedy rollout is always kept as a candidate, so a wider beam can
    never return a worse-ranked sequence than greedy.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    prompt_ids = vocab.encode(prompt)
    finished, live = _beam_search(model, visual, prompt_ids, beam, max_len)
    if beam > 1:
        g_fin, g_live = _beam_search(model, visual, prompt_ids, 1, max_len)
        finished = sorted(finished + g_fin, key=lambda c: (-c[1] / max(c[2], 1), c[0]))
        live = sorted(live + g_live, key=lambda c: (-c[1] / max(c[2], 1), c[0]))

    pool = finished if finished else live
    seq, lsum, n = pool[0]
    gen = seq[len(prompt_ids) + 1:]
    reached = bool(gen and gen[-1] == EOS_ID)
    if reached:
        gen = gen[:-1]
    return GenerationResult(
        text=vocab.decode(gen),
        token_ids=tuple(gen),
        score=lsum / max(n, 1),
        reached_eos=reached,
    )


def sequence_caption_logprob(model: ToyCaptioner, visual: np.ndarray,
                             prompt_ids, caption_ids) -> float:
    """Mean log-probability of caption tokens plus EOS given the prompt.

    Used by likelihood probes that score a fixed set of candidate
    captions against a video.
    """
    y = [BOS_ID] + list(prompt_ids) + list(caption_ids) + [EOS_ID]
    logits = decode_logits(visual, y, model)
    logp = _log_softmax(logits)
    p = len(prompt_ids)
    total = 0.0
    for i in range(p, len(y) - 1):
        total += float(logp[i, y[i + 1]])
    return total / (len(caption_ids) + 1)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ToyCaptioner, path, round_no: int = 0,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, then named float32 tensors.
    A JSON sidecar carries the model config and round number."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    sidecar = {"config": model.config.to_dict(), "round": round_no}
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ToyCaptioner, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise DataError(f"checkpoint or sidecar missing at {path}")
    sidecar = json.loads(sidecar_path.read_text())
    cfg = ModelConfig(**sidecar["config"])
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic in {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_items = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * n_items)
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    expected = {name for name, _shape, _kind in _param_specs(cfg)}
    if set(params) != expected:
        raise DataError("checkpoint tensors do not match the model config")
    return ToyCaptioner(cfg, params=params), sidecar
