"""Training orchestrator: initialization of pseudo-caption caches from a
frame captioner, alternating R-epoch training phases and retrieval
rounds, per-round snapshots and checkpoints.

Video embeddings and the video-video neighbor index are computed once at
startup and frozen for the whole run; only text embeddings of newly
generated captions are computed later (through the memoizing cache).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .caption_cache import (
    CaptionCache,
    append_generated,
    cache_stats,
    init_caches,
    refresh_all,
    save_caches,
)
from .core import DatasetManifest, Vocabulary, aggregate_video_embedding
from .errors import ConfigError, NumericError
from .model import (
    ModelConfig,
    OptimizerState,
    ToyCaptioner,
    cosine_lr,
    encode_video,
    generate,
    save_checkpoint,
    train_step,
)
from .similarity import NeighborIndex, TextEmbeddingCache, build_neighbor_index
from .synthworld import INIT_PROMPTS


@dataclass
class RestConfig:
    """Hyper-parameters of the retrieve-and-self-train loop.

    Defaults follow the reference recipe at full scale (large H, long
    schedule); ``synthetic()`` is the desk-scale preset every test uses.
    """

    k: int = 3                  # cached pseudo-captions per video
    h: int = 2000               # retrieved neighbors (self included)
    r: int = 10                 # epochs between retrieval rounds
    total_epochs: int = 60
    beam: int = 3
    seed: int = 0
    batch_size: int = 64
    lr_init: float = 2e-5
    lr_min: float = 2e-8
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.98
    label_smoothing: float = 0.2
    adapter_enabled: bool = True
    d_model: int = 64
    n_blocks: int = 2
    d_ff: int = 0
    max_len: int = 64
    gen_max_new: int = 16
    prompt: str = "a video of"
    init_prompts: tuple[str, ...] = INIT_PROMPTS

    def validate(self) -> None:
        if self.k < 1 or self.h < 1 or self.r < 1:
            raise ConfigError("K, H and R must all be >= 1")
        if self.total_epochs < self.r:
            raise ConfigError("total_epochs must be >= R")
        if self.beam < 1:
            raise ConfigError("beam width must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def synthetic(cls, **overrides) -> "RestConfig":
        base = dict(
            k=3, h=20, r=4, total_epochs=12, beam=3, seed=0, batch_size=16,
            lr_init=3e-3, lr_min=3e-4, weight_decay=0.001,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["init_prompts"] = list(self.init_prompts)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RestConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "init_prompts" in doc:
            doc["init_prompts"] = tuple(doc["init_prompts"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: dict) -> "RestConfig":
        doc = self.to_dict()
        known = set(doc)
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            doc[key] = value
        return RestConfig.from_dict(doc)


@dataclass
class RestState:
    config: RestConfig
    manifest: DatasetManifest
    vocab: Vocabulary
    model: ToyCaptioner
    opt: OptimizerState
    caches: CaptionCache
    index: NeighborIndex
    text_cache: TextEmbeddingCache
    video_embeddings: dict[str, np.ndarray]
    init_captions: dict[str, list[str]]
    epoch: int = 0
    round_no: int = 0
    total_steps: int = 0
    metrics: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    run_dir: Path | None = None

    def log(self, record: dict) -> None:
        self.metrics.append(record)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _select_initial_captions(manifest, caption_provider, prompts, text_cache):
    """Per frame, query every manual prompt and keep the output scoring
    highest against that frame's own embedding (first prompt wins ties)."""
    from .caption_norm import normalize_caption
    from .similarity import video_text_similarity

    per_frame: dict[str, list[str]] = {}
    all_candidates: list[str] = []
    for rec in manifest.records:
        winners = []
        for t in range(rec.frame_count):
            best_text, best_score = None, -np.inf
            for prompt in prompts:
                text = normalize_caption(caption_provider(rec.video_id, t, prompt))
                if not text:
                    continue
                all_candidates.append(text)
                score = video_text_similarity(
                    rec.frame_embeddings[t], text_cache.embed(text)
                )
                if score > best_score:
                    best_text, best_score = text, score
            if best_text is not None:
                winners.append(best_text)
        per_frame[rec.video_id] = winners
    return per_frame, all_candidates


def setup_state(manifest: DatasetManifest, text_provider, caption_provider,
                config: RestConfig, run_dir=None) -> RestState:
    """Lines 1-4 of the training recipe: initial captions, frozen video
    embeddings, the neighbor index, and the first cache refresh."""
    config.validate()
    run_path = None
    if run_dir is not None:
        run_path = Path(run_dir)
        (run_path / "caches").mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True))
        (run_path / "metrics.jsonl").write_text("")

    text_cache = TextEmbeddingCache(text_provider)

    video_embeddings = {
        rec.video_id: aggregate_video_embedding(rec.frame_embeddings)
        for rec in manifest.records
    }
    emb_matrix = np.stack([video_embeddings[v] for v in manifest.video_ids()])
    index = build_neighbor_index(emb_matrix, manifest.video_ids(), config.h)

    per_frame, candidates = _select_initial_captions(
        manifest, caption_provider, config.init_prompts, text_cache)

    vocab_texts = list(candidates) + list(config.init_prompts) + [config.prompt]
    vocab = Vocabulary.from_texts(vocab_texts)

    caches = init_caches(per_frame, index, config.k, video_embeddings, text_cache)

    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        feature_dim=manifest.feature_dim,
        spatial_tokens=manifest.spatial_tokens,
        d_model=config.d_model,
        n_blocks=config.n_blocks,
        d_ff=config.d_ff,
        max_len=config.max_len,
        adapter_enabled=config.adapter_enabled,
    )
    model = ToyCaptioner(model_cfg, seed=config.seed)
    opt = OptimizerState.for_model(model)

    n = len(manifest)
    total_steps = config.total_epochs * max(1, math.ceil(n / config.batch_size))

    state = RestState(
        config=config, manifest=manifest, vocab=vocab, model=model, opt=opt,
        caches=caches, index=index, text_cache=text_cache,
        video_embeddings=video_embeddings, init_captions=per_frame,
        total_steps=total_steps, run_dir=run_path,
        counters={"video_embedding_passes": 1, "index_builds": 1,
                  "generation_no_eos": 0},
    )
    state.log({"type": "round", "round": 0, **cache_stats(caches)})
    if run_path is not None:
        with open(run_path / "init_captions.jsonl", "w") as fh:
            for vid in manifest.video_ids():
                fh.write(json.dumps({"id": vid, "captions": per_frame[vid]}) + "\n")
        save_caches(caches, run_path / "caches" / "round_0.jsonl")
    return state


def sample_cached_caption(entries, rng: np.random.Generator):
    """Uniform draw from a video's cached captions."""
    return entries[int(rng.integers(len(entries)))]


def train_phase(state: RestState, n_epochs: int) -> RestState:
    """Train for n_epochs; one uniformly sampled cached caption per video
    per epoch, seeded shuffle, caches strictly read-only."""
    if n_epochs <= 0:
        return state
    cfg = state.config
    manifest = state.manifest
    rng = np.random.default_rng((cfg.seed, state.epoch, 7919))
    mutations_before = state.caches.mutations
    ids = manifest.video_ids()
    prompt_ids = state.vocab.encode(cfg.prompt)

    for _ in range(n_epochs):
        order = rng.permutation(len(ids))
        losses = []
        for start in range(0, len(ids), cfg.batch_size):
            batch = []
            for j in order[start:start + cfg.batch_size]:
                vid = ids[j]
                pick = sample_cached_caption(state.caches.get(vid), rng)
                batch.append((manifest.get(vid).features,
                              state.vocab.encode(pick.text)))
            lr = cosine_lr(state.opt.step, state.total_steps, cfg.lr_init, cfg.lr_min)
            try:
                loss = train_step(
                    batch, state.model, state.opt, prompt_ids=prompt_ids, lr=lr,
                    smoothing=cfg.label_smoothing, betas=(cfg.beta1, cfg.beta2),
                    weight_decay=cfg.weight_decay)
            except NumericError:
                if state.run_dir is not None:
                    save_checkpoint(state.model, state.run_dir / "checkpoints" / "abort.bin",
                                    round_no=state.round_no,
                                    extra={"vocab": state.vocab.words(),
                                           "epoch": state.epoch, "aborted": True})
                raise
            losses.append(loss)
        state.epoch += 1
        state.log({"type": "epoch", "epoch": state.epoch,
                   "loss": float(np.mean(losses))})

    if state.caches.mutations != mutations_before:
        raise RuntimeError("caption caches mutated during a training phase")
    return state


def retrieval_round(state: RestState) -> RestState:
    """Generate one caption per video with the current model, append it,
    embed only unseen texts, then refresh every cache against the frozen
    neighbor index."""
    cfg = state.config
    manifest = state.manifest
    next_round = state.round_no + 1

    generated: dict[str, str] = {}
    no_eos = 0
    for rec in manifest.records:
        visual = encode_video(rec.features, state.model)
        result = generate(visual, state.model, cfg.prompt, state.vocab,
                          beam=cfg.beam, max_len=cfg.gen_max_new)
        generated[rec.video_id] = result.text
        if not result.reached_eos:
            no_eos += 1
    state.counters["generation_no_eos"] += no_eos

    for vid in manifest.video_ids():
        append_generated(state.caches, vid, generated[vid], state.text_cache,
                         state.video_embeddings[vid], next_round)
    refresh_all(state.caches, state.index, cfg.k, state.video_embeddings, next_round)

    state.round_no = next_round
    state.log({"type": "round", "round": next_round, "no_eos": no_eos,
               **cache_stats(state.caches)})
    if state.run_dir is not None:
        save_caches(state.caches, state.run_dir / "caches" / f"round_{next_round}.jsonl")
        save_checkpoint(state.model,
                        state.run_dir / "checkpoints" / f"round_{next_round}.bin",
                        round_no=next_round,
                        extra={"vocab": state.vocab.words(), "epoch": state.epoch})
    return state


def run_rest(manifest: DatasetManifest, text_provider, caption_provider,
             config: RestConfig, run_dir=None) -> RestState:
    """Full loop: init, then alternate R-epoch phases with retrieval
    rounds; a final partial phase (total_epochs % R) trains without a
    trailing round, so completed rounds == floor(total_epochs / R)."""
    state = setup_state(manifest, text_provider, caption_provider, config,
                        run_dir=run_dir)
    full_rounds, remainder = divmod(config.total_epochs, config.r)
    for _ in range(full_rounds):
        train_phase(state, config.r)
        retrieval_round(state)
    if remainder:
        train_phase(state, remainder)
    if state.run_dir is not None:
        save_checkpoint(state.model, state.run_dir / "checkpoints" / "final.bin",
                        round_no=state.round_no,
                        extra={"vocab": state.vocab.words(), "epoch": state.epoch})
    return state
