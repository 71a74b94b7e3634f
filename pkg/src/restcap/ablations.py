"""Reusable experiment routines behind the ablation CLI and the
acceptance suite: config sweeps over K/H/retrieval rounds, the
order-pair temporal-adapter probe, and the pseudo-caption-vs-class-label
supervision comparison.

All routines run on a synthetic world and share one seed per sweep, so
rows differ only along the swept axis.
"""

from __future__ import annotations

import numpy as np

from .core import Vocabulary
from .errors import ConfigError
from .evaluation import (
    ClassEmbeddingTable,
    classify_by_likelihood,
    content_word_fraction,
    evaluate_topk,
    generalized_eval,
    generate_predictions,
)
from .loop import RestConfig, RestState, run_rest
from .model import ModelConfig, ToyCaptioner, finetune_supervised
from .synthworld import World


def run_on_world(world: World, config: RestConfig, run_dir=None) -> RestState:
    return run_rest(world.manifest, world.text_encoder, world.captioner,
                    config, run_dir=run_dir)


def eval_state(state: RestState, world: World, protocol: str = "standard",
               ks=(1, 5)):
    """Generate captions with the trained model and score them.

    standard: all labeled videos against the full class table.
    generalized: unseen-class videos against the seen+unseen union.
    """
    labels = world.labels()
    preds = generate_predictions(
        state.model, world.manifest, state.vocab, state.config.prompt,
        state.config.beam, state.config.gen_max_new)
    if protocol == "standard":
        table = ClassEmbeddingTable.build(world.class_names, world.text_encoder)
        return evaluate_topk(preds, labels, table, world.text_encoder, ks=ks), preds
    if protocol == "generalized":
        report = generalized_eval(preds, labels, world.seen_classes,
                                  world.unseen_classes, world.text_encoder, ks=ks)
        return report, preds
    raise ConfigError(f"unknown protocol: {protocol}")


def init_caption_accuracy(world: World, init_captions: dict[str, list[str]]) -> float:
    """Caption-level accuracy of the raw initial per-frame captions: the
    pre-training baseline every run should beat."""
    table = ClassEmbeddingTable.build(world.class_names, world.text_encoder)
    from .evaluation import clip_tam_classify

    hits, total = 0, 0
    for vid, captions in init_captions.items():
        truth = world.video_classes[vid]
        for text in captions:
            ranked = clip_tam_classify(text, table, world.text_encoder)
            hits += bool(ranked) and ranked[0][0] == truth
            total += 1
    return hits / max(total, 1)


def sweep(world: World, base: RestConfig, axis: str, values) -> list[dict]:
    """Run one REST training per value of K, H, or retrieval-round count
    (fixed total epochs) and report final top-1 accuracy."""
    rows = []
    for value in values:
        if axis == "K":
            cfg = base.with_overrides({"k": int(value)})
        elif axis == "H":
            cfg = base.with_overrides({"h": int(value)})
        elif axis == "rounds":
            n_rounds = int(value)
            if n_rounds < 1 or base.total_epochs % n_rounds:
                raise ConfigError(
                    f"total_epochs={base.total_epochs} not divisible into {n_rounds} rounds")
            cfg = base.with_overrides({"r": base.total_epochs // n_rounds})
        else:
            raise ConfigError(f"unknown sweep axis: {axis}")
        state = run_on_world(world, cfg)
        report, _ = eval_state(state, world, "standard")
        rows.append({
            "axis": axis,
            "value": value,
            "top1": report.accuracy(1),
            "top5": report.accuracy(5),
            "rounds": state.round_no,
            "mean_relevance": state.metrics[-1].get("mean_relevance")
            if state.metrics and "mean_relevance" in state.metrics[-1] else None,
        })
    return rows


def adapter_probe(world: World, seed: int = 0, epochs: int = 60,
                  lr_init: float = 3e-3, lr_min: float = 3e-4,
                  train_frac: float = 0.7, prompt: str = "a video of",
                  d_model: int = 64, n_blocks: int = 2) -> dict:
    """Supervised probe on the order-pair classes.

    Train one model with the temporal adapter and one without on a
    class-name objective over a train split of the pair videos, then
    classify held-out pair videos by name likelihood. Without the
    adapter the two classes have identical time-averaged features, so
    accuracy is pinned to chance.
    """
    if not world.order_pairs:
        raise ConfigError("world has no order-pair classes")
    a, b = world.order_pairs[0]
    pair_names = [world.class_names[a], world.class_names[b]]
    videos = [vid for vid, c in world.video_classes.items() if c in pair_names]
    rng = np.random.default_rng(seed)
    train_ids, eval_ids = [], []
    for name in pair_names:
        members = sorted(v for v in videos if world.video_classes[v] == name)
        members = [members[i] for i in rng.permutation(len(members))]
        cut = max(1, int(round(train_frac * len(members))))
        train_ids.extend(members[:cut])
        eval_ids.extend(members[cut:])

    vocab = Vocabulary.from_texts(pair_names + [prompt])
    prompt_ids = vocab.encode(prompt)
    labeled = [
        (world.manifest.get(v).features, vocab.encode(world.video_classes[v]))
        for v in sorted(train_ids)
    ]

    result = {}
    for adapter_on in (True, False):
        cfg = ModelConfig(
            vocab_size=len(vocab), feature_dim=world.manifest.feature_dim,
            spatial_tokens=world.manifest.spatial_tokens, d_model=d_model,
            n_blocks=n_blocks, adapter_enabled=adapter_on)
        model = ToyCaptioner(cfg, seed=seed)
        finetune_supervised(model, labeled, prompt_ids=prompt_ids, epochs=epochs,
                            batch_size=16, lr_init=lr_init, lr_min=lr_min,
                            seed=seed)
        hits = 0
        for v in sorted(eval_ids):
            pred = classify_by_likelihood(model, world.manifest.get(v).features,
                                          pair_names, vocab, prompt)
            hits += pred == world.video_classes[v]
        key = "adapter_on" if adapter_on else "adapter_off"
        result[key] = hits / max(len(eval_ids), 1)
    result["n_eval"] = len(eval_ids)
    return result


def label_finetuned_model(world: World, config: RestConfig,
                          vocab: Vocabulary, epochs: int | None = None,
                          ) -> ToyCaptioner:
    """Baseline trained directly on class names of the seen classes (no
    pseudo-captions). Shares the vocabulary with the caption-trained
    model so vocabulary collapse is a learned behavior, not a
    constraint."""
    seen = set(world.seen_classes)
    labeled = [
        (rec.features, vocab.encode(rec.label))
        for rec in world.manifest.records
        if rec.label in seen
    ]
    cfg = ModelConfig(
        vocab_size=len(vocab), feature_dim=world.manifest.feature_dim,
        spatial_tokens=world.manifest.spatial_tokens, d_model=config.d_model,
        n_blocks=config.n_blocks, d_ff=config.d_ff, max_len=config.max_len,
        adapter_enabled=config.adapter_enabled)
    model = ToyCaptioner(cfg, seed=config.seed)
    finetune_supervised(
        model, labeled, prompt_ids=vocab.encode(config.prompt),
        epochs=config.total_epochs if epochs is None else epochs,
        batch_size=config.batch_size, lr_init=config.lr_init,
        lr_min=config.lr_min, seed=config.seed,
        smoothing=config.label_smoothing,
        weight_decay=config.weight_decay)
    return model


def supervision_compare(world: World, config: RestConfig,
                        rest_state: RestState | None = None) -> dict:
    """Pseudo-caption training vs direct class-label training, compared
    on generalized unseen-class accuracy plus a vocabulary audit of the
    label model's captions on unseen videos."""
    if rest_state is None:
        rest_state = run_on_world(world, config)
    rest_report, rest_preds = eval_state(rest_state, world, "generalized")

    label_model = label_finetuned_model(world, config, rest_state.vocab)
    unseen_ids = sorted(v for v, c in world.video_classes.items()
                        if c in set(world.unseen_classes))
    label_preds = generate_predictions(
        label_model, world.manifest, rest_state.vocab, config.prompt,
        config.beam, config.gen_max_new, video_ids=unseen_ids)
    label_report = generalized_eval(label_preds, world.labels(),
                                    world.seen_classes, world.unseen_classes,
                                    world.text_encoder)
    seen_fraction = content_word_fraction(
        [label_preds[v] for v in unseen_ids], world.class_word_lists(),
        world.seen_classes)
    rest_seen_fraction = content_word_fraction(
        [rest_preds[v] for v in unseen_ids if v in rest_preds],
        world.class_word_lists(), world.seen_classes)
    return {
        "rest_unseen_top1": rest_report.accuracy(1),
        "label_unseen_top1": label_report.accuracy(1),
        "label_seen_word_fraction": seen_fraction,
        "rest_seen_word_fraction": rest_seen_fraction,
        "n_unseen_videos": len(unseen_ids),
    }


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = list(rows[0].keys())
    widths = {c: max(len(str(c)), *(len(_fmt(r.get(c))) for r in rows)) for c in cols}
    header = "  ".join(str(c).ljust(widths[c]) for c in cols)
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
