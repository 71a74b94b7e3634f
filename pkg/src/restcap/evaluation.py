"""Caption-to-class evaluation: the text-accuracy metric (nearest class
embedding by dot product), top-k reports over splits, and the
generalized protocol where unseen-class videos compete against the
union of seen and unseen class names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Vocabulary, normalize_text
from .errors import DataError
from .model import ToyCaptioner, encode_video, generate, sequence_caption_logprob

ABSTAIN = "<abstain>"


@dataclass
class ClassEmbeddingTable:
    names: list[str]
    matrix: np.ndarray  # (C, d) unit rows

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate class names in embedding table")
        if self.matrix.shape[0] != len(self.names):
            raise DataError("class table rows do not match names")

    @classmethod
    def build(cls, names, embed_fn) -> "ClassEmbeddingTable":
        names = [str(n) for n in names]
        matrix = np.stack([np.asarray(embed_fn(n), dtype=np.float64) for n in names])
        return cls(names=names, matrix=matrix)


def clip_tam_classify(caption: str, table: ClassEmbeddingTable,
                      embed_fn) -> list[tuple[str, float]]:
    """Rank classes by dot product with the caption embedding.

    Ties break by class index. An empty caption abstains (empty ranking,
    counted as wrong by the accuracy aggregators).
    """
    if not normalize_text(caption):
        return []
    t = np.asarray(embed_fn(caption), dtype=np.float64)
    scores = table.matrix @ t
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [(table.names[i], float(scores[i])) for i in order]


@dataclass
class EvalReport:
    topk: dict[int, dict]                 # k -> {"mean", "std", "per_split"}
    per_video: dict[str, dict] = field(default_factory=dict)
    n_videos: int = 0

    def accuracy(self, k: int = 1) -> float:
        return self.topk[k]["mean"]

    def to_dict(self) -> dict:
        return {
            "n_videos": self.n_videos,
            "topk": {str(k): v for k, v in self.topk.items()},
            "per_video": self.per_video,
        }

    def to_json(self, path) -> None:
        from pathlib import Path
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def summary_text(self) -> str:
        lines = [f"videos evaluated: {self.n_videos}"]
        for k in sorted(self.topk):
            s = self.topk[k]
            lines.append(f"top-{k}: {100*s['mean']:.2f} +- {100*s['std']:.2f}")
        return "\n".join(lines)


def evaluate_topk(predicted_captions: dict[str, str], labels: dict[str, str],
                  table: ClassEmbeddingTable, embed_fn, ks=(1, 5),
                  splits: list[list[str]] | None = None) -> EvalReport:
    """Accuracy of caption-to-class assignment.

    Every labeled video must have a prediction and a label present in
    the table. ``splits`` partitions videos for the mean +- std
    aggregation; the default is one split holding all labeled videos.
    """
    if len(table.names) < 2:
        raise DataError("classification needs at least 2 classes")
    name_set = set(table.names)
    for vid, label in labels.items():
        if label not in name_set:
            raise DataError(f"label {label!r} of video {vid} absent from class table")
        if vid not in predicted_captions:
            raise DataError(f"no prediction for labeled video {vid}")
    if splits is None:
        splits = [sorted(labels)]

    ks = tuple(sorted(set(int(k) for k in ks)))
    per_video: dict[str, dict] = {}
    hits: dict[str, dict[int, bool]] = {}
    for vid in sorted(labels):
        ranked = clip_tam_classify(predicted_captions[vid], table, embed_fn)
        if ranked:
            pred = ranked[0][0]
            margin = ranked[0][1] - (ranked[1][1] if len(ranked) > 1 else ranked[0][1])
            rank_names = [name for name, _s in ranked]
        else:
            pred, margin, rank_names = ABSTAIN, 0.0, []
        per_video[vid] = {"pred": pred, "margin": margin}
        hits[vid] = {k: labels[vid] in rank_names[:k] for k in ks}

    topk: dict[int, dict] = {}
    for k in ks:
        per_split = []
        for split in splits:
            members = [v for v in split if v in labels]
            if not members:
                continue
            per_split.append(float(np.mean([hits[v][k] for v in members])))
        mean = float(np.mean(per_split)) if per_split else 0.0
        std = float(np.std(per_split)) if per_split else 0.0
        topk[k] = {"mean": mean, "std": std, "per_split": per_split}
    return EvalReport(topk=topk, per_video=per_video, n_videos=len(labels))


def generalized_eval(predicted_captions: dict[str, str], labels: dict[str, str],
                     seen_classes, unseen_classes, embed_fn, ks=(1, 5),
                     splits=None) -> EvalReport:
    """Classify unseen-class videos against the union class table."""
    seen = [str(c) for c in seen_classes]
    unseen = [str(c) for c in unseen_classes]
    overlap = set(seen) & set(unseen)
    if overlap:
        raise DataError(f"seen/unseen class sets overlap: {sorted(overlap)}")
    unseen_labels = {v: c for v, c in labels.items() if c in set(unseen)}
    if not unseen_labels:
        return EvalReport(topk={k: {"mean": 0.0, "std": 0.0, "per_split": []} for k in ks},
                          per_video={}, n_videos=0)
    table = ClassEmbeddingTable.build(seen + unseen, embed_fn)
    preds = {v: predicted_captions[v] for v in unseen_labels if v in predicted_captions}
    return evaluate_topk(preds, unseen_labels, table, embed_fn, ks=ks, splits=splits)


# ---------------------------------------------------------------------------
# model-side helpers

def generate_predictions(model: ToyCaptioner, manifest, vocab: Vocabulary,
                         prompt: str, beam: int, max_new: int,
                         video_ids=None) -> dict[str, str]:
    """Beam-search a caption for each video (or the given subset)."""
    out: dict[str, str] = {}
    ids = video_ids if video_ids is not None else manifest.video_ids()
    for vid in ids:
        rec = manifest.get(vid)
        visual = encode_video(rec.features, model)
        out[vid] = generate(visual, model, prompt, vocab, beam=beam,
                            max_len=max_new).text
    return out


def classify_by_likelihood(model: ToyCaptioner, features, class_names,
                           vocab: Vocabulary, prompt: str) -> str:
    """Pick the class whose name the decoder scores highest as a caption.

    Ties break by class index (stable argmax over the name list).
    """
    visual = encode_video(features, model)
    prompt_ids = vocab.encode(prompt)
    best_name, best_score = None, -np.inf
    for name in class_names:
        score = sequence_caption_logprob(model, visual, prompt_ids, vocab.encode(name))
        if score > best_score:
            best_name, best_score = name, score
    return best_name


def content_word_fraction(captions, class_word_lists: dict[str, set[str]],
                          group) -> float:
    """Among caption tokens that are content words (members of any class
    word list), the fraction belonging to ``group`` classes. Used for
    vocabulary-collapse audits of label-trained models."""
    group_words = set().union(*(class_word_lists[c] for c in group)) if group else set()
    all_words = set().union(*class_word_lists.values()) if class_word_lists else set()
    n_group = n_content = 0
    for text in captions:
        for w in normalize_text(text).split():
            if w in all_words:
                n_content += 1
                if w in group_words:
                    n_group += 1
    return n_group / max(n_content, 1)
