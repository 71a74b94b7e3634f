"""Deterministic synthetic testbed: planted class clusters in the
retriever space, order-sensitive class pairs in the feature space, a
bag-of-words hash text encoder standing in for the frozen retriever's
text tower, and a noisy stub captioner that plants the label noise the
self-training loop has to clean up.

Everything is a pure function of the spec seed: regenerating a world or
re-querying a stub yields bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    FrameFeatures,
    VideoRecord,
    l2_normalize,
    normalize_text,
    save_manifest,
    load_manifest,
)
from .errors import ConfigError, DataError

INIT_PROMPTS = ("a video of", "a person is", "someone is")

# Disjoint verb/noun banks used to mint class phrases; order pairs reuse
# one slot with the two words swapped.
_VERBS = [
    "riding", "playing", "climbing", "cooking", "painting", "throwing",
    "washing", "digging", "folding", "kicking", "lifting", "brushing",
    "carving", "juggling", "rowing", "sweeping", "typing", "welding",
    "stacking", "peeling",
]
_NOUNS = [
    "bike", "guitar", "wall", "pasta", "fence", "ball", "car", "garden",
    "laundry", "door", "box", "teeth", "wood", "pins", "boat", "floor",
    "keyboard", "metal", "crates", "apples",
]
_FILLER = [
    "outside", "indoors", "slowly", "quickly", "together", "alone",
    "today", "carefully", "loudly", "quietly", "near", "morning",
    "evening", "again", "around", "behind", "calmly", "briskly",
    "steadily", "happily",
]


def _hash_seed(*keys) -> int:
    msg = "\x1f".join(str(k) for k in keys).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(_hash_seed(*keys))


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    n_videos: int = 200
    frames: int = 8
    dim: int = 32
    feature_dim: int = 32
    spatial_tokens: int = 4
    noise_sigma: float = 0.05
    # Feature-space noise is a separate knob: retrieval needs tight
    # clusters, while the captioner input needs enough per-video
    # identity that self-training can latch onto individual videos.
    feature_noise_sigma: float = 0.8
    # Videos that fool the captioner are ambiguous content: their
    # retriever embeddings and frame features lean toward the distractor
    # class by this mixing weight, so relevance ranking cannot clean
    # them perfectly and the captioner sees them as a region of their
    # own rather than clean class members.
    ambiguity_mix: float = 0.45
    order_pair_fraction: float = 0.2
    p_correct: float = 0.6
    # Chance that a frame caption mentions a background object: one word
    # borrowed from another class. Every initial caption pool is dirty
    # in this way, so only model-generated captions can be clean.
    contaminate_p: float = 0.5
    filler_min: int = 1
    filler_max: int = 2
    seed: int = 0

    def n_order_pairs(self) -> int:
        return int(round(self.n_classes * self.order_pair_fraction / 2.0))

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not 0.0 <= self.order_pair_fraction <= 1.0:
            raise ConfigError("order_pair_fraction must be in [0, 1]")
        if not 0.0 <= self.p_correct <= 1.0:
            raise ConfigError("p_correct must be in [0, 1]")
        if self.frames < 1 or self.n_videos < self.n_classes:
            raise ConfigError("need at least one video per class and one frame")
        n_unseen = -(-self.n_classes // 4)  # ceil
        if 2 * self.n_order_pairs() > self.n_classes - n_unseen:
            raise ConfigError("order pairs must fit inside the seen classes")
        if self.n_classes - 2 * self.n_order_pairs() > len(_VERBS) - self.n_order_pairs():
            raise ConfigError(f"word bank supports at most {len(_VERBS)} class slots")


def make_class_names(spec: SynthSpec) -> tuple[list[str], list[tuple[int, int]]]:
    """Class phrases plus the index pairs that share a word list."""
    names: list[str] = []
    pairs: list[tuple[int, int]] = []
    slot = 0
    for _ in range(spec.n_order_pairs()):
        names.append(f"{_VERBS[slot]} {_NOUNS[slot]}")
        names.append(f"{_NOUNS[slot]} {_VERBS[slot]}")
        pairs.append((len(names) - 2, len(names) - 1))
        slot += 1
    while len(names) < spec.n_classes:
        names.append(f"{_VERBS[slot]} {_NOUNS[slot]}")
        slot += 1
    return names, pairs


class SynthTextEncoder:
    """Bag-of-words hash embedding: each word maps to a seeded unit
    vector; a caption embeds as the normalized sum over its words.
    Word order and duplicates-free permutations cannot change it."""

    def __init__(self, seed: int, dim: int):
        self.seed = seed
        self.dim = dim
        self._word_vecs: dict[str, np.ndarray] = {}

    def _word(self, word: str) -> np.ndarray:
        vec = self._word_vecs.get(word)
        if vec is None:
            vec = l2_normalize(_rng(self.seed, "word", word).normal(size=self.dim))
            self._word_vecs[word] = vec
        return vec

    def __call__(self, text: str) -> np.ndarray:
        words = normalize_text(text).split()
        if not words:
            raise DataError("cannot embed empty text")
        total = np.zeros(self.dim)
        for w in words:
            total += self._word(w)
        return l2_normalize(total)


def latent_video_content(spec: SynthSpec, class_names: list[str],
                         true_class: str, video_id: str) -> str:
    """The class a video's content reads as.

    With probability p_correct it is the true class; otherwise a
    distractor drawn uniformly over all classes (so at p_correct = 0
    accuracy sits at chance 1/C rather than zero). Both the stub
    captioner and the retriever-embedding blend perceive this same
    latent content, mirroring real encoders being fooled by the same
    ambiguous videos.
    """
    rng = _rng(spec.seed, "coin", video_id)
    if rng.random() < spec.p_correct:
        return true_class
    return class_names[int(rng.integers(len(class_names)))]


class SynthCaptioner:
    """Noisy stand-in for the off-the-shelf frame captioner.

    Per video, the latent content decides whether its frames describe
    the true class or a distractor. Filler words vary per
    (frame, prompt); every output is a pure function of
    (video, frame, prompt, seed).
    """

    def __init__(self, spec: SynthSpec, class_names: list[str],
                 video_classes: dict[str, str]):
        self.spec = spec
        self.class_names = class_names
        self.video_classes = video_classes

    def content_class(self, video_id: str) -> str:
        return latent_video_content(self.spec, self.class_names,
                                    self.video_classes[video_id], video_id)

    def __call__(self, video_id: str, frame: int, prompt: str) -> str:
        if video_id not in self.video_classes:
            raise DataError(f"unknown video id: {video_id}")
        phrase = self.content_class(video_id)
        rng = _rng(self.spec.seed, "fill", video_id, frame, prompt)
        n_fill = int(rng.integers(self.spec.filler_min, self.spec.filler_max + 1))
        words = [str(w) for w in rng.choice(_FILLER, size=n_fill, replace=False)]
        if rng.random() < self.spec.contaminate_p:
            other = self.class_names[int(rng.integers(len(self.class_names)))]
            contaminant = other.split()[int(rng.integers(2))]
            if contaminant not in phrase.split():
                words.insert(int(rng.integers(len(words) + 1)), contaminant)
        return f"{prompt} {phrase} {' '.join(words)}"


@dataclass
class World:
    spec: SynthSpec
    manifest: DatasetManifest
    class_names: list[str]
    order_pairs: list[tuple[int, int]]
    video_classes: dict[str, str]
    gt_captions: dict[str, str]
    seen_classes: list[str]
    unseen_classes: list[str]
    text_encoder: SynthTextEncoder
    captioner: SynthCaptioner
    class_centroids: dict[str, np.ndarray] = field(default_factory=dict)

    def frame_embedding(self, video_id: str, frame: int) -> np.ndarray:
        """Stub image encoder: the stored retriever embedding."""
        rec = self.manifest.get(video_id)
        if not 0 <= frame < rec.frame_count:
            raise DataError(f"unknown frame {frame} of video {video_id}")
        return rec.frame_embeddings[frame]

    def class_word_lists(self) -> dict[str, set[str]]:
        return {name: set(name.split()) for name in self.class_names}

    def labels(self) -> dict[str, str]:
        return dict(self.video_classes)

    def write(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_manifest(self.manifest, path / "manifest.json")
        with open(path / "captions.jsonl", "w") as fh:
            fh.write(json.dumps({"prompts": list(INIT_PROMPTS)}) + "\n")
            for rec in self.manifest.records:
                frames = [
                    [self.captioner(rec.video_id, t, p) for p in INIT_PROMPTS]
                    for t in range(rec.frame_count)
                ]
                fh.write(json.dumps({"id": rec.video_id, "frames": frames}) + "\n")
        doc = {
            "spec": asdict(self.spec),
            "class_names": self.class_names,
            "order_pairs": [list(p) for p in self.order_pairs],
            "seen_classes": self.seen_classes,
            "unseen_classes": self.unseen_classes,
            "gt_captions": self.gt_captions,
            "video_classes": self.video_classes,
            "text_provider": {"kind": "hash", "seed": self.spec.seed, "dim": self.spec.dim},
        }
        (path / "world.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def generate_world(spec: SynthSpec) -> World:
    spec.validate()
    class_names, pairs = make_class_names(spec)
    encoder = SynthTextEncoder(spec.seed, spec.dim)
    centroids = {name: encoder(name) for name in class_names}

    paired_with: dict[int, int] = {}
    for a, b in pairs:
        paired_with[b] = a

    # Feature templates: order-pair partners get the time-reversed copy,
    # so only temporal modeling can tell them apart.
    templates: list[tuple[np.ndarray, np.ndarray]] = []
    for ci in range(spec.n_classes):
        if ci in paired_with:
            sp, cl = templates[paired_with[ci]]
            templates.append((sp[::-1].copy(), cl[::-1].copy()))
        else:
            trng = _rng(spec.seed, "template", ci)
            templates.append((
                trng.normal(size=(spec.frames, spec.spatial_tokens, spec.feature_dim)),
                trng.normal(size=(spec.frames, spec.feature_dim)),
            ))

    records: list[VideoRecord] = []
    video_classes: dict[str, str] = {}
    gt_captions: dict[str, str] = {}
    for i in range(spec.n_videos):
        ci = i % spec.n_classes
        name = class_names[ci]
        vid = f"vid{i:04d}"
        vrng = _rng(spec.seed, "video", vid)
        perceived = latent_video_content(spec, class_names, name, vid)
        base = centroids[name]
        sp_t, cl_t = templates[ci]
        if perceived != name:
            lam = spec.ambiguity_mix
            base = (1.0 - lam) * centroids[name] + lam * centroids[perceived]
            sp_p, cl_p = templates[class_names.index(perceived)]
            sp_t = (1.0 - lam) * sp_t + lam * sp_p
            cl_t = (1.0 - lam) * cl_t + lam * cl_p
        frames = np.stack([
            l2_normalize(base + spec.noise_sigma * vrng.normal(size=spec.dim))
            for _ in range(spec.frames)
        ])
        spatial = sp_t + spec.feature_noise_sigma * vrng.normal(size=sp_t.shape)
        cls_tok = cl_t + spec.feature_noise_sigma * vrng.normal(size=cl_t.shape)
        records.append(VideoRecord(
            video_id=vid,
            frame_embeddings=frames,
            features=FrameFeatures(spatial=spatial, cls=cls_tok),
            label=name,
        ))
        video_classes[vid] = name
        gt_captions[vid] = f"a person is {name}"

    manifest = DatasetManifest(
        records=records,
        dim=spec.dim,
        feature_dim=spec.feature_dim,
        spatial_tokens=spec.spatial_tokens,
        classes=list(class_names),
    )
    n_unseen = -(-spec.n_classes // 4)
    seen = class_names[: spec.n_classes - n_unseen]
    unseen = class_names[spec.n_classes - n_unseen:]
    captioner = SynthCaptioner(spec, class_names, video_classes)
    return World(
        spec=spec,
        manifest=manifest,
        class_names=class_names,
        order_pairs=pairs,
        video_classes=video_classes,
        gt_captions=gt_captions,
        seen_classes=seen,
        unseen_classes=unseen,
        text_encoder=encoder,
        captioner=captioner,
        class_centroids=centroids,
    )


def load_world(path) -> World:
    """Rebuild a World from a directory written by ``World.write``.

    The manifest round-trips through the interchange formats; stubs are
    reconstructed from the recorded spec, so loaded worlds behave
    identically to freshly generated ones.
    """
    path = Path(path)
    doc = json.loads((path / "world.json").read_text())
    spec = SynthSpec(**doc["spec"])
    manifest = load_manifest(path / "manifest.json")
    encoder = SynthTextEncoder(spec.seed, spec.dim)
    video_classes = {str(k): str(v) for k, v in doc["video_classes"].items()}
    captioner = SynthCaptioner(spec, list(doc["class_names"]), video_classes)
    return World(
        spec=spec,
        manifest=manifest,
        class_names=list(doc["class_names"]),
        order_pairs=[tuple(p) for p in doc["order_pairs"]],
        video_classes=video_classes,
        gt_captions={str(k): str(v) for k, v in doc["gt_captions"].items()},
        seen_classes=list(doc["seen_classes"]),
        unseen_classes=list(doc["unseen_classes"]),
        text_encoder=encoder,
        captioner=captioner,
        class_centroids={n: encoder(n) for n in doc["class_names"]},
    )
