"""Retrieval-augmented self-training of a generative action captioner.

The engine alternates language-model training on cached pseudo-captions
with retrieval rounds that refresh each video's cache from its nearest
neighbors under a frozen retriever, and evaluates captions by
nearest-class-embedding accuracy.
"""

from .core import (
    DatasetManifest,
    FrameFeatures,
    VideoRecord,
    Vocabulary,
    aggregate_video_embedding,
    l2_normalize,
    load_manifest,
    save_manifest,
)
from .caption_cache import CaptionCache, Origin, ScoredCaption
from .estimator import RestCaptioner
from .evaluation import ClassEmbeddingTable, EvalReport, clip_tam_classify, evaluate_topk
from .loop import RestConfig, RestState, run_rest
from .model import ModelConfig, ToyCaptioner, generate, lm_loss, temporal_adapter
from .similarity import (
    NeighborIndex,
    TextEmbeddingCache,
    build_neighbor_index,
    video_text_similarity,
    video_video_similarity,
)
from .synthworld import SynthSpec, World, generate_world, load_world

__version__ = "0.1.0"

__all__ = [
    "CaptionCache",
    "ClassEmbeddingTable",
    "DatasetManifest",
    "EvalReport",
    "FrameFeatures",
    "ModelConfig",
    "NeighborIndex",
    "Origin",
    "RestCaptioner",
    "RestConfig",
    "RestState",
    "ScoredCaption",
    "SynthSpec",
    "TextEmbeddingCache",
    "ToyCaptioner",
    "VideoRecord",
    "Vocabulary",
    "World",
    "aggregate_video_embedding",
    "build_neighbor_index",
    "clip_tam_classify",
    "evaluate_topk",
    "generate",
    "generate_world",
    "l2_normalize",
    "lm_loss",
    "load_manifest",
    "load_world",
    "run_rest",
    "save_manifest",
    "temporal_adapter",
    "video_text_similarity",
    "video_video_similarity",
]
