"""Caption text normalization shared by the cache and the generators."""

from __future__ import annotations

from .core import normalize_text

# Ingestion cap on caption length; longer texts are cut at a word
# boundary so decoder sequences stay bounded.
MAX_CAPTION_TOKENS = 30


def normalize_caption(text: str, max_tokens: int = MAX_CAPTION_TOKENS) -> str:
    words = normalize_text(text).split()
    return " ".join(words[:max_tokens])
