"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""

from __future__ import annotations


class RestcapError(Exception):
    """Base class for all engine errors."""


class ConfigError(RestcapError):
    """Invalid configuration, unknown override keys, bad CLI arguments."""


class DataError(RestcapError):
    """Problems with manifests, blobs, caches or other on-disk artifacts."""

    code = "data"


class MissingBlobError(DataError):
    code = "missing blob"


class DuplicateIdError(DataError):
    code = "duplicate id"


class DimMismatchError(DataError):
    code = "dim mismatch"


class BlobFormatError(DataError):
    code = "blob format"


class CacheParseError(DataError):
    """Corrupt caption-cache file; carries the offending line number."""

    code = "cache parse"

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


class DegenerateEmbeddingError(RestcapError):
    """Zero vector handed to a normalizer."""


class NumericError(RestcapError):
    """Non-finite loss or other numerical failure during training."""
