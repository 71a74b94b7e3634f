"""Pluggable embedding/captioning providers.

The engine only ever sees two callables: a text-embedding provider
(caption -> unit vector) and a frame-caption provider
(video, frame, prompt -> text). Synthetic stubs, files exported by an
external encoder bridge, and a live streaming endpoint all fit behind
the same two signatures.
"""

from __future__ import annotations

import json
import socket
import struct
from pathlib import Path

import numpy as np

from .core import l2_normalize
from .errors import DataError


class FileCaptionProvider:
    """Per-frame captions read from a captions.jsonl export.

    First line: {"prompts": [...]}; then one record per video:
    {"id": ..., "frames": [[caption per prompt] per frame]}.
    """

    def __init__(self, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"captions file not found: {path}")
        self.prompts: list[str] = []
        self._frames: dict[str, list[list[str]]] = {}
        with open(path) as fh:
            header = json.loads(fh.readline())
            self.prompts = [str(p) for p in header["prompts"]]
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                self._frames[str(rec["id"])] = rec["frames"]

    def __call__(self, video_id: str, frame: int, prompt: str) -> str:
        try:
            per_prompt = self._frames[video_id][frame]
        except (KeyError, IndexError):
            raise DataError(f"no captions for video {video_id} frame {frame}") from None
        try:
            return per_prompt[self.prompts.index(prompt)]
        except ValueError:
            raise DataError(f"prompt {prompt!r} not in captions export") from None


class StreamTextClient:
    """Text-embedding client for the length-prefixed streaming protocol.

    Request: u32 LE length + UTF-8 caption. Response: 1 status byte
    (0 = ok, 1 = error), u32 LE payload length, payload. An ok payload is
    u32 LE dim followed by dim float32 LE values; an error payload is a
    UTF-8 message.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)

    def close(self) -> None:
        self._sock.close()

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise DataError("embedding stream closed mid-response")
            buf += chunk
        return buf

    def __call__(self, caption: str) -> np.ndarray:
        raw = caption.encode("utf-8")
        self._sock.sendall(struct.pack("<I", len(raw)) + raw)
        status = self._read_exact(1)[0]
        (length,) = struct.unpack("<I", self._read_exact(4))
        payload = self._read_exact(length)
        if status != 0:
            raise DataError(f"embedding provider error: {payload.decode('utf-8', 'replace')}")
        (dim,) = struct.unpack("<I", payload[:4])
        if len(payload) != 4 + 4 * dim:
            raise DataError("embedding response payload size mismatch")
        vec = np.frombuffer(payload, dtype="<f4", offset=4).astype(np.float64)
        return l2_normalize(vec)


def text_provider_from_arg(arg: str, data_dir=None):
    """Resolve a --text-provider argument.

    Accepted forms: "hash:<seed>:<dim>", "stream:<host>:<port>", or
    "auto" which reads world.json in the data directory.
    """
    from .synthworld import SynthTextEncoder

    if arg == "auto":
        if data_dir is None:
            raise DataError("auto text provider needs a data directory")
        world_file = Path(data_dir) / "world.json"
        if not world_file.exists():
            raise DataError(f"no world.json under {data_dir}; pass --text-provider")
        doc = json.loads(world_file.read_text())
        tp = doc.get("text_provider", {})
        if tp.get("kind") != "hash":
            raise DataError(f"unsupported text provider in world.json: {tp}")
        return SynthTextEncoder(int(tp["seed"]), int(tp["dim"]))
    kind, _, rest = arg.partition(":")
    if kind == "hash":
        seed, _, dim = rest.partition(":")
        return SynthTextEncoder(int(seed), int(dim))
    if kind == "stream":
        host, _, port = rest.rpartition(":")
        return StreamTextClient(host, int(port))
    raise DataError(f"unknown text provider spec: {arg!r}")
