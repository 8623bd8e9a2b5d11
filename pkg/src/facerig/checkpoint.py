"""Binary checkpoint format: magic "STRG", versioned, hash-sealed.

Layout (all little-endian):

    magic "STRG" | u32 version | tagged component string | config JSON |
    u32 tensor count | tensors (name, u32 ndim, u64 dims..., f64 payload) |
    sha256 over all preceding bytes

Strings and the JSON block are u32-length-prefixed UTF-8.  load(save(x))
round-trips bit-exactly; a truncated, corrupted or newer-versioned file
raises :class:`CheckpointError` rather than misreading.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"STRG"
VERSION = 1
COMPONENTS = ("model", "generator", "dfr", "rignet")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    component: str
    config: dict
    tensors: dict[str, np.ndarray]

    def hash(self) -> str:
        return hashlib.sha256(_encode_body(self)).hexdigest()


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode_body(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.component),
             _pack_str(json.dumps(ckpt.config, sort_keys=True))]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, component: str, config: dict,
                    tensors: dict[str, np.ndarray]) -> str:
    """Write a checkpoint and return its content hash (hex)."""
    if component not in COMPONENTS:
        raise CheckpointError(f"unknown component tag {component!r}")
    ckpt = Checkpoint(component, config, dict(tensors))
    body = _encode_body(ckpt)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expect_component: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 32:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: content hash mismatch (corrupt file)")
    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {VERSION})"
        )
    component = r.string()
    if component not in COMPONENTS:
        raise CheckpointError(f"{path}: unknown component tag {component!r}")
    if expect_component is not None and component != expect_component:
        raise CheckpointError(
            f"{path}: holds a {component!r} checkpoint, expected "
            f"{expect_component!r}"
        )
    config = json.loads(r.string())
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(component, config, tensors)
