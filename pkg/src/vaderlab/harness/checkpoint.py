"""Versioned binary parameter files.

Layout (all integers little-endian u32)::

    b"VDRL" | version
    per parameter: name_len | utf-8 name | rank | dims... | float32 LE values
    8-byte blake2b digest of every value byte, in file order
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from vaderlab.errors import ChecksumError, CheckpointError, TruncatedError, VersionError

MAGIC = b"VDRL"
VERSION = 1
_F32 = np.dtype("<f4")


def encode(state: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<I", version)]
    digest = hashlib.blake2b(digest_size=8)
    for name in sorted(state):
        value = np.asarray(state[name])
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(value, dtype=_F32).tobytes()
        digest.update(payload)
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(payload)
    parts.append(digest.digest())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.buf)} "
                                 f"(needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    digest = hashlib.blake2b(digest_size=8)
    state = {}
    while len(buf) - r.pos > 8:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        digest.update(payload)
        state[name] = np.frombuffer(payload, dtype=_F32).reshape(dims).astype(np.float32)
    stored = r.take(8)
    if stored != digest.digest():
        raise ChecksumError("checkpoint checksum mismatch")
    return state


def save_checkpoint(model, path: str | Path) -> Path:
    """Write ``model`` (a Module or a name -> array dict) atomically."""
    state = model if isinstance(model, dict) else model.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, model=None):
    """Read a checkpoint; load into ``model`` when given, else return the raw dict."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    state = decode(path.read_bytes())
    if model is None:
        return state
    model.load_state_dict(state)
    return model
