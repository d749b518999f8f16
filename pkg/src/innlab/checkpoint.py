"""Binary checkpoint format.

Layout (little-endian)::

    b"INNC" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
    u32 tensor_count
    per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f32 data
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MagicError, TruncationError, VersionError

MAGIC = b"INNC"
VERSION = 1


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact comparison of metadata and tensor bytes."""
        if self.metadata != other.metadata or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _render_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = _render_meta(ckpt.metadata)
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would turn 0-d into 1-d
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(f"file truncated while reading {what} at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise MagicError(f"bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    meta_raw = r.take(r.u32("metadata length"), "metadata")
    text = meta_raw.decode("utf-8")
    if text and not text.endswith("\n"):
        raise CheckpointError("metadata block does not end with a newline")
    meta = {}
    for line in text.split("\n")[:-1]:  # splitlines() would also break on U+0085
        if "=" not in line:
            raise CheckpointError(f"metadata line {line!r} has no '='")
        key, _, value = line.partition("=")
        meta[key] = value
    tensors = {}
    for i in range(r.u32("tensor count")):
        name = r.take(r.u32(f"name length of tensor #{i}"), f"name of tensor #{i}").decode("utf-8")
        rank = r.u32(f"rank of tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor {name!r}"))
        count = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * count, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after tensor table")
    return Checkpoint(meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
