"""Binary checkpoint format for named float64 tensors.

Layout (all integers little-endian)::

    b"MEALCKPT1"
    repeated per tensor:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u64 extents
        row-major f64 values
    u64 checksum (blake2b, 8-byte digest) of every byte between magic and checksum
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEALCKPT1"


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(params: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    payload = b"".join(chunks)
    return MAGIC + payload + _checksum(payload)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic: not a MEAL checkpoint")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    payload, stored = blob[len(MAGIC):-8], blob[-8:]
    if _checksum(payload) != stored:
        raise CheckpointError("checksum mismatch")
    params = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("truncated payload")
        out = payload[pos:pos + n]
        pos += n
        return out

    while pos < len(payload):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return params


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
