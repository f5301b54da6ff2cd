"""Flat binary tensor files.

Layout: magic b"NITG", version u32, count u32, then per tensor:
name length u32, utf-8 name, rank u32, dims u32 * rank, little-endian f64 payload.
All integers are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"NITG"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos} (need {n} more, have {len(buf) - pos})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name not utf-8 at byte {pos}") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - pos} trailing bytes")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
