"""Checkpoint container: a flat, byte-exact bag of named float32 tensors.

Wire format, all integers little-endian:

    magic          6 bytes  "COSF1\\n"
    tensor count   u64
    per tensor:
      name length  u16
      name         UTF-8 bytes
      rank         u8
      dims         u32 each
      data         f32 each, row-major

Round trips are bit-exact; writers sort names so identical contents always
produce identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IOParseError, UsageError

MAGIC = b"COSF1\n"


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    blobs = [MAGIC, struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise UsageError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise UsageError(f"tensor rank {arr.ndim} exceeds container limit")
        blobs.append(struct.pack("<H", len(raw_name)))
        blobs.append(raw_name)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(blobs))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOParseError(f"cannot read checkpoint {path}: {exc}") from exc

    def need(offset: int, n: int, what: str) -> bytes:
        if offset + n > len(raw):
            raise IOParseError(f"truncated checkpoint while reading {what}", offset)
        return raw[offset : offset + n]

    if need(0, len(MAGIC), "magic") != MAGIC:
        raise IOParseError(f"bad magic bytes in {path}", 0)
    pos = len(MAGIC)
    (count,) = struct.unpack("<Q", need(pos, 8, "tensor count"))
    pos += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(pos, 2, "name length"))
        pos += 2
        try:
            name = need(pos, name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IOParseError("tensor name is not valid UTF-8", pos) from exc
        pos += name_len
        (rank,) = struct.unpack("<B", need(pos, 1, "rank"))
        pos += 1
        dims = struct.unpack(f"<{rank}I", need(pos, 4 * rank, f"dims of {name}"))
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(need(pos, 4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        pos += 4 * size
        if name in out:
            raise IOParseError(f"duplicate tensor name {name!r}", pos)
        out[name] = data.copy()  # decouple from the file buffer
    if pos != len(raw):
        raise IOParseError("trailing bytes after last tensor", pos)
    return out
