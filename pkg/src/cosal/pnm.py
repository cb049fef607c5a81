"""Binary PPM (P6) and PGM (P5) image files, maxval 255.

These formats are the package's only image interchange: images are P6,
masks and predicted maps are P5. Maps in [0,1] are quantized to bytes by
round-half-up, and reading returns byte/255 as float32, so a write/read
round trip equals the quantization exactly, bit for bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IOParseError, UsageError

_MAXVAL = 255
_WHITESPACE = b" \t\r\n\x0b\x0c"


def quantize_unit(data: np.ndarray) -> np.ndarray:
    """Map [0,1] floats onto the 256-level grid actually stored on disk."""
    return (_to_bytes(data).astype(np.float32)) / np.float32(_MAXVAL)


def _to_bytes(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data)
    if arr.size == 0:
        raise UsageError("cannot quantize an empty array")
    lo, hi = float(arr.min()), float(arr.max())
    if not (0.0 <= lo and hi <= 1.0) or not np.isfinite(lo) or not np.isfinite(hi):
        raise UsageError(f"image values must lie in [0,1], got range [{lo}, {hi}]")
    # round half up: 0.5 -> 128
    return np.floor(arr.astype(np.float64) * _MAXVAL + 0.5).astype(np.uint8)


def write_image(path: str | Path, data: np.ndarray) -> None:
    """Write [H,W] as PGM P5 or [3,H,W] as PPM P6; values must lie in [0,1]."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        h, w = arr.shape
        payload = _to_bytes(arr).tobytes()
        header = f"P5\n{w} {h}\n{_MAXVAL}\n".encode("ascii")
    elif arr.ndim == 3 and arr.shape[0] == 3:
        _, h, w = arr.shape
        # interleave channels: P6 stores RGB per pixel
        payload = np.ascontiguousarray(_to_bytes(arr).transpose(1, 2, 0)).tobytes()
        header = f"P6\n{w} {h}\n{_MAXVAL}\n".encode("ascii")
    else:
        raise UsageError(f"write_image takes [H,W] or [3,H,W], got shape {arr.shape}")
    Path(path).write_bytes(header + payload)


class _Scanner:
    """Header tokenizer tracking byte offsets; handles whitespace and
    '#' comment lines per the netpbm grammar."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def skip_separators(self) -> None:
        raw = self.raw
        while self.pos < len(raw):
            c = raw[self.pos : self.pos + 1]
            if c in _WHITESPACE:
                self.pos += 1
            elif c == b"#":
                while self.pos < len(raw) and raw[self.pos : self.pos + 1] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self.skip_separators()
        start = self.pos
        raw = self.raw
        while self.pos < len(raw) and raw[self.pos : self.pos + 1] not in _WHITESPACE and raw[self.pos : self.pos + 1] != b"#":
            self.pos += 1
        if self.pos == start:
            raise IOParseError(f"expected {what}", start)
        return raw[start : self.pos]

    def integer(self, what: str, lo: int, hi: int) -> int:
        self.skip_separators()
        start_after_sep = self.pos
        tok = self.token(what)
        if not tok.isdigit():
            raise IOParseError(f"{what} is not a decimal integer: {tok[:20]!r}", start_after_sep)
        value = int(tok)
        if not lo <= value <= hi:
            raise IOParseError(f"{what} {value} outside [{lo}, {hi}]", start_after_sep)
        return value


def read_image(path: str | Path) -> np.ndarray:
    """Read a P5 file to [H,W] or a P6 file to [3,H,W], values byte/255 float32."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOParseError(f"cannot read image {path}: {exc}") from exc

    scan = _Scanner(raw)
    magic = scan.token("magic number")
    if magic not in (b"P5", b"P6"):
        raise IOParseError(f"unsupported magic {magic[:8]!r}; only binary P5/P6", 0)
    width = scan.integer("width", 1, 1 << 20)
    height = scan.integer("height", 1, 1 << 20)
    maxval = scan.integer("maxval", 1, 65535)
    if maxval != _MAXVAL:
        raise IOParseError(f"maxval must be {_MAXVAL}, got {maxval}", scan.pos)
    if scan.pos >= len(raw) or raw[scan.pos : scan.pos + 1] not in _WHITESPACE:
        raise IOParseError("missing single whitespace byte after maxval", scan.pos)
    scan.pos += 1  # exactly one separator byte before the payload

    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = raw[scan.pos :]
    if len(payload) < expected:
        raise IOParseError(f"payload truncated: need {expected} bytes, have {len(payload)}", len(raw))
    if len(payload) > expected:
        raise IOParseError(f"trailing bytes after pixel data: {len(payload) - expected}", scan.pos + expected)

    flat = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        img = flat.reshape(height, width)
    else:
        img = flat.reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / np.float32(_MAXVAL)
