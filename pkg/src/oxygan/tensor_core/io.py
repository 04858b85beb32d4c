"""OXT1 binary tensor container.

Layout: ``b"OXT1"``, little-endian u32 ndim, ndim little-endian u32 dims,
then prod(dims) little-endian f32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from oxygan.errors import FormatError

MAGIC = b"OXT1"


def encode(array) -> bytes:
    # ascontiguousarray would promote 0-d input to 1-d
    arr = np.array(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad OXT1 magic at offset {offset}")
    try:
        (ndim,) = struct.unpack_from("<I", buf, offset + 4)
        dims = struct.unpack_from(f"<{ndim}I", buf, offset + 8)
    except struct.error as exc:
        raise FormatError(f"truncated OXT1 header at offset {offset}") from exc
    start = offset + 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    end = start + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated OXT1 payload at offset {offset}: need {end - start} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(dims)
    return arr, end


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after OXT1 record")
    return arr
