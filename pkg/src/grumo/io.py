"""File formats: GT01 tensors and 16-bit binary PGM rasters.

GT01 layout (all little-endian)::

    bytes 0-3   b"GT01"
    u32         rank
    rank x u32  dims
    payload     row-major f32
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"GT01"


class FormatError(ValueError):
    pass


def encode_gt01(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_gt01(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"truncated header: {len(buf)} bytes (offset 0)")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at offset 0")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 4 * rank:
        raise FormatError(f"truncated dims at offset 8: rank {rank} needs {4 * rank} bytes")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    start = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != 4 * count:
        raise FormatError(f"payload at offset {start} has {len(buf) - start} bytes, "
                          f"expected {4 * count} for shape {tuple(dims)}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(np.float32).reshape(dims)


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_gt01(path, arr) -> None:
    atomic_write(path, encode_gt01(arr))


def read_gt01(path) -> np.ndarray:
    return decode_gt01(Path(path).read_bytes())


def to_u16(values) -> np.ndarray:
    """Map [0,1] floats to 0..65535 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 65535 + 0.5).astype(np.uint16)


def encode_pgm16(values) -> bytes:
    v = np.asarray(values)
    if v.ndim != 2:
        v = v.reshape(v.shape[-2:])
    h, w = v.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + to_u16(v).astype(">u2").tobytes()


def write_pgm16(path, values) -> None:
    atomic_write(path, encode_pgm16(values))


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"bad PGM magic {fields[0]!r} at offset 0")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise FormatError(f"expected maxval 65535, got {maxval}")
    pos += 1
    if len(buf) - pos != 2 * w * h:
        raise FormatError(f"raster at offset {pos} has {len(buf) - pos} bytes, expected {2 * w * h}")
    return np.frombuffer(buf, dtype=">u2", offset=pos).astype(np.uint16).reshape(h, w)
