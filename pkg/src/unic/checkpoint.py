"""Named-array checkpoint container.

Layout (little-endian)::

    b"UNICKPT1"
    u32  entry count
    per entry:
        u16  name length, UTF-8 name
        u8   dtype code (0 = f32, 1 = f64)
        u8   rank, rank x u32 dims
        payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"UNICKPT1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {"f32": 0, "f64": 1}


def encode_checkpoint(arrays, dtype="f32"):
    code = CODES[dtype]
    np_dtype = DTYPES[code]
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    """Parse a checkpoint into an ordered dict of float64 arrays."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8", start) from exc
        code_pos = pos
        code, rank = struct.unpack("<BB", take(2, "dtype and rank"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", code_pos)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(n * dt.itemsize, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(dims)
    if pos != len(view):
        raise FormatError("trailing bytes after last entry", pos)
    return arrays


def save_checkpoint(arrays, path, dtype="f32"):
    data = encode_checkpoint(arrays, dtype)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
