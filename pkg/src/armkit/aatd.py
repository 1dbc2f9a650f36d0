"""AATD binary tensor dumps.

Layout: the 4 magic bytes ``AATD``, a little-endian uint32 rank, ``rank``
little-endian uint32 dimensions, then the values in row-major order as
little-endian float32. Values are down-converted from float64 on write.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AATD"


def encode(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array), dtype=np.float64)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError(f"not an AATD dump (magic {buf[:4]!r})")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(buf) != expected:
        raise ValueError(f"AATD size mismatch: header implies {expected} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def write(path, array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(array))
    os.replace(tmp, path)
    return path


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
