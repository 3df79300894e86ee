"""Flat binary tensor format, used for checkpoints, datasets, and goldens.

Layout: magic ``b"SYT1"``, rank as little-endian u32, one little-endian u32
per extent, then the row-major float64 payload, little-endian.  Round trips
are bitwise lossless.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"SYT1"


def write_tensor(path, array: np.ndarray):
    arr = np.asarray(array, dtype=np.float64)  # tobytes() emits C order regardless
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise IntegrityError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(np.float64)
