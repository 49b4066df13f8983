"""Portable on-disk tensor format.

Layout, all little-endian:

    magic   4 bytes  b"LMCT"
    version u32      currently 1
    rank    u32
    extents u64 * rank
    dtype   u32      1 = float64 (the only supported tag)
    payload raw row-major float64

Used for dataset ingestion, selection maps and network parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IngestError

MAGIC = b"LMCT"
VERSION = 1
DTYPE_FLOAT64 = 1


def save_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)  # ascontiguousarray would promote 0-d to 1-d
    if array.ndim and not array.flags.c_contiguous:
        array = np.ascontiguousarray(array)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(struct.pack("<I", DTYPE_FLOAT64))
        fh.write(array.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise IngestError(f"{path}: bad magic bytes, not a portable tensor file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise IngestError(f"{path}: unsupported version {version}")
    offset = 12
    if len(raw) < offset + 8 * rank + 4:
        raise IngestError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    (dtype_tag,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if dtype_tag != DTYPE_FLOAT64:
        raise IngestError(f"{path}: unsupported dtype tag {dtype_tag}")
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != count * 8:
        raise IngestError(f"{path}: payload length {len(raw) - offset} does not match extents {shape}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).copy()
