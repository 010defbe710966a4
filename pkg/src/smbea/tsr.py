"""TSR1 binary tensor files: ``b"TSR1"``, u32 rank, u32 extents, f64 payload (little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSR1"


class TSRFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TSRFormatError("missing TSR1 magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise TSRFormatError(f"truncated header: rank {rank} needs {offset} bytes, have {len(blob)}")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise TSRFormatError(f"payload size mismatch: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=offset, count=count).astype(np.float64).reshape(shape)


def save(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())
