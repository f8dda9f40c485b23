"""MEMT tensor container: magic "MEMT", version u16, rank u8, extents u32[rank],
float32 little-endian payload. Checkpoints store a sequence of records in
manifest order."""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"MEMT"
VERSION = 1


class ContainerError(ValueError):
    """Malformed MEMT stream."""


def write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 4:
        raise ContainerError(f"rank {arr.ndim} exceeds container maximum 4")
    fh.write(MAGIC)
    fh.write(struct.pack("<H", VERSION))
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) == 0:
        raise EOFError("no record at stream position")
    if head != MAGIC:
        raise ContainerError(f"bad magic {head!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (rank,) = struct.unpack("<B", fh.read(1))
    if rank > 4:
        raise ContainerError(f"rank {rank} exceeds container maximum 4")
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ContainerError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensors(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_record(fh, arr)


def load_tensors(path, count: int | None = None) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    with open(path, "rb") as fh:
        while True:
            try:
                out.append(read_record(fh))
            except EOFError:
                break
            if count is not None and len(out) == count:
                break
    if count is not None and len(out) != count:
        raise ContainerError(f"expected {count} records, found {len(out)}")
    return out
