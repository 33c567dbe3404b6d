"""Checkpoint format: magic EPN1, u32 version, u32 array count, then per
array a length-prefixed UTF-8 name, u32 rank, the u32 dims, and the
float64 little-endian row-major payload. Arrays are written in sorted name
order so files are byte-reproducible."""

import struct

import numpy as np

MAGIC = b"EPN1"
VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(dims).copy()
        offset += size * 8
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after last array")
    return arrays
