"""Flat binary container for trained models.

Layout: 4 magic bytes, u16 format version, u32 dims in declaration order,
little-endian float64 parameter blocks in declaration order, trailing CRC32
of everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def write_model(path, magic: bytes, dims: list[int], blocks: list[np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = bytearray()
    out += magic
    out += struct.pack("<H", MODEL_FORMAT_VERSION)
    out += struct.pack(f"<{len(dims)}I", *dims)
    for block in blocks:
        out += np.ascontiguousarray(block, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_model(path, magic: bytes, n_dims: int):
    """Returns (dims, payload_bytes). Block splitting is the caller's job
    since block shapes depend on the dims."""
    with open(path, "rb") as f:
        blob = f.read()
    header = 4 + 2 + 4 * n_dims
    if len(blob) < header + 4:
        raise ModelFormatError(f"file truncated at offset {len(blob)}")
    if blob[:4] != magic:
        raise ModelFormatError(f"bad magic at offset 0: expected {magic!r}, got {blob[:4]!r}")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if stored != zlib.crc32(blob[:-4]):
        raise ModelFormatError(f"CRC mismatch at offset {len(blob) - 4}")
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, 6))
    return dims, blob[header:-4]


def split_blocks(payload: bytes, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    arrays = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(payload):
            raise ModelFormatError(f"parameter block overruns payload at offset {offset}")
        arrays.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).copy())
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError(f"trailing bytes in payload after offset {offset}")
    return arrays
