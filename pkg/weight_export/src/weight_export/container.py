"""Writer for the ADCT tensor container (docs/formats.md in the pipeline repo).

Layout, all integers little-endian: magic "ADCT", version u32=1, record
count u32; per record: name length u32 + UTF-8 name, dtype u32 (0 = f32),
rank u32, dims as u64, then the row-major float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ADCT"
VERSION = 1
DTYPE_F32 = 0


class ContainerError(Exception):
    pass


def write_container(records: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(records))
    seen = set()
    for name, values in records:
        if not name:
            raise ContainerError("tensor names must be non-empty")
        if name in seen:
            raise ContainerError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.ndim == 0 or any(d == 0 for d in arr.shape):
            raise ContainerError(f"tensor {name!r} must have rank >= 1 and no empty axes")
        name_bytes = name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += struct.pack("<II", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h
