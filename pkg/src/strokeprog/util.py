"""Small shared helpers: hashing, deterministic serialization, statistics."""

from __future__ import annotations

import json
import math

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used for weight/file provenance and fold-plan ids."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a64_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def dump_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace drift, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1 denominator; 0.0 when n < 2)."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("mean_sd of empty sequence")
    mean = sum(vals) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var)


def lower_median(values) -> float:
    """Median with the lower-of-two convention for even-sized samples."""
    vals = sorted(values)
    if not vals:
        raise ValueError("median of empty sequence")
    return vals[(len(vals) - 1) // 2]
