"""Lesion segmentation on raw ADC volumes and lesion-volume features.

The chain is threshold -> binary opening -> connected components -> small
component removal, all in physical ADC units (segmentation runs before any
intensity normalization). Low ADC marks acute ischemic tissue, so a voxel is
lesion-like when 0 < value < threshold; exact zero is background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PipelineError

THRESHOLD_LOW = 480.0
THRESHOLD_HIGH = 620.0
DEFAULT_THRESHOLD = THRESHOLD_HIGH
MIN_COMPONENT_VOXELS = 150

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]


class LesionError(PipelineError):
    pass


@dataclass(frozen=True)
class LesionStats:
    n_voxels: int
    voxel_volume_mm3: float
    volume_mm3: float
    log_volume: float
    threshold_used: float

    @staticmethod
    def from_mask(mask: np.ndarray, spacing, threshold: float) -> "LesionStats":
        n = int(np.count_nonzero(mask))
        sz, sy, sx = (float(s) for s in spacing)
        v_voxel = sz * sy * sx
        volume = n * v_voxel
        return LesionStats(
            n_voxels=n,
            voxel_volume_mm3=v_voxel,
            volume_mm3=volume,
            log_volume=math.log1p(volume),
            threshold_used=float(threshold),
        )


def threshold_mask(data: np.ndarray, thr: float) -> np.ndarray:
    """Boolean mask of lesion-like voxels: strictly 0 < value < thr."""
    if thr <= 0:
        raise LesionError(f"threshold must be positive, got {thr}")
    return (data > 0) & (data < thr)


def _shifted_slices(shape, dz, dy, dx):
    # source/destination index ranges for shifting a volume by (dz,dy,dx)
    def rng(n, d):
        if d >= 0:
            return slice(d, n), slice(0, n - d)
        return slice(0, n + d), slice(-d, n)

    sz, tz = rng(shape[0], dz)
    sy, ty = rng(shape[1], dy)
    sx, tx = rng(shape[2], dx)
    return (sz, sy, sx), (tz, ty, tx)


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for dz, dy, dx in _OFFSETS_26:
        shifted = np.zeros_like(mask)  # out-of-bounds counts as background
        src, dst = _shifted_slices(mask.shape, dz, dy, dx)
        shifted[dst] = mask[src]
        out &= shifted
    return out


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for dz, dy, dx in _OFFSETS_26:
        src, dst = _shifted_slices(mask.shape, dz, dy, dx)
        out[dst] |= mask[src]
    return out


def morph_open(mask: np.ndarray) -> np.ndarray:
    """Binary opening (erosion then dilation) with a full 3x3x3 element."""
    return _dilate(_erode(np.asarray(mask, dtype=bool)))


def connected_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Label maximal connected foreground sets.

    Returns (labels, sizes): labels is int32 with background 0 and components
    numbered 1..k in raster-scan order of each component's first voxel;
    sizes[i] is the voxel count of label i+1.
    """
    if connectivity == 26:
        offsets = _OFFSETS_26
    elif connectivity == 6:
        offsets = _OFFSETS_6
    else:
        raise LesionError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)

    flat_idx = np.full(mask.shape, -1, dtype=np.int64)
    fg_count = int(np.count_nonzero(mask))
    labels = np.zeros(mask.shape, dtype=np.int32)
    if fg_count == 0:
        return labels, np.zeros(0, dtype=np.int64)
    raster = np.flatnonzero(mask.reshape(-1))  # ascending raster order
    flat_idx.reshape(-1)[raster] = np.arange(fg_count)

    # adjacency as (a, b) pairs of foreground ordinals; forward offsets suffice
    forward = [o for o in offsets if o > (0, 0, 0)]
    edges_a = []
    edges_b = []
    for dz, dy, dx in forward:
        src, dst = _shifted_slices(mask.shape, dz, dy, dx)
        both = mask[src] & mask[dst]
        if both.any():
            edges_a.append(flat_idx[src][both])
            edges_b.append(flat_idx[dst][both])
    parent = np.arange(fg_count, dtype=np.int64)
    if edges_a:
        a = np.concatenate(edges_a)
        b = np.concatenate(edges_b)
        # hooking + pointer jumping until every edge joins a single root
        while True:
            ra, rb = parent[a], parent[b]
            hi = np.maximum(ra, rb)
            lo = np.minimum(ra, rb)
            diff = hi != lo
            if not diff.any():
                break
            np.minimum.at(parent, hi[diff], lo[diff])
            while True:
                nxt = parent[parent]
                if np.array_equal(nxt, parent):
                    break
                parent = nxt

    # roots are minimal raster ordinals; relabel in raster order of the roots
    roots = np.unique(parent)
    order = np.empty(roots[-1] + 1, dtype=np.int32) if roots.size else np.zeros(0, dtype=np.int32)
    order[roots] = np.arange(1, roots.size + 1, dtype=np.int32)
    comp = order[parent]
    labels.reshape(-1)[raster] = comp
    sizes = np.bincount(comp, minlength=roots.size + 1)[1:].astype(np.int64)
    return labels, sizes


def prune_small(labels: np.ndarray, min_voxels: int = MIN_COMPONENT_VOXELS) -> np.ndarray:
    """Keep only voxels of components whose size is >= min_voxels."""
    labels = np.asarray(labels)
    counts = np.bincount(labels.reshape(-1))
    keep = counts >= min_voxels
    keep[0] = False
    return keep[labels]


def lesion_stats(mask: np.ndarray, spacing, threshold: float = DEFAULT_THRESHOLD) -> LesionStats:
    return LesionStats.from_mask(np.asarray(mask, dtype=bool), spacing, threshold)


def segment_lesion(
    data: np.ndarray,
    spacing,
    threshold: float = DEFAULT_THRESHOLD,
    min_voxels: int = MIN_COMPONENT_VOXELS,
    connectivity: int = 26,
) -> tuple[np.ndarray, LesionStats]:
    """Full segmentation chain on one raw-unit volume; returns (mask, stats)."""
    mask = threshold_mask(data, threshold)
    mask = morph_open(mask)
    labels, _ = connected_components(mask, connectivity=connectivity)
    pruned = prune_small(labels, min_voxels=min_voxels)
    return pruned, lesion_stats(pruned, spacing, threshold)
