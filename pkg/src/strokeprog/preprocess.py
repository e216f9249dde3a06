"""Resampling onto the model grid and CNN input normalization.

The canonical grid is 24x256x256; experiments at desk scale resample to a
smaller grid with the same machinery. Resampling uses the voxel-center
convention, so physical extent is preserved: output spacing is scaled by
the shape ratio per axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .volume_io import Volume3D

CANONICAL_SHAPE = (24, 256, 256)


class DegenerateAxis(PipelineError):
    pass


@dataclass
class CanonicalVolume:
    """A volume resampled onto the model grid, with source provenance."""

    volume: Volume3D
    source_id: str
    source_shape: tuple[int, int, int]
    source_spacing: tuple[float, float, float]

    @property
    def data(self) -> np.ndarray:
        return self.volume.data


def _axis_coords(n_out: int, n_src: int) -> np.ndarray:
    # voxel-center mapping: src = (i + 0.5) * (n_src / n_out) - 0.5
    ratio = n_src / n_out
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
    return np.clip(coords, 0.0, n_src - 1)  # edge padding outside the grid


def resample_trilinear(
    vol: Volume3D,
    target_shape: tuple[int, int, int] = CANONICAL_SHAPE,
    source_id: str = "",
) -> CanonicalVolume:
    """Trilinear resampling of ``vol`` onto ``target_shape``.

    Output voxel centers are pulled back into source index space and the
    eight surrounding source voxels are blended; coordinates outside the
    source grid clamp to the nearest face.
    """
    if any(s <= 0 for s in vol.shape):
        raise DegenerateAxis(f"source shape {vol.shape} has an empty axis")
    if any(t < 1 for t in target_shape):
        raise DegenerateAxis(f"target shape {target_shape} has an empty axis")

    src = vol.data
    out_axes = []
    for n_out, n_src in zip(target_shape, vol.shape):
        coords = _axis_coords(n_out, n_src)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = coords - lo  # float64: the blend upcasts, output is cast back once
        out_axes.append((lo, hi, frac))

    (z_lo, z_hi, z_f), (y_lo, y_hi, y_f) = out_axes[0], out_axes[1]
    x_lo, x_hi, x_f = out_axes[2]

    # gather the 8 corner volumes with broadcasting, then blend axis by axis
    zl = z_lo[:, None, None]
    zh = z_hi[:, None, None]
    yl = y_lo[None, :, None]
    yh = y_hi[None, :, None]
    xl = x_lo[None, None, :]
    xh = x_hi[None, None, :]

    c000 = src[zl, yl, xl]
    c001 = src[zl, yl, xh]
    c010 = src[zl, yh, xl]
    c011 = src[zl, yh, xh]
    c100 = src[zh, yl, xl]
    c101 = src[zh, yl, xh]
    c110 = src[zh, yh, xl]
    c111 = src[zh, yh, xh]

    fx = x_f[None, None, :]
    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    fy = y_f[None, :, None]
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    fz = z_f[:, None, None]
    out = c0 * (1 - fz) + c1 * fz

    spacing = tuple(
        sp * (n_src / n_out) for sp, n_src, n_out in zip(vol.spacing, vol.shape, target_shape)
    )
    resampled = Volume3D(
        shape=tuple(int(t) for t in target_shape),
        spacing=spacing,
        data=out.astype(np.float32, copy=False),
        affine=vol.affine,
    )
    return CanonicalVolume(
        volume=resampled,
        source_id=source_id,
        source_shape=vol.shape,
        source_spacing=vol.spacing,
    )


def normalize_intensity(canon: CanonicalVolume) -> CanonicalVolume:
    """Z-score over nonzero (foreground) voxels; background zeros stay zero.

    Degenerate foregrounds (empty, or spread below 1e-6) map to all zeros.
    """
    data = canon.volume.data
    fg = data != 0
    out = np.zeros_like(data)
    if fg.any():
        vals = data[fg]
        mu = float(vals.mean(dtype=np.float64))
        sigma = float(vals.std(dtype=np.float64))  # population std
        if sigma >= 1e-6:
            out[fg] = (vals - np.float32(mu)) / np.float32(sigma)
    normalized = Volume3D(
        shape=canon.volume.shape,
        spacing=canon.volume.spacing,
        data=out,
        affine=canon.volume.affine,
    )
    return CanonicalVolume(
        volume=normalized,
        source_id=canon.source_id,
        source_shape=canon.source_shape,
        source_spacing=canon.source_spacing,
    )
