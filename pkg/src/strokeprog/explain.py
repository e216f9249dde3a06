"""Model interpretation: coefficient pull-back and occlusion sensitivity.

Linear-model importance maps the SVM hyperplane from PCA space back to the
standardized input features (beta = components^T w), so clinical and MRI
contributions rank on one scale. Volume-level saliency slides an occlusion
window over the CNN input and records how the decision score moves; the
clinical and lesion blocks stay fixed so the map isolates the imaging
pathway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .inference3d import FrozenNetwork, ProjectionHead, forward_embed, project
from .model import ModelBundle, predict
from .tabular import FeatureVector


class ExplainError(PipelineError):
    pass


class WindowTooLarge(ExplainError):
    pass


@dataclass(frozen=True)
class ImportanceTable:
    entries: tuple[tuple[str, float], ...]  # (feature name, signed weight), |w| desc

    def as_csv(self) -> str:
        lines = ["feature,weight"]
        lines += [f"{name},{weight!r}" for name, weight in self.entries]
        return "\n".join(lines) + "\n"


def importance(bundle: ModelBundle) -> ImportanceTable:
    """Signed per-feature weights in standardized feature space."""
    beta = bundle.pca.components.T @ bundle.svm.w
    pairs = list(zip(bundle.feature_names, beta))
    pairs.sort(key=lambda p: (-abs(p[1]), p[0]))
    return ImportanceTable(entries=tuple((name, float(w)) for name, w in pairs))


@dataclass(frozen=True)
class SaliencyVolume:
    deltas: np.ndarray  # (gz, gy, gx) decision-score deltas per window placement
    window: tuple[int, int, int]
    stride: tuple[int, int, int]
    fill: float

    def per_slice_maxima(self) -> np.ndarray:
        return np.max(np.abs(self.deltas), axis=(1, 2))


def _grid_dim(n: int, w: int, s: int) -> int:
    return (n - w) // s + 1


def occlusion_saliency(
    net: FrozenNetwork,
    head: ProjectionHead,
    bundle: ModelBundle,
    vol,
    base_features: FeatureVector,
    window: tuple[int, int, int] = (4, 32, 32),
    stride: tuple[int, int, int] = (4, 32, 32),
    fill: float = 0.0,
) -> SaliencyVolume:
    """Decision-score change when each window placement is filled with ``fill``.

    ``base_features`` is the patient's fused vector; only its MRI block is
    recomputed per placement. The MRI block must be present and derived from
    ``vol`` (plain single-time-point naming).
    """
    data = np.ascontiguousarray(getattr(vol, "data", vol), dtype=np.float32)
    if any(w > n for w, n in zip(window, data.shape)):
        raise WindowTooLarge(f"window {window} exceeds volume shape {data.shape}")
    if any(w < 1 or s < 1 for w, s in zip(window, stride)):
        raise ExplainError("window and stride must be positive")

    mri_slots = [i for i, n in enumerate(base_features.names) if n.startswith("MRI_feat_")]
    if len(mri_slots) != head.target_dim:
        raise ExplainError(
            "base feature vector does not carry a plain MRI block matching the head"
        )

    def score_with_volume(v: np.ndarray) -> float:
        mri = project(forward_embed(net, v), head)
        values = base_features.values.copy()
        values[mri_slots] = mri
        fv = FeatureVector(
            patient_id=base_features.patient_id,
            names=base_features.names,
            values=values,
            label=base_features.label,
            blocks=base_features.blocks,
        )
        return predict(bundle, fv).score

    base_score = score_with_volume(data)
    grid = tuple(_grid_dim(n, w, s) for n, w, s in zip(data.shape, window, stride))
    deltas = np.zeros(grid, dtype=np.float64)
    for gz in range(grid[0]):
        z0 = gz * stride[0]
        for gy in range(grid[1]):
            y0 = gy * stride[1]
            for gx in range(grid[2]):
                x0 = gx * stride[2]
                occluded = data.copy()
                occluded[
                    z0 : z0 + window[0], y0 : y0 + window[1], x0 : x0 + window[2]
                ] = np.float32(fill)
                deltas[gz, gy, gx] = score_with_volume(occluded) - base_score
    return SaliencyVolume(deltas=deltas, window=tuple(window), stride=tuple(stride), fill=float(fill))
