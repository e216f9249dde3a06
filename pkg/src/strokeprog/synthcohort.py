"""Deterministic synthetic cohort: paired phantom ADC volumes + clinical CSV.

Stands in for the unavailable patient registry so the full experiment grid
can run at desk scale. Every patient draws a latent severity s in [0,1];
outcome labels split the cohort at the empirical quantile matching the
configured favorable prevalence, so class counts are exact. Lesion size
tracks s through configurable signal strengths (day-1 stronger than
baseline by default), clinical fields are monotone noisy functions of s
with pure-noise distractors, and a ground-truth sidecar records what was
planted. All randomness flows from per-patient substreams of the spec
seed, so artifacts are reproducible bit for bit.

Phantom recipe: a smooth background in [700, 900] ADC units inside an
ellipsoidal brain, zero outside, and one darker ellipsoidal lesion ramping
from 300 at its core to 550 at its rim so both segmentation thresholds
(480, 620) bite.
"""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .tabular import CSV_HEADER, NIHSS_ITEMS, RISK_FLAGS

LESION_ADC_MIN = 300.0
LESION_ADC_MAX = 550.0
BACKGROUND_ADC_MIN = 700.0
BACKGROUND_ADC_MAX = 900.0

GROUND_TRUTH_HEADER = [
    "patient_id",
    "severity",
    "label",
    "mrs_90",
    "lesion_voxels_j0",
    "lesion_voxels_j1",
]

# motor arm/leg NIHSS items carry the planted clinical signal
_MOTOR_ITEMS = {"5a_motor_arm_right", "5b_motor_arm_left", "6a_motor_leg_right", "6b_motor_leg_left"}


class InvalidSpec(PipelineError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n: int = 74
    seed: int = 0
    prevalence_favorable: float = 0.554
    clinical_signal: float = 0.3
    lesion_j0_signal: float = 0.25
    lesion_j1_signal: float = 0.9
    volume_shape: tuple[int, int, int] = (24, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    noise: float = 0.08
    missing_rate: float = 0.03

    def __post_init__(self):
        if not 0.0 < self.prevalence_favorable < 1.0:
            raise InvalidSpec(f"prevalence must lie in (0,1), got {self.prevalence_favorable}")
        if self.n < 16:
            raise InvalidSpec(f"cohort needs at least 16 patients, got {self.n}")
        for name in ("clinical_signal", "lesion_j0_signal", "lesion_j1_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0,1], got {v}")
        if (
            len(self.volume_shape) != 3
            or self.volume_shape[0] < 16
            or any(d < 32 for d in self.volume_shape[1:])
        ):
            raise InvalidSpec(f"volume shape too small for phantoms: {self.volume_shape}")
        if self.missing_rate < 0 or self.missing_rate >= 1:
            raise InvalidSpec(f"missing_rate must lie in [0,1), got {self.missing_rate}")
        if self.noise < 0:
            raise InvalidSpec(f"noise must be nonnegative, got {self.noise}")


def ellipsoid_mask(
    shape: tuple[int, int, int],
    center: tuple[float, float, float],
    semi_axes: tuple[float, float, float],
) -> np.ndarray:
    """Lattice points (voxel centers) inside the closed ellipsoid."""
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    q = (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )
    return q <= 1.0


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    """Smooth random field in [0,1]: a handful of low-frequency cosine modes."""
    zz, yy, xx = np.meshgrid(
        *[np.linspace(0.0, 1.0, n, dtype=np.float64) for n in shape], indexing="ij"
    )
    field = np.zeros(shape, dtype=np.float64)
    for _ in range(4):
        freq = rng.uniform(0.3, 1.6, size=3)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2.0 * math.pi * (freq[0] * zz + freq[1] * yy + freq[2] * xx) + phase)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros(shape, dtype=np.float64)
    return (field - lo) / (hi - lo)


def render_phantom(
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    lesion_center: tuple[int, int, int],
    lesion_semi_axes: tuple[float, float, float],
) -> tuple[np.ndarray, int]:
    """One phantom volume; returns (float32 data, planted lesion voxel count)."""
    brain_semi = (shape[0] * 0.46, shape[1] * 0.46, shape[2] * 0.46)
    brain_center = ((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0)
    brain = ellipsoid_mask(shape, brain_center, brain_semi)

    data = np.zeros(shape, dtype=np.float64)
    background = BACKGROUND_ADC_MIN + (BACKGROUND_ADC_MAX - BACKGROUND_ADC_MIN) * _smooth_field(
        rng, shape
    )
    data[brain] = background[brain]

    lesion = ellipsoid_mask(shape, lesion_center, lesion_semi_axes)
    lesion &= brain
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    radial = np.sqrt(
        ((zz - lesion_center[0]) / lesion_semi_axes[0]) ** 2
        + ((yy - lesion_center[1]) / lesion_semi_axes[1]) ** 2
        + ((xx - lesion_center[2]) / lesion_semi_axes[2]) ** 2
    )
    ramp = LESION_ADC_MIN + (LESION_ADC_MAX - LESION_ADC_MIN) * np.clip(radial, 0.0, 1.0)
    data[lesion] = ramp[lesion]
    return data.astype(np.float32), int(lesion.sum())


def write_nifti(data: np.ndarray, spacing: tuple[float, float, float], gzipped: bool = True) -> bytes:
    """Serialize a (depth, height, width) float32 volume as NIfTI-1 bytes."""
    data = np.ascontiguousarray(data, dtype="<f4")
    nz, ny, nx = data.shape
    sz, sy, sx = spacing
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # datatype float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 0.0)  # scl_slope: no scaling
    struct.pack_into("<f", header, 116, 0.0)
    struct.pack_into("<h", header, 254, 1)  # sform_code
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, 0.0)
    header[344:348] = b"n+1\x00"
    payload = bytes(header) + b"\x00\x00\x00\x00" + data.tobytes()
    if not gzipped:
        return payload
    return gzip.compress(payload, compresslevel=6, mtime=0)


def _patient_rng(spec: CohortSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(spec.seed ^ index))


def _mix(signal: float, s: float, xi: float) -> float:
    return signal * s + (1.0 - signal) * xi


def _lesion_semi_axes(driver: float, shape: tuple[int, int, int]) -> tuple[float, float, float]:
    az = 3.0 + 2.0 * min(max(driver, 0.0), 1.0)
    az = min(az, 0.25 * shape[0])
    axy = min(2.8 * az, 0.22 * min(shape[1], shape[2]))
    return (az, axy, axy)


@dataclass
class PatientTruth:
    patient_id: str
    severity: float
    label_score: float  # severity + label noise; labels split on its quantile
    lesion_voxels: dict[str, int]
    mrs_90: int = -1


def generate(spec: CohortSpec, out_dir: str) -> dict:
    """Write the cohort under ``out_dir``: volumes/, clinical.csv,
    ground_truth.csv. Returns a small summary dict."""
    volumes_dir = os.path.join(out_dir, "volumes")
    os.makedirs(volumes_dir, exist_ok=True)

    n = spec.n
    ids = [f"P{i + 1:03d}" for i in range(n)]
    truths: list[PatientTruth] = []
    clinical_rows: list[dict[str, str]] = []

    for i, pid in enumerate(ids):
        rng = _patient_rng(spec, i)
        s = float(rng.uniform())
        label_score = s + spec.noise * float(rng.normal())

        lesion_voxels = {}
        for tp, signal in (("J0", spec.lesion_j0_signal), ("J1", spec.lesion_j1_signal)):
            driver = _mix(signal, s, float(rng.uniform()))
            semi = _lesion_semi_axes(driver, spec.volume_shape)
            margin = tuple(int(math.ceil(a)) + 2 for a in semi)
            center = tuple(
                int(rng.integers(margin[ax], spec.volume_shape[ax] - margin[ax]))
                for ax in range(3)
            )
            data, count = render_phantom(rng, spec.volume_shape, center, semi)
            path = os.path.join(volumes_dir, f"{pid}_{tp}.nii.gz")
            with open(path, "wb") as fh:
                fh.write(write_nifti(data, spec.spacing))
            lesion_voxels[tp] = count

        row = _clinical_row(spec, rng, pid, s)
        clinical_rows.append(row)
        truths.append(
            PatientTruth(
                patient_id=pid,
                severity=s,
                label_score=label_score,
                lesion_voxels=lesion_voxels,
            )
        )

    # favorable = the round(prevalence * n) smallest label scores, exactly
    n_fav = round(spec.prevalence_favorable * n)
    order = sorted(range(n), key=lambda idx: (truths[idx].label_score, idx))
    favorable = set(order[:n_fav])
    for i, truth in enumerate(truths):
        rng = np.random.default_rng(np.random.PCG64(spec.seed ^ i ^ 0x5EED))
        if i in favorable:
            truth.mrs_90 = 0 if truth.severity < 0.35 else 1
        else:
            truth.mrs_90 = 2 + min(4, int(truth.severity * 4.0 + rng.uniform()))
        clinical_rows[i]["mrs_90"] = str(truth.mrs_90)

    clinical_path = os.path.join(out_dir, "clinical.csv")
    with open(clinical_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        writer.writeheader()
        writer.writerows(clinical_rows)

    truth_path = os.path.join(out_dir, "ground_truth.csv")
    with open(truth_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROUND_TRUTH_HEADER)
        for t in truths:
            writer.writerow(
                [
                    t.patient_id,
                    repr(t.severity),
                    "favorable" if t.mrs_90 <= 1 else "unfavorable",
                    t.mrs_90,
                    t.lesion_voxels["J0"],
                    t.lesion_voxels["J1"],
                ]
            )

    return {
        "n": n,
        "volumes_dir": volumes_dir,
        "clinical_csv": clinical_path,
        "ground_truth_csv": truth_path,
        "n_favorable": n_fav,
        "n_unfavorable": n - n_fav,
    }


def _clinical_row(spec: CohortSpec, rng: np.random.Generator, pid: str, s: float) -> dict[str, str]:
    c = spec.clinical_signal
    missing = lambda: spec.missing_rate > 0 and rng.uniform() < spec.missing_rate  # noqa: E731

    row = {k: "" for k in CSV_HEADER}
    row["patient_id"] = pid
    row["group_id"] = pid

    age = 45.0 + 40.0 * min(max(_mix(c, s, float(rng.uniform())), 0.0), 1.0)
    row["age"] = "" if missing() else f"{age:.1f}"
    row["sex"] = "" if missing() else ("F" if rng.uniform() < 0.5 else "M")
    for flag in RISK_FLAGS:  # pure-noise distractors
        row[flag] = "" if missing() else str(int(rng.uniform() < 0.35))
    pre = int(rng.uniform() < 0.25) + int(rng.uniform() < 0.1)
    row["pre_mrs"] = "" if missing() else str(pre)

    for day, attenuation in (("j0", 1.0), ("j1", 0.85)):
        for item, mx in NIHSS_ITEMS:
            # motor drift items track severity; the rest are pure-noise distractors
            strength = c if item in _MOTOR_ITEMS else 0.0
            level = min(max(_mix(strength, s * attenuation, float(rng.uniform())), 0.0), 1.0)
            value = int(round(mx * level))
            row[f"nihss_{day}_{item}"] = "" if missing() else str(value)
    return row
