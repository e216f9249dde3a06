"""Clinical data ingestion, imputation, outcome labels, and feature fusion.

One CSV row per patient. Empty cells are missing values; they survive
parsing and are filled by train-fold medians just before modeling, so no
validation statistic can leak into a fit. The outcome label dichotomizes
the three-month disability score: favorable iff mrs_90 <= 1; the positive
class throughout the pipeline is the unfavorable outcome.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PipelineError
from .lesion import LesionStats

FAVORABLE = -1  # mrs_90 <= 1
UNFAVORABLE = +1  # the positive class

# NIHSS items with their maximal legal scores.
NIHSS_ITEMS = (
    ("1a_loc", 3),
    ("1b_loc_questions", 2),
    ("1c_loc_commands", 2),
    ("2_gaze", 2),
    ("3_visual_fields", 3),
    ("4_facial_palsy", 3),
    ("5a_motor_arm_right", 4),
    ("5b_motor_arm_left", 4),
    ("6a_motor_leg_right", 4),
    ("6b_motor_leg_left", 4),
    ("7_limb_ataxia", 2),
    ("8_sensory", 2),
    ("9_language", 3),
    ("10_dysarthria", 2),
    ("11_extinction", 2),
)

RISK_FLAGS = ("hypertension", "diabetes", "atrial_fibrillation", "smoking")

CSV_HEADER = (
    ["patient_id", "group_id", "age", "sex", *RISK_FLAGS, "pre_mrs"]
    + [f"nihss_j0_{item}" for item, _ in NIHSS_ITEMS]
    + [f"nihss_j1_{item}" for item, _ in NIHSS_ITEMS]
    + ["mrs_90"]
)


class TabularError(PipelineError):
    pass


class BadHeader(TabularError):
    pass


class RowArity(TabularError):
    pass


class OutOfRange(TabularError):
    def __init__(self, fieldname, row, value):
        super().__init__(f"row {row}: {fieldname}={value!r} out of range")
        self.fieldname = fieldname
        self.row = row


class AllMissing(TabularError):
    def __init__(self, fieldname):
        super().__init__(f"field {fieldname!r} is missing for every training record")
        self.fieldname = fieldname


class EmptyFusion(TabularError):
    pass


class DuplicateFeatureName(TabularError):
    pass


class TooFewSamples(TabularError):
    pass


class NameMismatch(TabularError):
    pass


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    group_id: str
    age: float | None
    sex: float | None  # 0 = M, 1 = F
    risk_flags: tuple[float | None, ...]  # order matches RISK_FLAGS
    pre_mrs: float | None
    nihss_j0: tuple[float | None, ...]  # order matches NIHSS_ITEMS
    nihss_j1: tuple[float | None, ...]
    mrs_90: int | None

    @property
    def label(self) -> int | None:
        """+1 (unfavorable) when mrs_90 > 1, -1 (favorable) when <= 1."""
        if self.mrs_90 is None:
            return None
        return FAVORABLE if self.mrs_90 <= 1 else UNFAVORABLE

    def numeric_fields(self) -> dict[str, float | None]:
        out = {"age": self.age, "sex": self.sex, "pre_mrs": self.pre_mrs}
        for name, value in zip(RISK_FLAGS, self.risk_flags):
            out[name] = value
        for (item, _), value in zip(NIHSS_ITEMS, self.nihss_j0):
            out[f"nihss_j0_{item}"] = value
        for (item, _), value in zip(NIHSS_ITEMS, self.nihss_j1):
            out[f"nihss_j1_{item}"] = value
        return out


def _parse_cell(raw: str, fieldname: str, row: int, lo: float, hi: float):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        value = float(raw)
    except ValueError:
        raise OutOfRange(fieldname, row, raw) from None
    if not np.isfinite(value) or value < lo or value > hi:
        raise OutOfRange(fieldname, row, raw)
    return value


def parse_clinical_csv(data: bytes) -> list[ClinicalRecord]:
    """Parse the documented one-row-per-patient CSV into typed records."""
    text = data.decode("utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise BadHeader("empty CSV") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise BadHeader(f"header does not match the documented schema (got {header[:4]}...)")

    records = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(cell.strip() == "" for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise RowArity(f"row {row_no}: expected {len(CSV_HEADER)} cells, got {len(row)}")
        cells = dict(zip(CSV_HEADER, row))
        patient_id = cells["patient_id"].strip()
        if not patient_id:
            raise OutOfRange("patient_id", row_no, "")
        group_id = cells["group_id"].strip() or patient_id

        sex_raw = cells["sex"].strip()
        if sex_raw == "":
            sex = None
        elif sex_raw.upper() == "M":
            sex = 0.0
        elif sex_raw.upper() == "F":
            sex = 1.0
        else:
            raise OutOfRange("sex", row_no, sex_raw)

        age = _parse_cell(cells["age"], "age", row_no, 0.0, 130.0)
        flags = tuple(_parse_cell(cells[f], f, row_no, 0, 1) for f in RISK_FLAGS)
        for f, v in zip(RISK_FLAGS, flags):
            if v is not None and v not in (0.0, 1.0):
                raise OutOfRange(f, row_no, v)
        pre_mrs = _parse_cell(cells["pre_mrs"], "pre_mrs", row_no, 0, 5)
        nihss_j0 = tuple(
            _parse_cell(cells[f"nihss_j0_{item}"], f"nihss_j0_{item}", row_no, 0, mx)
            for item, mx in NIHSS_ITEMS
        )
        nihss_j1 = tuple(
            _parse_cell(cells[f"nihss_j1_{item}"], f"nihss_j1_{item}", row_no, 0, mx)
            for item, mx in NIHSS_ITEMS
        )
        mrs_raw = _parse_cell(cells["mrs_90"], "mrs_90", row_no, 0, 6)
        mrs_90 = None if mrs_raw is None else int(mrs_raw)

        records.append(
            ClinicalRecord(
                patient_id=patient_id,
                group_id=group_id,
                age=age,
                sex=sex,
                risk_flags=flags,
                pre_mrs=pre_mrs,
                nihss_j0=nihss_j0,
                nihss_j1=nihss_j1,
                mrs_90=mrs_90,
            )
        )
    return records


def impute_median(
    records: list[ClinicalRecord], train_ids: set[str] | list[str]
) -> list[ClinicalRecord]:
    """Fill missing numeric fields with train-only medians (lower median).

    Labels are never imputed. Raises AllMissing when a field has no observed
    value among the training records.
    """
    train_ids = set(train_ids)
    if not train_ids:
        raise TooFewSamples("impute_median needs a nonempty training set")
    train = [r for r in records if r.patient_id in train_ids]

    field_names = list(records[0].numeric_fields()) if records else []
    medians = {}
    for name in field_names:
        observed = [r.numeric_fields()[name] for r in train]
        observed = [v for v in observed if v is not None]
        if not observed:
            raise AllMissing(name)
        medians[name] = sorted(observed)[(len(observed) - 1) // 2]

    def fill(record: ClinicalRecord) -> ClinicalRecord:
        vals = record.numeric_fields()
        if all(v is not None for v in vals.values()):
            return record
        return replace(
            record,
            age=vals["age"] if vals["age"] is not None else medians["age"],
            sex=vals["sex"] if vals["sex"] is not None else medians["sex"],
            risk_flags=tuple(
                vals[f] if vals[f] is not None else medians[f] for f in RISK_FLAGS
            ),
            pre_mrs=vals["pre_mrs"] if vals["pre_mrs"] is not None else medians["pre_mrs"],
            nihss_j0=tuple(
                vals[f"nihss_j0_{item}"]
                if vals[f"nihss_j0_{item}"] is not None
                else medians[f"nihss_j0_{item}"]
                for item, _ in NIHSS_ITEMS
            ),
            nihss_j1=tuple(
                vals[f"nihss_j1_{item}"]
                if vals[f"nihss_j1_{item}"] is not None
                else medians[f"nihss_j1_{item}"]
                for item, _ in NIHSS_ITEMS
            ),
        )

    return [fill(r) for r in records]


def clinical_feature_block(
    record: ClinicalRecord, nihss_days: tuple[str, ...] = ("j0", "j1")
) -> tuple[tuple[str, ...], np.ndarray]:
    """Named clinical features: demographics, risk flags, pre-mRS, NIHSS.

    ``nihss_days`` picks which day's subscores join the vector ("j0", "j1",
    or both). All values must be imputed already.
    """
    names = ["age", "sex", *RISK_FLAGS, "pre_mrs"]
    values = [record.age, record.sex, *record.risk_flags, record.pre_mrs]
    for day in nihss_days:
        if day not in ("j0", "j1"):
            raise TabularError(f"unknown NIHSS day {day!r}")
        scores = record.nihss_j0 if day == "j0" else record.nihss_j1
        names += [f"nihss_{day}_{item}" for item, _ in NIHSS_ITEMS]
        values += list(scores)
    if any(v is None for v in values):
        raise TabularError(
            f"patient {record.patient_id}: clinical features still missing; impute first"
        )
    return tuple(names), np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class FeatureVector:
    patient_id: str
    names: tuple[str, ...]
    values: np.ndarray
    label: int | None
    blocks: frozenset[str] = field(default_factory=frozenset)


def fuse(
    patient_id: str,
    label: int | None,
    clinical: tuple[tuple[str, ...], np.ndarray] | None = None,
    mri_j0: tuple[tuple[str, ...], np.ndarray] | None = None,
    mri_j1: tuple[tuple[str, ...], np.ndarray] | None = None,
    lesion_j0: LesionStats | None = None,
    lesion_j1: LesionStats | None = None,
) -> FeatureVector:
    """Concatenate feature blocks in the fixed order clinical, MRI, lesion.

    When both MRI time points are present their names get J0_/J1_ prefixes
    to stay unique; a single MRI block keeps its plain names.
    """
    names: list[str] = []
    values: list[float] = []
    blocks = set()

    if clinical is not None:
        names += list(clinical[0])
        values += list(clinical[1])
        blocks.add("clinical")

    both_mri = mri_j0 is not None and mri_j1 is not None
    for key, block in (("mri_j0", mri_j0), ("mri_j1", mri_j1)):
        if block is None:
            continue
        block_names, block_values = block
        if both_mri:
            tag = "J0_" if key == "mri_j0" else "J1_"
            block_names = tuple(tag + n for n in block_names)
        names += list(block_names)
        values += list(block_values)
        blocks.add(key)

    if lesion_j0 is not None:
        names.append("lesion_logvol_J0")
        values.append(lesion_j0.log_volume)
        blocks.add("lesion_j0")
    if lesion_j1 is not None:
        names.append("lesion_logvol_J1")
        values.append(lesion_j1.log_volume)
        blocks.add("lesion_j1")

    if not blocks:
        raise EmptyFusion("at least one feature block is required")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateFeatureName(f"duplicate feature names {dupes}")
    return FeatureVector(
        patient_id=patient_id,
        names=tuple(names),
        values=np.asarray(values, dtype=np.float64),
        label=label,
        blocks=frozenset(blocks),
    )


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray  # degenerate columns carry std 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def standardize_fit(train: np.ndarray) -> Scaler:
    """Per-feature z-scoring statistics from training rows (population std)."""
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] < 2:
        raise TooFewSamples("standardize_fit needs at least 2 training rows")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Scaler(mean=mean, std=std)


def standardize_apply(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != scaler.mean.shape[0]:
        raise NameMismatch(
            f"feature count {x.shape[-1]} does not match the fitted scaler ({scaler.mean.shape[0]})"
        )
    return scaler.apply(x)
