import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strokeprog.lesion import LesionStats
from strokeprog.tabular import (
    CSV_HEADER,
    NIHSS_ITEMS,
    AllMissing,
    BadHeader,
    ClinicalRecord,
    DuplicateFeatureName,
    EmptyFusion,
    OutOfRange,
    RowArity,
    TooFewSamples,
    clinical_feature_block,
    fuse,
    impute_median,
    parse_clinical_csv,
    standardize_apply,
    standardize_fit,
)


def record(pid="P1", **overrides) -> ClinicalRecord:
    base = dict(
        patient_id=pid,
        group_id=pid,
        age=70.0,
        sex=0.0,
        risk_flags=(0.0, 0.0, 1.0, 0.0),
        pre_mrs=0.0,
        nihss_j0=tuple(float(i % 3) for i in range(15)),
        nihss_j1=tuple(float(i % 2) for i in range(15)),
        mrs_90=1,
    )
    base.update(overrides)
    return ClinicalRecord(**base)


def csv_bytes(rows: list[dict]) -> bytes:
    lines = [",".join(CSV_HEADER)]
    for row in rows:
        lines.append(",".join(row.get(col, "") for col in CSV_HEADER))
    return ("\n".join(lines) + "\n").encode("utf-8")


def full_row(pid="P1", mrs="1", **overrides) -> dict:
    row = {col: "0" for col in CSV_HEADER}
    row.update(
        patient_id=pid,
        group_id=pid,
        age="70",
        sex="M",
        pre_mrs="0",
        mrs_90=mrs,
    )
    row.update(overrides)
    return row


class TestParse:
    def test_out_of_range_pre_mrs(self):
        with pytest.raises(OutOfRange):
            parse_clinical_csv(csv_bytes([full_row(pre_mrs="6")]))

    def test_label_rule(self):
        recs = parse_clinical_csv(csv_bytes([full_row("P1", mrs="1"), full_row("P2", mrs="2")]))
        assert recs[0].label == -1  # favorable
        assert recs[1].label == +1  # unfavorable

    def test_prevalence_counts(self):
        rows = [full_row(f"P{i}", mrs="1" if i < 41 else "3") for i in range(74)]
        recs = parse_clinical_csv(csv_bytes(rows))
        favorable = sum(1 for r in recs if r.label == -1)
        assert favorable == 41
        assert favorable / len(recs) == pytest.approx(0.554, abs=0.001)

    def test_bad_header(self):
        with pytest.raises(BadHeader):
            parse_clinical_csv(b"a,b,c\n1,2,3\n")

    def test_row_arity(self):
        blob = (",".join(CSV_HEADER) + "\nP1,P1,70\n").encode()
        with pytest.raises(RowArity):
            parse_clinical_csv(blob)

    def test_missing_cells_preserved(self):
        recs = parse_clinical_csv(csv_bytes([full_row(age="", sex="", mrs_90="")]))
        assert recs[0].age is None
        assert recs[0].sex is None
        assert recs[0].mrs_90 is None
        assert recs[0].label is None

    def test_bad_sex(self):
        with pytest.raises(OutOfRange):
            parse_clinical_csv(csv_bytes([full_row(sex="X")]))

    def test_nihss_range_enforced(self):
        with pytest.raises(OutOfRange):
            parse_clinical_csv(csv_bytes([full_row(**{"nihss_j0_1b_loc_questions": "3"})]))

    def test_group_id_defaults_to_patient(self):
        recs = parse_clinical_csv(csv_bytes([full_row(group_id="")]))
        assert recs[0].group_id == recs[0].patient_id

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=6))
    def test_label_rule_over_all_mrs(self, mrs):
        rec = record(mrs_90=mrs)
        assert rec.label == (-1 if mrs <= 1 else +1)


class TestImpute:
    def test_lower_median_convention(self):
        recs = [
            record("A", age=60.0),
            record("B", age=70.0),
            record("C", age=None),
        ]
        out = impute_median(recs, {"A", "B", "C"})
        assert out[2].age == 60.0  # lower median of {60, 70}

    def test_no_missing_identity(self):
        recs = [record("A"), record("B")]
        assert impute_median(recs, {"A", "B"}) == recs

    def test_validation_never_contributes(self):
        recs = [
            record("A", age=60.0),
            record("B", age=62.0),
            record("C", age=130.0),  # validation row, extreme age
            record("D", age=None),
        ]
        out = impute_median(recs, {"A", "B", "D"})
        assert out[3].age == 60.0  # median over train only
        mutated = [
            record("A", age=60.0),
            record("B", age=62.0),
            record("C", age=20.0),
            record("D", age=None),
        ]
        out2 = impute_median(mutated, {"A", "B", "D"})
        assert out2[3].age == out[3].age

    def test_all_missing_field(self):
        recs = [record("A", age=None), record("B", age=None)]
        with pytest.raises(AllMissing):
            impute_median(recs, {"A", "B"})

    def test_labels_never_imputed(self):
        recs = [record("A", mrs_90=None), record("B")]
        out = impute_median(recs, {"A", "B"})
        assert out[0].mrs_90 is None

    def test_empty_train_set(self):
        with pytest.raises(TooFewSamples):
            impute_median([record("A")], set())


def lesion(volume: float) -> LesionStats:
    import math

    return LesionStats(
        n_voxels=int(volume),
        voxel_volume_mm3=1.0,
        volume_mm3=volume,
        log_volume=math.log1p(volume),
        threshold_used=620.0,
    )


class TestFuse:
    def test_dimension_arithmetic(self):
        rec = record()
        clin = clinical_feature_block(rec, nihss_days=("j0",))
        assert len(clin[0]) == 22
        mri = (tuple(f"MRI_feat_{i}" for i in range(128)), np.zeros(128))
        fv = fuse("P1", -1, clinical=clin, mri_j1=mri, lesion_j1=lesion(210.0))
        assert len(fv.names) == 22 + 128 + 1
        assert fv.names[-1] == "lesion_logvol_J1"
        assert fv.blocks == frozenset({"clinical", "mri_j1", "lesion_j1"})

    def test_block_order_fixed(self):
        rec = record()
        clin = clinical_feature_block(rec, nihss_days=("j0",))
        mri = (("MRI_feat_0",), np.ones(1))
        fv = fuse("P1", +1, clinical=clin, mri_j0=mri, lesion_j0=lesion(10.0))
        assert fv.names[0] == "age"
        assert fv.names[22] == "MRI_feat_0"
        assert fv.names[23] == "lesion_logvol_J0"

    def test_mri_only(self):
        mri = (tuple(f"MRI_feat_{i}" for i in range(8)), np.arange(8.0))
        fv = fuse("P1", -1, mri_j1=mri)
        assert all(n.startswith("MRI_feat_") for n in fv.names)

    def test_both_timepoints_prefixed(self):
        mri = (("MRI_feat_0",), np.ones(1))
        fv = fuse("P1", -1, mri_j0=mri, mri_j1=mri)
        assert fv.names == ("J0_MRI_feat_0", "J1_MRI_feat_0")

    def test_duplicate_names_rejected(self):
        mri = (("MRI_feat_0", "MRI_feat_0"), np.ones(2))
        with pytest.raises(DuplicateFeatureName):
            fuse("P1", -1, mri_j1=mri)

    def test_empty_fusion(self):
        with pytest.raises(EmptyFusion):
            fuse("P1", -1)

    def test_deterministic(self):
        rec = record()
        clin = clinical_feature_block(rec)
        a = fuse("P1", -1, clinical=clin, lesion_j0=lesion(5.0))
        b = fuse("P1", -1, clinical=clin, lesion_j0=lesion(5.0))
        assert a.names == b.names
        np.testing.assert_array_equal(a.values, b.values)

    def test_nihss_days_both(self):
        clin = clinical_feature_block(record(), nihss_days=("j0", "j1"))
        assert len(clin[0]) == 37
        assert sum(1 for n in clin[0] if n.startswith("nihss_j1_")) == len(NIHSS_ITEMS)


class TestStandardize:
    def test_fit_apply_arithmetic(self):
        train = np.array([[0.0], [2.0]])
        scaler = standardize_fit(train)
        assert scaler.mean[0] == 1.0
        assert scaler.std[0] == 1.0  # population std of {0, 2}
        assert standardize_apply(scaler, np.array([[3.0]]))[0, 0] == 2.0

    def test_constant_feature_clamped(self):
        train = np.array([[5.0, 1.0], [5.0, 3.0]])
        scaler = standardize_fit(train)
        out = standardize_apply(scaler, train)
        np.testing.assert_array_equal(out[:, 0], [0.0, 0.0])

    def test_self_application_standardizes(self, rng):
        x = rng.normal(loc=3.0, scale=5.0, size=(50, 4))
        scaler = standardize_fit(x)
        z = standardize_apply(scaler, x)
        assert np.max(np.abs(z.mean(axis=0))) < 1e-10
        assert np.max(np.abs(z.std(axis=0) - 1.0)) < 1e-10

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            standardize_fit(np.ones((1, 3)))
