import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adace.trial_data import (CsvParseError, SubjectRecord, TrialDataset,
                              adherence, load_csv, save_csv, validate)


def record(i_flags, z, y, sid="s1", arm=0, x=(1.0,)):
    return SubjectRecord(sid, arm, tuple(x), tuple(z), tuple(i_flags), y)


def one_record_dataset(rec):
    return TrialDataset.from_records([rec])


class TestValidate:
    def test_fully_adherent_completer(self):
        ds = one_record_dataset(record((1, 1, 1), (0.1, 0.2, 0.3), 1.5))
        assert validate(ds) == []

    def test_data_present_after_dropout(self):
        ds = one_record_dataset(record((1, 0, None), (0.1, 0.2, 0.3), None))
        violations = validate(ds)
        assert len(violations) == 1
        assert violations[0].rule == "z-after-dropout"
        assert violations[0].subject_id == "s1"

    def test_non_monotone_adherence(self):
        ds = one_record_dataset(record((0, 1, 1), (0.1, None, None), None))
        violations = validate(ds)
        assert [v.rule for v in violations] == ["non-monotone-adherence"]

    def test_missing_covariate_flagged(self):
        ds = one_record_dataset(
            SubjectRecord("s1", 0, (None,), (0.1, None, None), (0, 0, 0), None))
        assert [v.rule for v in validate(ds)] == ["x-missing"]

    def test_missing_outcome_for_adherer(self):
        ds = one_record_dataset(record((1, 1, 1), (0.1, 0.2, 0.3), None))
        assert [v.rule for v in validate(ds)] == ["y-missing-adherent"]

    def test_outcome_present_for_dropout(self):
        ds = one_record_dataset(record((1, 1, 0), (0.1, 0.2, 0.3), 2.0))
        assert [v.rule for v in validate(ds)] == ["y-after-dropout"]


class TestAdherence:
    @pytest.mark.parametrize("flags,expected", [
        ((1, 1, 1), 1),
        ((1, 1, 0), 0),
        ((1, 0, 0), 0),
        ((1, 0, None), 0),
        ((0, None, None), 0),
    ])
    def test_product(self, flags, expected):
        assert adherence(record(flags, (0.1, 0.2, 0.3), None)) == expected

    def test_missing_first_indicator_is_an_error(self):
        with pytest.raises(ValueError, match="first period"):
            adherence(record((None, 1, 1), (0.1, 0.2, 0.3), None))


class TestContainer:
    def test_duplicate_ids_rejected(self):
        recs = [record((1, 1, 1), (0.1, 0.2, 0.3), 1.0, sid="dup"),
                record((1, 1, 1), (0.1, 0.2, 0.3), 1.0, sid="dup")]
        with pytest.raises(ValueError, match="unique"):
            TrialDataset.from_records(recs)

    def test_arm_values_checked(self):
        with pytest.raises(ValueError, match="arm"):
            one_record_dataset(record((1, 1, 1), (0.1, 0.2, 0.3), 1.0, arm=2))

    def test_counts(self):
        recs = [record((1, 1, 1), (0.1, 0.2, 0.3), 1.0, sid=f"s{j}", arm=j % 2)
                for j in range(5)]
        ds = TrialDataset.from_records(recs)
        assert (ds.n0, ds.n1, ds.p, ds.K) == (3, 2, 1, 4)
        assert ds.n0 + ds.n1 == len(ds.records)


CSV_TOY = """subject_id,arm,x1,z1,z2,z3,i1,i2,i3,y
a,0,7.5,2.0,1.9,1.8,1,1,1,0.3
b,0,8.1,2.2,2.1,,1,0,0,
c,1,7.9,1.5,1.2,1.0,1,1,1,-0.9
d,1,8.4,1.6,,,0,0,0,
"""


class TestCsv:
    def test_toy_file(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text(CSV_TOY)
        ds = load_csv(path)
        assert ds.n0 + ds.n1 == 4
        assert (ds.p, ds.K) == (1, 4)
        assert ds.records[1].y is None
        assert ds.records[1].z == (2.2, 2.1, None)
        assert validate(ds) == []

    def test_bad_arm_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(CSV_TOY.replace("d,1,", "d,2,"))
        with pytest.raises(CsvParseError, match="line 5"):
            load_csv(path)

    def test_non_numeric_covariate_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(CSV_TOY.replace("b,0,8.1", "b,0,oops"))
        with pytest.raises(CsvParseError, match="line 3"):
            load_csv(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(CSV_TOY.replace("c,1,7.9,1.5", "c,1,7.9"))
        with pytest.raises(CsvParseError, match="line 4"):
            load_csv(path)

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(CSV_TOY.replace("subject_id", "subject"))
        with pytest.raises(CsvParseError, match="line 1"):
            load_csv(path)


# hypothesis strategy: structurally valid records with exact-roundtrip floats
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def valid_datasets(draw):
    p = draw(st.integers(1, 2))
    k1 = draw(st.integers(1, 3))
    n = draw(st.integers(1, 8))
    records = []
    for j in range(n):
        arm = draw(st.integers(0, 1))
        x = tuple(draw(finite) for _ in range(p))
        periods_adherent = draw(st.integers(0, k1))
        i_flags = tuple(1 if k < periods_adherent else 0 for k in range(k1))
        z = tuple(draw(finite) if k <= periods_adherent and k < k1 else None
                  for k in range(k1))
        y = draw(finite) if periods_adherent == k1 else None
        records.append(SubjectRecord(f"s{j}", arm, x, z, i_flags, y))
    return TrialDataset.from_records(records)


@settings(max_examples=60, deadline=None)
@given(valid_datasets())
def test_valid_datasets_validate_clean(ds):
    assert validate(ds) == []
    for rec in ds.records:
        assert (adherence(rec) == 1) == (rec.y is not None)


@settings(max_examples=60, deadline=None)
@given(valid_datasets())
def test_csv_round_trip_is_identity(ds):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ds.csv")
        save_csv(ds, path)
        assert load_csv(path) == ds


def test_round_trip_preserves_missing(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text(CSV_TOY)
    ds = load_csv(path)
    out = tmp_path / "copy.csv"
    save_csv(ds, out)
    assert load_csv(out) == ds
    assert np.isnan(ds.y[1])
