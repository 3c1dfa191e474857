import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contambias.data import (
    CATEGORICAL,
    CONTINUOUS,
    Dataset,
    DesignSpec,
    build_design,
    cell_counts,
    control_block,
    decode_treatments,
    encode_treatments,
    load_csv,
    stratum_index,
)
from contambias.exceptions import (
    EmptyAfterFiltering,
    MissingColumn,
    RankDeficient,
    SingletonArm,
    ValidationError,
)
from contambias.regress import ols_fit

from conftest import strata_dataset


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadCSV:
    def test_three_row_file(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,control\n2,small\n3,aide\n")
        ds = load_csv(p, "y", "arm", [], [], control_arm="control")
        assert ds.n == 3
        assert ds.n_treatments == 2
        assert ds.arm_names[0] == "control"

    def test_missing_row_dropped(self, tmp_path, caplog):
        p = _write(tmp_path, "y,arm,w\n1,0,a\n,1,a\n2,1,b\n3,0,b\n4,1,a\n")
        with caplog.at_level(logging.WARNING):
            ds = load_csv(p, "y", "arm", ["w"], [CATEGORICAL])
        assert ds.n == 4
        assert ds.n_dropped == 1
        assert any("1" in r.message for r in caplog.records)

    def test_missing_column(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,0\n2,1\n")
        with pytest.raises(MissingColumn):
            load_csv(p, "y", "arm", ["school"], [CATEGORICAL])

    def test_empty_after_filtering(self, tmp_path):
        p = _write(tmp_path, "y,arm\n,0\n,1\n")
        with pytest.raises(EmptyAfterFiltering):
            load_csv(p, "y", "arm", [], [])

    def test_singleton_arm_with_threshold(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,0\n2,0\n3,1\n4,1\n5,2\n")
        with pytest.raises(SingletonArm):
            load_csv(p, "y", "arm", [], [], min_arm_size=2)
        assert load_csv(p, "y", "arm", [], []).n == 5

    def test_non_numeric_outcome(self, tmp_path):
        p = _write(tmp_path, "y,arm\nabc,0\n2,1\n")
        with pytest.raises(ValidationError):
            load_csv(p, "y", "arm", [], [])

    def test_control_arm_mapped_to_zero(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,b\n2,a\n3,ctl\n4,b\n")
        ds = load_csv(p, "y", "arm", [], [], control_arm="ctl")
        assert ds.arm_names == ("ctl", "a", "b")
        np.testing.assert_array_equal(ds.treatment, [2, 1, 0, 2])

    def test_arm_order_override(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,small\n2,aide\n3,regular\n")
        ds = load_csv(p, "y", "arm", [], [], control_arm="regular", arm_order=["small", "aide"])
        assert ds.arm_names == ("regular", "small", "aide")

    def test_unknown_control_arm(self, tmp_path):
        p = _write(tmp_path, "y,arm\n1,a\n2,b\n")
        with pytest.raises(ValidationError):
            load_csv(p, "y", "arm", [], [], control_arm="zzz")

    def test_continuous_control(self, tmp_path):
        p = _write(tmp_path, "y,arm,x\n1,0,0.5\n2,1,1.5\n3,1,-2\n")
        ds = load_csv(p, "y", "arm", ["x"], [CONTINUOUS])
        np.testing.assert_allclose(ds.controls[:, 0], [0.5, 1.5, -2])
        assert not ds.all_categorical

    def test_round_trip_frame(self, tmp_path):
        p = _write(tmp_path, "y,arm,w\n1,0,a\n2,1,b\n3,1,a\n4,0,b\n")
        ds = load_csv(p, "y", "arm", ["w"], [CATEGORICAL])
        df = ds.to_frame()
        assert list(df["w"]) == ["a", "b", "a", "b"]
        assert list(df["treatment"]) == ["0", "1", "1", "0"]


class TestDataset:
    def test_every_arm_must_appear(self):
        with pytest.raises(SingletonArm):
            Dataset(np.zeros(3), [0, 0, 2], np.zeros((3, 0)), arm_names=("a", "b", "c"))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            Dataset(np.zeros(3), [0, 1], np.zeros((3, 0)))

    def test_from_arrays_defaults(self):
        ds = Dataset.from_arrays([1.0, 2, 3, 4], [0, 1, 2, 1], [["a"], ["b"], ["a"], ["b"]])
        assert ds.n_treatments == 2
        assert ds.control_kinds == (CATEGORICAL,)
        np.testing.assert_array_equal(ds.arm_counts, [1, 2, 1])


class TestEncoding:
    def test_small_example(self):
        ds = Dataset(np.zeros(3), [0, 1, 2], np.zeros((3, 0)), arm_names=("0", "1", "2"))
        np.testing.assert_array_equal(encode_treatments(ds), [[0, 0], [1, 0], [0, 1]])

    def test_all_control_rows(self):
        ds = Dataset(np.zeros(4), [0, 0, 0, 1], np.zeros((4, 0)), arm_names=("0", "1"))
        X = encode_treatments(ds)[:3]
        np.testing.assert_array_equal(X, np.zeros((3, 1)))

    def test_column_means_are_shares(self, rng):
        ds = strata_dataset(rng)
        X = encode_treatments(ds)
        np.testing.assert_allclose(X.mean(axis=0), ds.arm_counts[1:] / ds.n)
        assert set(X.sum(axis=1)) <= {0.0, 1.0}

    @given(st.lists(st.integers(0, 4), min_size=5, max_size=40))
    def test_round_trip(self, d):
        d = np.array(d + [0, 1, 2, 3, 4])
        ds = Dataset(np.zeros(d.size), d, np.zeros((d.size, 0)),
                     arm_names=tuple("abcde"))
        np.testing.assert_array_equal(decode_treatments(encode_treatments(ds)), d)


def _two_strata_three_arms():
    W = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1])
    D = np.array([0, 1, 2, 0, 0, 1, 2, 2, 1])
    Y = np.arange(9.0)
    return Dataset(Y, D, W[:, None], ("w",), (CATEGORICAL,), ("0", "1", "2"),
                   {"w": ["a", "b"]})


class TestBuildDesign:
    def test_column_counts(self):
        ds = _two_strata_three_arms()
        assert build_design(ds, DesignSpec()).shape[1] == 4
        assert build_design(ds, DesignSpec(interaction="demeaned")).shape[1] == 6

    def test_layout_labels(self):
        ds = _two_strata_three_arms()
        X = build_design(ds, DesignSpec(interaction="raw"))
        assert X.column_labels == ["const", "arm=1", "arm=2", "w=a", "arm=1*w=a", "arm=2*w=a"]
        assert X.has_intercept

    def test_reference_is_most_frequent(self):
        ds = _two_strata_three_arms()
        _, labels = control_block(ds)
        assert labels == ["w=a"]

    def test_reference_tie_takes_lowest_code(self):
        ds = Dataset(np.zeros(4), [0, 1, 0, 1], [[0], [0], [1], [1]], ("w",), (CATEGORICAL,),
                     ("0", "1"), {"w": ["x", "y"]})
        _, labels = control_block(ds)
        assert labels == ["w=y"]

    def test_demeaned_centering_on_subsample(self, rng):
        ds = strata_dataset(rng, n_strata=3, n_arms=3)
        X = build_design(ds, DesignSpec(interaction="demeaned", subsample=(2,)))
        rows = X.rows
        assert set(ds.treatment[rows]) == {0, 2}
        C = X.block("controls")
        np.testing.assert_allclose((C - X.control_means).mean(axis=0), 0, atol=1e-12)

    def test_strata_dummies_require_categorical(self, rng):
        ds = Dataset(np.zeros(4), [0, 1, 0, 1], [[0.1], [0.2], [0.3], [0.4]], ("x",),
                     (CONTINUOUS,), ("0", "1"))
        with pytest.raises(ValidationError):
            build_design(ds, DesignSpec("strata_dummies"))

    def test_missing_arm_stratum_reported(self):
        W = np.array([0, 0, 0, 1, 1, 1])
        D = np.array([0, 1, 2, 0, 1, 1])
        ds = Dataset(np.arange(6.0), D, W[:, None], ("w",), (CATEGORICAL,), ("0", "1", "2"),
                     {"w": ["a", "b"]})
        with pytest.raises(RankDeficient, match="strata missing an arm.*'b'"):
            build_design(ds, DesignSpec(interaction="raw"))

    def test_demeaned_equals_raw_combination(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3)
        dm = build_design(ds, DesignSpec(interaction="demeaned"))
        raw = build_design(ds, DesignSpec(interaction="raw"))
        a = ols_fit(ds.outcome, dm).coefficients[dm.blocks["treatments"]]
        g = ols_fit(ds.outcome, raw).coefficients
        K = 2
        gW = g[raw.blocks["interactions"]].reshape(K, -1)
        b = g[raw.blocks["treatments"]] + gW @ raw.block("controls").mean(axis=0)
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_invalid_spec_values(self):
        with pytest.raises(ValidationError):
            DesignSpec(control_style="splines")
        with pytest.raises(ValidationError):
            DesignSpec(interaction="full")

    def test_subsample_always_keeps_control(self):
        assert DesignSpec(subsample=(2,)).subsample == (0, 2)


class TestStrata:
    def test_cell_counts(self):
        counts, inverse, labels, _ = cell_counts(_two_strata_three_arms())
        assert labels == ["a", "b"]
        np.testing.assert_array_equal(counts, [[2, 1, 1], [1, 2, 2]])
        np.testing.assert_array_equal(inverse, [0, 0, 0, 0, 1, 1, 1, 1, 1])

    def test_no_controls_single_stratum(self):
        ds = Dataset(np.zeros(3), [0, 1, 1], np.zeros((3, 0)), arm_names=("0", "1"))
        inverse, labels, _ = stratum_index(ds)
        assert labels == ["all"]
        assert np.all(inverse == 0)
