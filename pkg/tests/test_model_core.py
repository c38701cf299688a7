import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cglasso.exceptions import DataError, NotPositiveDefiniteError
from cglasso.model_core import (LEFT, OBSERVED, RIGHT, CensoredDataset, CensoringBounds, ModelParams,
                                encode_censoring, partition_row, read_csv, write_csv)


def test_encoding_marks_both_tails_and_keeps_bound_values_observed():
    raw = np.array([[0.0, 5.0], [-3.0, 1.0], [-1.0, 2.0]])
    ds = encode_censoring(raw, CensoringBounds.uniform(2, -1.0, 2.0))
    assert ds.indicator.tolist() == [[OBSERVED, RIGHT], [LEFT, OBSERVED], [OBSERVED, OBSERVED]]
    assert np.isnan(ds.values[0, 1]) and np.isnan(ds.values[1, 0])
    assert ds.values[2, 0] == -1.0 and ds.values[2, 1] == 2.0


def test_missing_marker_side_inferred_from_single_finite_bound():
    raw = np.array([[np.nan, 1.0], [3.0, np.nan]])
    bounds = CensoringBounds(np.array([-np.inf, 0.0]), np.array([5.0, np.inf]))
    ds = encode_censoring(raw, bounds)
    assert ds.indicator[0, 0] == RIGHT and ds.indicator[1, 1] == LEFT


def test_missing_marker_needs_declared_side_when_ambiguous():
    raw = np.array([[np.nan, 1.0], [3.0, 2.0]])
    bounds = CensoringBounds.uniform(2, -5.0, 5.0)
    with pytest.raises(DataError, match="censoring side"):
        encode_censoring(raw, bounds)
    ds = encode_censoring(raw, bounds, na_side=["left", "right"])
    assert ds.indicator[0, 0] == LEFT


def test_missing_marker_on_infinite_side_is_rejected():
    raw = np.array([[np.nan], [1.0]])
    with pytest.raises(DataError, match="infinite"):
        encode_censoring(raw, CensoringBounds.uniform(1, -np.inf, 5.0), na_side="left")


def test_bounds_validation():
    with pytest.raises(DataError):
        CensoringBounds.uniform(2, 1.0, 1.0)
    with pytest.raises(DataError):
        CensoringBounds(np.zeros(2), np.ones(3))


def test_observed_value_outside_bounds_is_rejected():
    with pytest.raises(DataError):
        CensoredDataset(np.array([[7.0]]), np.array([[0]]), CensoringBounds.uniform(1, 0.0, 5.0))


def test_partition_row():
    raw = np.array([[1.0, 9.0, -9.0, 2.0]])
    ds = encode_censoring(raw, CensoringBounds.uniform(4, -5.0, 5.0))
    part = partition_row(ds, 0)
    assert part.o.tolist() == [0, 3]
    assert part.c_minus.tolist() == [2]
    assert part.c_plus.tolist() == [1]
    assert sorted(part.c.tolist()) == [1, 2]
    with pytest.raises(IndexError):
        partition_row(ds, 1)


def test_model_params_requires_positive_definite_theta():
    with pytest.raises(NotPositiveDefiniteError):
        ModelParams(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DataError):
        ModelParams(np.zeros(3), np.eye(2))
    mp = ModelParams(np.zeros(2), np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert np.allclose(mp.sigma @ mp.theta, np.eye(2))


def test_csv_bound_flags_override_tag_rows(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,b\n#lower,-inf,-inf\n#upper,10,10\n1,NA\n2,3\n")
    ds = read_csv(f)
    assert ds.indicator[0, 1] == RIGHT
    ds2 = read_csv(f, upper=[10.0, 2.5])
    assert ds2.indicator[1, 1] == RIGHT


def test_csv_all_missing_column_named(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,bad\n1,NA\n2,NA\n")
    with pytest.raises(DataError, match="'bad'"):
        read_csv(f, upper=5.0)


def test_csv_ragged_row(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match=":3"):
        read_csv(f)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)),
              elements=st.floats(-50, 50, allow_nan=False)),
       st.floats(-40, 0), st.floats(0.5, 40))
def test_csv_round_trip(tmp_path_factory, raw, lo, up):
    ds = encode_censoring(raw, CensoringBounds.uniform(raw.shape[1], lo, up))
    f = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, f)
    back = read_csv(f)
    assert np.array_equal(back.indicator, ds.indicator)
    assert np.array_equal(back.values, ds.values, equal_nan=True)
    assert np.array_equal(back.bounds.lower, ds.bounds.lower)
    assert back.names == ds.names


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(-5, 5))
def test_shift_commutes_with_encoding(raw, a):
    bounds = CensoringBounds.uniform(raw.shape[1], -2.0, 2.0)
    ds = encode_censoring(raw, bounds)
    shifted = encode_censoring(raw + a, bounds.shifted(a))
    assert np.array_equal(ds.shifted(a).indicator, ds.indicator)
    # encoding may differ only where raw + a rounds across a shifted bound
    agree = np.abs(np.abs(raw) - 2.0) > 1e-9
    assert np.array_equal(shifted.indicator[agree], ds.indicator[agree])
