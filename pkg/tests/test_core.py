import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrcoverage.core import (
    DataError,
    Dataset,
    FixedOffset,
    ProblemSpec,
    denormalize,
    empirical_quantile,
    normalize,
    read_csv,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
levels = st.floats(0.001, 0.999)


def test_empirical_quantile_examples():
    assert empirical_quantile(0.5, [3, 1, 2]) == 2
    assert empirical_quantile(0.9, range(1, 11)) == 9


def test_empirical_quantile_rejects_bad_input():
    with pytest.raises(ValueError):
        empirical_quantile(0.5, [])
    with pytest.raises(ValueError):
        empirical_quantile(1.0, [1.0])
    with pytest.raises(ValueError):
        empirical_quantile(0.5, [1.0, math.nan])


@given(st.lists(finite, min_size=1, max_size=40), levels, levels)
def test_empirical_quantile_monotone_in_level(values, a, b):
    lo, hi = sorted((a, b))
    assert empirical_quantile(lo, values) <= empirical_quantile(hi, values)


@given(st.lists(finite, min_size=1, max_size=40), levels, st.data())
def test_empirical_quantile_monotone_in_values(values, level, data):
    i = data.draw(st.integers(0, len(values) - 1))
    bumped = list(values)
    bumped[i] += data.draw(st.floats(0, 1e3))
    assert empirical_quantile(level, values) <= empirical_quantile(level, bumped)


@given(st.lists(finite, min_size=1, max_size=40), levels)
def test_empirical_quantile_count(values, level):
    q = empirical_quantile(level, values)
    assert sum(v <= q for v in values) >= math.ceil(level * len(values) - 1e-12)


def test_normalize_examples():
    ds = normalize(Dataset(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), [1.0, 2.0, 4.0]))
    assert np.allclose(ds.X[:, 0].mean(), 0.0)
    assert np.isclose(ds.X[:, 0].var(ddof=1), 1.0)
    assert np.array_equal(ds.X[:, 1], np.zeros(3))
    assert ds.normalization.feature_scale[1] == 1.0


def test_normalize_round_trip(make_data):
    ds = make_data(50, 4, seed=3)
    back = denormalize(normalize(ds))
    assert np.allclose(back.X, ds.X, rtol=1e-12, atol=1e-12)
    assert np.allclose(back.y, ds.y, rtol=1e-12, atol=1e-12)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.ones((3, 2)), [1.0, 2.0])
    with pytest.raises(DataError):
        Dataset(np.array([[1.0], [np.nan]]), [1.0, 2.0])
    ds = Dataset(np.ones((3, 2)), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0


def test_problem_spec_validation():
    with pytest.raises(ValueError):
        ProblemSpec(1.0)
    with pytest.raises(ValueError):
        ProblemSpec(0.5, -1.0)
    with pytest.raises(ValueError):
        ProblemSpec(0.5, 0.0, FixedOffset(math.inf))
    assert ProblemSpec(0.9, 2.0).with_offset(1.5).intercept == FixedOffset(1.5)


def test_read_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,y\n1,2,3\n4,5,6\n")
    ds = read_csv(str(path), "y")
    assert ds.feature_names == ("a", "b")
    assert np.array_equal(ds.X, [[1, 2], [4, 5]])
    assert np.array_equal(ds.y, [3, 6])
    assert read_csv(str(path), "y", ["b"]).d == 1


@pytest.mark.parametrize("text", ["a,y\n1,2\nfoo,3\n", "a,y\n1,2\n,3\n", "a,y\n1,2\n3\n", "a,z\n1,2\n"])
def test_read_csv_errors(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataError):
        read_csv(str(path), "y")
