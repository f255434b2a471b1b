import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisoncert.data import (
    CLASSIFICATION, REGRESSION, DataError, Dataset, FeatureMap, expand, load_csv, load_diabetes_scaled,
    load_iris_binary, make_halfmoons, minmax_scale, save_csv,
)


def test_halfmoons_shapes_and_determinism():
    a = make_halfmoons(50, 10, 0.1, seed=4)
    b = make_halfmoons(50, 10, 0.1, seed=4)
    assert a.X_train.shape == (50, 2) and a.X_test.shape == (10, 2)
    assert a.equals(b)
    assert not a.equals(make_halfmoons(50, 10, 0.1, seed=5))


def test_iris_binary_is_scaled_and_two_class():
    ds = load_iris_binary()
    assert ds.n_train == 80 and ds.n_test == 20 and ds.d == 4
    X = np.vstack([ds.X_train, ds.X_test])
    assert X.min() == pytest.approx(0.0) and X.max() == pytest.approx(1.0)
    assert set(np.unique(ds.y_train)) == {0.0, 1.0}


def test_diabetes_scaled_labels():
    ds = load_diabetes_scaled()
    assert ds.task == REGRESSION and ds.d == 10
    y = np.concatenate([ds.y_train, ds.y_test])
    assert 0.0 <= y.min() and y.max() <= 1.0


def test_batch_schedule_covers_each_sample_once_per_epoch():
    ds = make_halfmoons(23, 5, seed=0, batch_size=5, epochs=3)
    assert ds.batches_per_epoch == 5 and ds.n_iterations == 15
    seen = np.concatenate(ds.schedule())
    assert np.array_equal(np.bincount(seen.astype(int)), np.full(23, 3))
    for i in range(23):
        for t in ds.iterations_of(i):
            assert i in ds.batch(t)


def test_polynomial_map_order():
    ds = Dataset([[2.0, 3.0]], [1.0], np.empty((0, 2)), [])
    out = expand(FeatureMap("polynomial", 2, include_bias=True), ds)
    assert np.allclose(out.X_train[0], [1, 2, 3, 4, 6, 9])
    assert FeatureMap("polynomial", 3, include_bias=False).output_dim(2) == 9


def test_bad_labels_rejected():
    with pytest.raises(DataError, match="expected 0 or 1"):
        Dataset([[0.0]], [2.0], np.empty((0, 1)), [], task=CLASSIFICATION)


def test_csv_round_trip(tmp_path):
    ds = make_halfmoons(12, 4, seed=1)
    save_csv(ds, tmp_path / "tr.csv")
    save_csv(ds, tmp_path / "te.csv", split="test")
    back = load_csv(tmp_path / "tr.csv", test_path=tmp_path / "te.csv")
    assert np.array_equal(back.X_train, ds.X_train) and np.array_equal(back.y_test, ds.y_test)


def test_csv_bad_label_reports_row(tmp_path):
    (tmp_path / "x.csv").write_text("0.1,0\n0.2,3\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(tmp_path / "x.csv")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 0), st.floats(0.5, 4))
def test_minmax_scale_hits_range(seed, lo, hi):
    ds = make_halfmoons(15, 5, seed=seed)
    out = minmax_scale(ds, feature_range=(lo, hi))
    X = np.vstack([out.X_train, out.X_test])
    assert np.allclose(X.min(axis=0), lo) and np.allclose(X.max(axis=0), hi)
