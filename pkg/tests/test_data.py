import itertools

import numpy as np
import pytest

from fedgbdt.data import (Dataset, FeatureSpec, Schema, auc, feature_ranges, load_csv,
                          partition_horizontal, partition_vertical, save_csv, split_train_test,
                          synth_binary)
from fedgbdt.errors import DataError, SchemaError, UndefinedMetricError


def pair_count_auc(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    assert auc([0, 1], [0.5, 0.5]) == 0.5
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    with pytest.raises(UndefinedMetricError):
        auc([1, 1], [0.2, 0.3])


def test_auc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for n in (10, 200, 2000):
        y = rng.integers(0, 2, size=n)
        s = rng.integers(0, 20, size=n) / 20.0
        assert auc(y, s) == pytest.approx(pair_count_auc(y, s), abs=1e-12)


def test_bundled_data_shape(bundled):
    assert (bundled.n, bundled.m) == (1000, 5)
    assert set(np.unique(bundled.y)) == {0, 1}
    assert all(spec.low is not None and spec.high is not None for spec in bundled.schema.features)
    assert bundled.X.min() >= min(s.low for s in bundled.schema.features)


def test_csv_round_trip(tmp_path, small):
    path = tmp_path / "d.csv"
    save_csv(small, path)
    back = load_csv(path, small.schema)
    assert np.array_equal(back.X, small.X)
    assert np.array_equal(back.ids, small.ids) and np.array_equal(back.y, small.y)


def test_missing_values_are_imputed(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,a,label\n1,1.0,0\n2,,1\n3,3.0,1\n4,NA,0\n")
    d = load_csv(path)
    assert d.X[:, 0].tolist() == [1.0, 2.0, 3.0, 2.0]
    assert d.schema.features[0].imputed


def test_bad_cells_name_the_line(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("id,a,label\n1,1.0,0\n2,abc,1\n")
    with pytest.raises(DataError, match=":3:"):
        load_csv(path)
    path.write_text("id,a,label\n1,1.0,2\n")
    with pytest.raises(DataError):
        load_csv(path)
    path.write_text("")
    with pytest.raises(DataError):
        load_csv(path)


def test_schema_checks(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("id,a,label\n1,1.0,0\n2,5.0,1\n")
    schema = Schema([FeatureSpec("a", "discrete", classes=(1, 2))])
    with pytest.raises(SchemaError):
        load_csv(path, schema)
    with pytest.raises(SchemaError):
        load_csv(path, Schema([FeatureSpec("zz")]))
    with pytest.raises(SchemaError):
        FeatureSpec("a", "discrete")


def test_schema_json_round_trip(tmp_path, bundled):
    path = tmp_path / "schema.json"
    bundled.schema.save(path)
    assert Schema.load(path) == bundled.schema


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [1, 1])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [1, 2], [0, 3])


def test_split_is_seeded_two_thirds(bundled):
    a_train, a_test = split_train_test(bundled, 0)
    b_train, _ = split_train_test(bundled, 0)
    c_train, _ = split_train_test(bundled, 1)
    assert a_train.n == 667 and a_test.n == 333
    assert np.array_equal(a_train.ids, b_train.ids)
    assert not np.array_equal(a_train.ids, c_train.ids)
    assert not set(a_train.ids) & set(a_test.ids)


def test_vertical_partition_gives_labels_to_last(small):
    shards = partition_vertical(small, 3)
    assert [list(s.feature_index) for s in shards] == [[0, 1], [2], [3]]
    assert [s.y is None for s in shards] == [True, True, False]
    assert [list(r) for r in feature_ranges(5, 2)] == [[0, 1, 2], [3, 4]]


def test_horizontal_partition_covers_rows(small):
    shards = partition_horizontal(small, 4, 0)
    ids = np.concatenate([s.ids for s in shards])
    assert sorted(ids.tolist()) == small.ids.tolist()
    assert [s.n for s in shards] == [30, 30, 30, 30]
    assert all(np.all(np.diff(s.ids) > 0) for s in shards)


def test_synthetic_separation():
    easy = synth_binary(400, 3, 4.0, 0)
    noise = synth_binary(400, 3, 0.0, 0)
    assert auc(easy.y, easy.X.sum(axis=1)) > 0.95
    assert abs(auc(noise.y, noise.X.sum(axis=1)) - 0.5) < 0.1
