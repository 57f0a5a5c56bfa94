import pytest

from fedgbdt.cli import default_data
from fedgbdt.data import Schema, load_csv, split_train_test, synth_binary
from fedgbdt.gbdt import TrainConfig


@pytest.fixture(scope="session")
def bundled():
    """The committed synthetic dataset (n=1000, m=5) and its schema."""
    data, schema = default_data()
    s = Schema.load(schema)
    return load_csv(data, s)


@pytest.fixture(scope="session")
def bundled_split(bundled):
    return split_train_test(bundled, 0)


@pytest.fixture(scope="session")
def small():
    return synth_binary(120, 4, 2.0, 3)


@pytest.fixture
def quick_config():
    return TrainConfig(num_trees=3, tree_depth=2, num_buckets=4)
