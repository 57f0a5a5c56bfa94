import numpy as np
import pytest

from fedgbdt.data import Dataset, FeatureSpec, Schema, auc, partition_horizontal, synth_binary
from fedgbdt.errors import ArgumentError, ProtocolError, RangeError
from fedgbdt.gbdt import TrainConfig
from fedgbdt.horizontal import predict_local, simulate_horizontal, train_pooled
from fedgbdt.secagg import AggParams
from fedgbdt.transport import Channel, SimNetwork

CONFIG = TrainConfig(num_trees=5, tree_depth=3, num_buckets=8)
FAST = AggParams.test_profile()


def _splits(model):
    return [[(n.node_id, n.feature, n.split_bucket) for n in tree.iter_nodes() if not n.is_leaf]
            for tree in model.trees]


def _leaves(tree):
    return {n.node_id: n.weight for n in tree.iter_nodes() if n.is_leaf}


@pytest.fixture(scope="module")
def shards(bundled_split):
    train, _ = bundled_split
    return partition_horizontal(train, 4, seed=0)


@pytest.fixture(scope="module")
def exact_run(shards):
    return simulate_horizontal(shards, CONFIG, exact=True)


def test_exact_mode_matches_pooled(shards, exact_run):
    pooled = train_pooled(shards, exact_run.quantiles, CONFIG)
    assert exact_run.model.to_bytes() == pooled.to_bytes()


def test_single_holder_matches_pooled(bundled_split):
    train, _ = bundled_split
    run = simulate_horizontal([train], CONFIG)
    pooled = train_pooled([train], run.quantiles, CONFIG, summation="sequential")
    assert _splits(run.model) == _splits(pooled)


def test_masked_run_tracks_exact(shards, exact_run, bundled_split):
    _, test = bundled_split
    masked = simulate_horizontal(shards, CONFIG, params=FAST, seed=1)
    assert masked.quantiles == exact_run.quantiles
    blobs = {m.to_bytes() for m in masked.models.values()}
    assert len(blobs) == 1
    a_exact = auc(test.y, predict_local(exact_run.model, exact_run.quantiles, test.X))
    a_masked = auc(test.y, predict_local(masked.model, masked.quantiles, test.X))
    assert abs(a_exact - a_masked) <= 0.005

    # first-tree leaves: every bucket sum carries at most l/2 units of rounding,
    # and a node total adds up to q such sums
    t0e, t0m = exact_run.model.trees[0], masked.model.trees[0]
    assert _splits(exact_run.model)[0] == _splits(masked.model)[0]
    delta = CONFIG.num_buckets * len(shards) * 0.5 / CONFIG.fixed_point_scale
    eta, lam = CONFIG.learning_rate, CONFIG.reg_lambda
    for nid, w in _leaves(t0e).items():
        bound = eta * delta / lam * (1 + abs(w) / eta)
        assert abs(_leaves(t0m)[nid] - w) <= bound


def test_transcript_shows_only_masked_sums(shards):
    net = SimNetwork()
    simulate_horizontal(shards, CONFIG.replace(num_trees=1), params=FAST, seed=2, network=net)
    agg = [e for e in net.transcript if e.channel == Channel.AGG]
    assert agg and all(e.recipient == 3 and e.payload[0] == 0x01 for e in agg)
    split = [e for e in net.transcript if e.channel == Channel.SPLIT]
    assert all(e.sender == 3 for e in split)


def test_two_holders_cannot_mask(bundled_split):
    train, _ = bundled_split
    with pytest.raises(ProtocolError):
        simulate_horizontal(partition_horizontal(train, 2, 0), CONFIG, params=FAST)


def test_two_holders_exact_is_allowed(bundled_split):
    train, _ = bundled_split
    run = simulate_horizontal(partition_horizontal(train, 2, 0), CONFIG, exact=True)
    assert len(run.models) == 2


def test_modulus_overflow_is_refused(shards):
    small = AggParams.test_profile(modulus=1 << 24, scale=CONFIG.fixed_point_scale)
    with pytest.raises(RangeError):
        simulate_horizontal(shards, CONFIG, params=small, seed=3)


def test_scale_must_match_config(shards):
    with pytest.raises(ArgumentError):
        simulate_horizontal(shards, CONFIG, params=AggParams.test_profile(scale=1 << 10))


def test_discrete_feature_uses_classes():
    base = synth_binary(300, 2, 3.0, 5)
    colour = np.random.default_rng(0).integers(0, 3, size=300).astype(float)
    X = np.column_stack([base.X, colour])
    schema = Schema(list(base.schema.features) + [FeatureSpec("c", "discrete", classes=(0, 1, 2))])
    data = Dataset(X, base.ids, base.y, schema)
    run = simulate_horizontal(partition_horizontal(data, 3, 1), CONFIG, exact=True)
    assert run.quantiles[2].kind == "discrete" and run.quantiles[2].num_buckets == 3
    assert all(qt.num_buckets == 8 for qt in run.quantiles[:2])


def test_coordinator_can_be_anyone(shards):
    run = simulate_horizontal(shards, CONFIG.replace(num_trees=2), exact=True, coordinator=0)
    assert run.coordinator == 0
    assert len({m.to_bytes() for m in run.models.values()}) == 1
