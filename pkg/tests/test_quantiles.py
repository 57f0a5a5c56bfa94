import struct

import numpy as np
import pytest

from fedgbdt.errors import ArgumentError, DataError, QuantileDegenerateError, SchemaError
from fedgbdt.quantiles import (CutSearch, FeatureBounds, Quantiles, assign_to_buckets,
                               build_discrete_buckets, count_below, find_quantiles)
from fedgbdt.secagg import MaskedResidue
from fedgbdt.transport import Channel, SimNetwork


def test_count_below_is_strict():
    assert count_below([1.0, 2.0, 2.0, 3.0], 2.0) == 1
    assert count_below([], 5.0) == 0


def test_assign_counts_cuts_at_or_below():
    qs = Quantiles(0, "continuous", cuts=(2.0, 4.0))
    assert assign_to_buckets([1.0, 2.0, 3.9, 4.0, 9.0], qs).tolist() == [0, 1, 1, 2, 2]
    assert qs.num_buckets == 3
    assert qs.threshold(1) == 2.0
    with pytest.raises(DataError):
        assign_to_buckets([np.nan], qs)


def test_discrete_buckets_follow_classes():
    qs = build_discrete_buckets([3, 1, 2, 1], classes=[3, 1, 2])
    assert qs.classes == (1, 2, 3)
    assert assign_to_buckets([3, 1, 2], qs).tolist() == [2, 0, 1]
    with pytest.raises(SchemaError):
        build_discrete_buckets([4], classes=[1, 2])


def test_quantile_validation():
    with pytest.raises(ArgumentError):
        Quantiles(0, "continuous", cuts=(2.0, 1.0))
    with pytest.raises(ArgumentError):
        Quantiles(0, "discrete", classes=(1, 1))
    with pytest.raises(ArgumentError):
        FeatureBounds(0, 1.0, 1.0)
    with pytest.raises(ArgumentError):
        find_quantiles([[1.0]], 2, FeatureBounds(0, 0, 2), kind="discrete")


def test_cut_search_single_participant_by_hand():
    values = np.arange(8.0)
    s = CutSearch(0, 8, 2, FeatureBounds(0, 0.0, 8.0))
    assert s.target == 4
    cut = s.update(count_below(values, s.probe))
    assert cut == 4.0 and s.done


def test_remaining_adjusted_targets():
    values = np.arange(10.0)
    s = CutSearch(0, 10, 4, FeatureBounds(0, -0.5, 9.5))
    remaining = values
    while not s.done:
        cut = s.update(count_below(remaining, s.probe))
        if cut is not None:
            remaining = remaining[remaining >= cut]
    sizes = np.bincount(assign_to_buckets(values, s.result()), minlength=4)
    assert sizes.sum() == 10 and sizes.max() - sizes.min() <= 1


@pytest.mark.parametrize("exact", [True, False])
def test_distributed_buckets_are_balanced(exact):
    rng = np.random.default_rng(0)
    values = rng.uniform(0, 1, size=2000)
    shards = np.array_split(values, 4)
    qs = find_quantiles(shards, 16, FeatureBounds(0, 0.0, 1.0), exact=exact, seed=1)
    sizes = np.bincount(assign_to_buckets(values, qs), minlength=16)
    assert np.all(np.abs(sizes - 2000 / 16) <= 1)


def test_single_participant_runs_without_masking():
    values = np.random.default_rng(1).normal(size=320)
    qs = find_quantiles([values], 8, FeatureBounds(0, -6.0, 6.0))
    sizes = np.bincount(assign_to_buckets(values, qs), minlength=8)
    assert np.all(sizes == 40)


def test_transcript_has_no_cleartext_counts():
    rng = np.random.default_rng(2)
    values = rng.uniform(0, 1, size=1000)
    net = SimNetwork()
    find_quantiles(np.array_split(values, 4), 8, FeatureBounds(0, 0.0, 1.0), network=net, seed=3)
    coordinator = 3
    agg = [e for e in net.transcript if e.channel == Channel.AGG]
    assert agg and all(e.recipient == coordinator for e in agg)
    # masked residues of counts <= n would be tiny; real masks are uniform mod 2**40
    for env in agg:
        (count,) = struct.unpack_from(">I", env.payload, 1)
        for r in range(count):
            m = MaskedResidue.from_bytes(env.payload, 5 + r * MaskedResidue.SIZE)
            assert m.origin == env.sender
            assert 1000 < m.value < (1 << 40) - 1000
    assert all(e.sender == coordinator for e in net.transcript if e.channel == Channel.QUANTILE)


def test_heavy_duplicates_are_degenerate():
    values = np.concatenate([np.zeros(900), np.linspace(0.1, 1, 100)])
    with pytest.raises(QuantileDegenerateError) as info:
        find_quantiles(np.array_split(values, 2), 4, FeatureBounds(0, -1.0, 1.0), exact=True)
    assert len(info.value.cuts[0].cuts) == 3


def test_degenerate_can_warn():
    values = np.concatenate([np.zeros(900), np.linspace(0.1, 1, 100)])
    with pytest.warns(Warning):
        qs = find_quantiles(np.array_split(values, 2), 4, FeatureBounds(0, -1.0, 1.0),
                            exact=True, on_degenerate="warn")
    assert len(qs.cuts) == 3
