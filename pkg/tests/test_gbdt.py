import math

import numpy as np
import pytest
from scipy.special import expit

from fedgbdt.data import Dataset, auc, synth_binary
from fedgbdt.errors import (ArgumentError, DegenerateLabelsWarning, DegenerateNodeError,
                            IntegrityError)
from fedgbdt.gbdt import (GbdtModel, Histogram, TrainConfig, TreeNode, build_histogram,
                          compute_gradients, find_best_split, initial_predictions, leaf_weight,
                          predict, predict_batch, split_scores, train_centralized,
                          train_on_buckets)
from fedgbdt.ldp import BucketAssignment, sort_and_partition


def bce(y, raw):
    p = expit(raw)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


# -- gradients -------------------------------------------------------------


def test_gradients_at_zero():
    g, h = compute_gradients([1, 0], [0.0, 0.0])
    assert g.tolist() == [-0.5, 0.5]
    assert h.tolist() == [0.25, 0.25]


def test_gradients_match_finite_differences_at_two():
    step = 1e-5
    g, h = compute_gradients([1], [2.0])
    fd_g = (bce(1, 2 + step) - bce(1, 2 - step)) / (2 * step)
    fd_h = (bce(1, 2 + step) - 2 * bce(1, 2) + bce(1, 2 - step)) / step**2
    assert abs(g[0] - fd_g) / abs(g[0]) <= 1e-6
    # the second difference loses digits to cancellation; compare the analytic
    # h against differences of the analytic g instead
    gp, _ = compute_gradients([1], [2 + step])
    gm, _ = compute_gradients([1], [2 - step])
    assert abs(h[0] - (gp[0] - gm[0]) / (2 * step)) / h[0] <= 1e-6
    assert abs(h[0] - fd_h) / h[0] < 1e-3


def test_gradients_reject_bad_input():
    with pytest.raises(ArgumentError):
        compute_gradients([1, 0], [0.0])
    with pytest.raises(ArgumentError):
        compute_gradients([2], [0.0])


def test_gradient_ranges():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 500)
    g, h = compute_gradients(y, rng.normal(0, 3, 500))
    assert (np.abs(g) < 1).all()
    assert ((h > 0) & (h <= 0.25)).all()


# -- histograms ------------------------------------------------------------


def _grads(n, seed=0):
    rng = np.random.default_rng(seed)
    return compute_gradients(rng.integers(0, 2, n), rng.normal(size=n))


def test_histogram_of_empty_node_is_zero():
    a = sort_and_partition(np.arange(8.0), 4)
    hist = build_histogram(a, _grads(8), [])
    assert hist.G.tolist() == [0.0] * 4 and hist.H.tolist() == [0.0] * 4


def test_histogram_one_sample_per_bucket():
    a = BucketAssignment(0, tuple(np.array([i]) for i in range(5)))
    grads = compute_gradients(np.zeros(5), np.zeros(5))._replace(g=np.ones(5))
    assert build_histogram(a, grads, range(5)).G.tolist() == [1.0] * 5


def test_histogram_matches_naive_loop():
    rng = np.random.default_rng(4)
    values = rng.normal(size=100)
    a = sort_and_partition(values, 7)
    grads = _grads(100, 1)
    node = rng.choice(100, 60, replace=False)
    hist = build_histogram(a, grads, node)
    for j, bucket in enumerate(a.buckets):
        G = H = 0.0
        for i in sorted(set(bucket.tolist()) & set(node.tolist())):
            G += grads.g[i]
            H += grads.h[i]
        assert hist.G[j] == G and hist.H[j] == H


def test_histogram_conservation():
    a = sort_and_partition(np.random.default_rng(2).normal(size=50), 5)
    grads = _grads(50, 2)
    node = np.arange(0, 50, 2)
    hist = build_histogram(a, grads, node, summation="exact")
    assert math.isclose(hist.G.sum(), math.fsum(grads.g[node]), abs_tol=1e-12)


def test_histogram_unknown_sample_is_integrity_error():
    a = sort_and_partition(np.arange(6.0), 3)
    with pytest.raises(IntegrityError):
        build_histogram(a, _grads(10), [0, 9])


# -- split finding ---------------------------------------------------------


def brute_force_split(G, H, lam):
    best = None
    q = len(G)
    for s in range(1, q):
        gl, hl = sum(G[:s]), sum(H[:s])
        gr, hr = sum(G[s:]), sum(H[s:])
        terms = [(gl, hl), (gr, hr), (sum(G), sum(H))]
        score = sum(0.0 if h + lam == 0 else g * g / (h + lam) for g, h in terms)
        if best is None or score > best[0]:
            best = (score, s)
    return best


def test_all_zero_gradients_pick_first_bucket():
    score, s = find_best_split(Histogram(np.zeros(5), np.ones(5)), 1.0)
    assert (score, s) == (0.0, 1)


def test_symmetric_example_matches_brute_force():
    G, H = [10.0, 0.0, 0.0, -10.0], [1.0, 1.0, 1.0, 1.0]
    score, s = find_best_split(Histogram(np.array(G), np.array(H)), 1.0)
    assert (score, s) == pytest.approx(brute_force_split(G, H, 1.0))
    # 10^2/(1+1) on the left plus 10^2/(3+1) on the right, parent term zero
    assert s == 1 and score == pytest.approx(75.0)


def test_split_against_brute_force_random():
    rng = np.random.default_rng(9)
    for _ in range(200):
        q = int(rng.integers(2, 12))
        G = rng.normal(size=q)
        H = rng.uniform(0, 2, q)
        lam = float(rng.choice([0.0, 0.5, 1.0]))
        score, s = find_best_split(Histogram(G, H), lam)
        ref_score, ref_s = brute_force_split(G.tolist(), H.tolist(), lam)
        assert s == ref_s
        assert score == pytest.approx(ref_score, rel=1e-12)


def test_constant_shift_keeps_argmax():
    rng = np.random.default_rng(5)
    hist = Histogram(rng.normal(size=8), rng.uniform(0.1, 1, 8))
    scores = np.array(split_scores(hist, 1.0))
    assert int(np.argmax(scores + 123.0)) + 1 == find_best_split(hist, 1.0)[1]


def test_zero_lambda_empty_side_is_guarded():
    hist = Histogram(np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    scores = split_scores(hist, 0.0)
    assert all(math.isfinite(s) for s in scores)


def test_split_needs_two_buckets():
    with pytest.raises(ArgumentError):
        find_best_split(Histogram(np.zeros(1), np.zeros(1)), 1.0)


# -- leaf weights ----------------------------------------------------------


def test_leaf_weight_examples():
    assert leaf_weight(0.0, 1.0, 1.0) == 0.0
    assert leaf_weight(0.5, 0.25, 1.0) == pytest.approx(-0.4)


def test_leaf_weight_random_formula():
    rng = np.random.default_rng(1)
    for G, H, lam in zip(rng.normal(size=50), rng.uniform(0, 3, 50), rng.uniform(0.01, 2, 50)):
        assert leaf_weight(G, H, lam) == -G / (H + lam)


def test_leaf_weight_degenerate():
    with pytest.raises(DegenerateNodeError):
        leaf_weight(1.0, 0.0, 0.0)


# -- training ----------------------------------------------------------------


def test_two_separable_samples():
    ds = Dataset(np.array([[0.0], [1.0]]), [0, 1], [0, 1])
    model = train_centralized(ds, TrainConfig(num_trees=1, tree_depth=1, num_buckets=2))
    root = model.trees[0]
    assert (root.feature, root.split_bucket) == (0, 1)
    assert root.left.weight < 0 < root.right.weight


def test_hand_computed_four_samples():
    # values 1..4, labels 0,0,1,1, raw 0: g = (.5,.5,-.5,-.5), h = .25 each
    ds = Dataset(np.array([[1.0], [2.0], [3.0], [4.0]]), [0, 1, 2, 3], [0, 0, 1, 1])
    cfg = TrainConfig(num_trees=1, tree_depth=1, num_buckets=2, learning_rate=1.0)
    tree = train_centralized(ds, cfg).trees[0]
    assert tree.split_bucket == 1
    assert tree.left.weight == pytest.approx(-1.0 / 1.5)
    assert tree.right.weight == pytest.approx(1.0 / 1.5)


def test_depth_zero_gives_single_leaves(small):
    cfg = TrainConfig(num_trees=2, tree_depth=0, num_buckets=4, learning_rate=0.5)
    model = train_centralized(small, cfg)
    g, h = compute_gradients(small.y, np.zeros(small.n))
    w0 = 0.5 * -g.sum() / (h.sum() + 1.0)
    assert all(t.is_leaf for t in model.trees)
    assert model.trees[0].weight == pytest.approx(w0)


def test_training_is_deterministic(small, quick_config):
    a = train_centralized(small, quick_config)
    b = train_centralized(small, quick_config)
    assert a.to_bytes() == b.to_bytes()


def test_separable_data_training_auc():
    ds = synth_binary(1000, 5, 6.0, 11)
    model = train_centralized(ds, TrainConfig())
    assert auc(ds.y, predict_batch(model, ds.X, model.thresholds)) >= 0.99


def test_identical_labels_warn(small, quick_config):
    ds = Dataset(small.X, small.ids, np.ones(small.n, dtype=int))
    with pytest.warns(DegenerateLabelsWarning):
        train_centralized(ds, quick_config)


def test_children_partition_parent(small, quick_config):
    from fedgbdt.gbdt import CentralizedSource, boost

    assignments = [sort_and_partition(small.X[:, f], 4, feature_index=f) for f in range(small.m)]
    bins = np.column_stack([a.bucket_of(np.arange(small.n)) for a in assignments])

    class Checking(CentralizedSource):
        def apply_level(self, t, splits, leaves):
            before = {nid: set(np.flatnonzero(self.node_of == nid)) for nid in splits}
            super().apply_level(t, splits, leaves)
            for nid, rows in before.items():
                left = set(np.flatnonzero(self.node_of == 2 * nid + 1))
                right = set(np.flatnonzero(self.node_of == 2 * nid + 2))
                assert left | right == rows and not left & right

    boost(Checking(bins, small.y, [4] * small.m, quick_config), quick_config, small.m)


def test_seeded_initial_scores_depend_on_id_only():
    cfg = TrainConfig(base_score_init="seeded_uniform", rng_seed=5)
    full = initial_predictions(np.arange(10), cfg)
    part = initial_predictions(np.array([3, 7]), cfg)
    assert part.tolist() == [full[3], full[7]]
    assert ((full >= -0.1) & (full <= 0.1)).all()


def test_config_validation():
    for bad in ({"num_buckets": 1}, {"learning_rate": 0.0}, {"reg_lambda": -1.0},
                {"epsilon": 0.0}, {"base_score_init": "random"}):
        with pytest.raises(ArgumentError):
            TrainConfig(**bad)


def test_train_on_buckets_equals_train_centralized(small, quick_config):
    assignments = [sort_and_partition(small.X[:, f], 4, feature_index=f) for f in range(small.m)]
    a = train_on_buckets(assignments, small.y, quick_config, sample_ids=small.ids)
    assert a == train_centralized(small, quick_config)


# -- prediction and serialization -------------------------------------------


def test_empty_model_predicts_half():
    assert predict(GbdtModel([], 3), [0, 0, 0]) == 0.5


def test_single_leaf_model():
    model = GbdtModel([TreeNode(0, weight=1.0)], 1)
    assert predict(model, [0]) == pytest.approx(0.7310585786)


def test_hand_traced_two_tree_model():
    t0 = TreeNode(0, feature=0, split_bucket=2, left=TreeNode(1, weight=-0.3),
                  right=TreeNode(2, weight=0.4))
    t1 = TreeNode(0, feature=1, split_bucket=1,
                  left=TreeNode(1, feature=0, split_bucket=3, left=TreeNode(3, weight=0.1),
                                right=TreeNode(4, weight=0.2)),
                  right=TreeNode(2, weight=-0.5))
    model = GbdtModel([t0, t1], 2)
    assert predict(model, [1, 0]) == pytest.approx(expit(-0.3 + 0.1))
    assert predict(model, [2, 0]) == pytest.approx(expit(0.4 + 0.1))
    assert predict(model, [3, 0]) == pytest.approx(expit(0.4 + 0.2))
    assert predict(model, [0, 2]) == pytest.approx(expit(-0.3 - 0.5))
    rows = np.array([[1, 0], [2, 0], [3, 0], [0, 2]])
    assert predict_batch(model, rows).tolist() == [predict(model, r) for r in rows]


def test_missing_feature_is_argument_error():
    model = GbdtModel([TreeNode(0, feature=2, split_bucket=1, left=TreeNode(1, weight=0.0),
                                right=TreeNode(2, weight=0.0))], 3)
    with pytest.raises(ArgumentError):
        predict(model, [0, 0])
    with pytest.raises(ArgumentError):
        predict_batch(model, np.zeros((2, 2)))


def test_threshold_routing_matches_bucket_routing(small, quick_config):
    model = train_centralized(small, quick_config)
    assignments = [sort_and_partition(small.X[:, f], 4, feature_index=f) for f in range(small.m)]
    bins = np.column_stack([a.bucket_of(np.arange(small.n)) for a in assignments])
    by_value = predict_batch(model, small.X, model.thresholds)
    by_bucket = predict_batch(model, bins)
    assert np.array_equal(by_value, by_bucket)


def test_model_bytes_round_trip(small, quick_config):
    model = train_centralized(small, quick_config)
    data = model.to_bytes()
    assert data[:4] == b"FBM1"
    back = GbdtModel.from_bytes(data)
    assert back.to_bytes() == data
    assert back.trees == model.trees and back.num_features == model.num_features
    back.load_thresholds(model.thresholds_to_bytes())
    assert back.thresholds == model.thresholds
    assert "leaf weight=" in model.dump_text()


def test_model_bytes_reject_garbage():
    with pytest.raises(ArgumentError):
        GbdtModel.from_bytes(b"XXXX" + bytes(40))
