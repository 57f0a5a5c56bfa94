"""Histogram-based gradient boosted decision trees for binary classification.

This is the numerical engine shared by the centralized baseline and by both
federated protocols. Trees are grown level by level by :func:`boost`, which
asks a *histogram source* for per-node, per-feature gradient histograms and
tells it which nodes were split or turned into leaves. The centralized
source lives here; the vertical and horizontal protocols provide their own.

Conventions:

* buckets are 0-based; a split with ``split_bucket = s`` sends buckets
  ``0 .. s-1`` left, so ``1 <= s <= q-1``;
* node ids follow heap order (root ``0``, children ``2i+1`` and ``2i+2``);
* gradient sums are accumulated in ascending sample order, one addition at a
  time (``np.bincount``/``np.cumsum``), or correctly rounded with
  ``math.fsum`` when ``summation="exact"``.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import warnings
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, DegenerateLabelsWarning, DegenerateNodeError, IntegrityError
from .ldp import BucketAssignment, boundary_threshold, sort_and_partition

__all__ = [
    "TrainConfig",
    "Gradients",
    "Histogram",
    "TreeNode",
    "GbdtModel",
    "compute_gradients",
    "build_histogram",
    "find_best_split",
    "split_scores",
    "leaf_weight",
    "initial_predictions",
    "boost",
    "CentralizedSource",
    "train_on_buckets",
    "train_on_bins",
    "train_centralized",
    "predict",
    "predict_batch",
    "sigmoid",
]

MAGIC = b"FBM1"
THRESHOLD_MAGIC = b"FBT1"


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters shared by every participant of a run."""

    num_trees: int = 20
    tree_depth: int = 3
    reg_lambda: float = 1.0
    learning_rate: float = 0.3
    num_buckets: int = 16
    epsilon: float = math.inf
    base_score_init: str = "zero"
    base_score_low: float = -0.1
    base_score_high: float = 0.1
    fixed_point_scale: int = 1 << 20
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_trees < 0:
            raise ArgumentError("num_trees must be >= 0")
        if self.tree_depth < 0:
            raise ArgumentError("tree_depth must be >= 0")
        if not self.reg_lambda >= 0:
            raise ArgumentError("reg_lambda must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ArgumentError("learning_rate must lie in (0, 1]")
        if self.num_buckets < 2:
            raise ArgumentError("num_buckets must be >= 2")
        if not self.epsilon > 0:
            raise ArgumentError("epsilon must be positive (use inf to disable LDP)")
        if self.base_score_init not in ("zero", "seeded_uniform"):
            raise ArgumentError(f"unknown base_score_init {self.base_score_init!r}")
        if self.fixed_point_scale < 1:
            raise ArgumentError("fixed_point_scale must be a positive integer")
        if not 0 <= self.rng_seed < 1 << 64:
            raise ArgumentError("rng_seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)

    def digest(self) -> bytes:
        """SHA-256 over a canonical rendering; compared at session start."""
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).digest()


class Gradients(NamedTuple):
    g: np.ndarray
    h: np.ndarray


@dataclass
class Histogram:
    G: np.ndarray
    H: np.ndarray

    @property
    def num_buckets(self) -> int:
        return len(self.G)

    def nonempty(self) -> int:
        return int(np.count_nonzero(self.H > 0))


@dataclass
class TreeNode:
    node_id: int
    weight: Optional[float] = None
    feature: Optional[int] = None
    split_bucket: Optional[int] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def leaf_for(self, go_left) -> "TreeNode":
        node = self
        while not node.is_leaf:
            node = node.left if go_left(node) else node.right
        return node


def sigmoid(x):
    return expit(x)


def compute_gradients(labels, raw_preds) -> Gradients:
    """First and second derivatives of binary cross-entropy w.r.t. the raw score."""
    y = np.asarray(labels, dtype=np.float64)
    raw = np.asarray(raw_preds, dtype=np.float64)
    if y.shape != raw.shape:
        raise ArgumentError(f"labels {y.shape} and predictions {raw.shape} differ in shape")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ArgumentError("labels must be 0 or 1")
    p = expit(raw)
    return Gradients(p - y, p * (1.0 - p))


def _sequential_sum(values: np.ndarray) -> float:
    if len(values) == 0:
        return 0.0
    return float(np.cumsum(values)[-1])


def build_histogram(assignment: BucketAssignment, grads: Gradients, node_samples,
                    summation: str = "sequential") -> Histogram:
    """Per-bucket gradient sums over the samples of one node.

    ``grads`` is indexed by sample ID. Bucket ``j`` gets the sum over
    ``bucket_j`` intersected with ``node_samples``, accumulated in ascending ID
    order.

    Raises:
        IntegrityError: a node sample belongs to none of the buckets.
    """
    node = np.unique(np.asarray(node_samples, dtype=np.int64))
    q = assignment.num_buckets
    G = np.zeros(q)
    H = np.zeros(q)
    covered = 0
    for j, bucket in enumerate(assignment.buckets):
        ids = np.intersect1d(bucket, node, assume_unique=True)
        covered += len(ids)
        if summation == "exact":
            G[j] = math.fsum(grads.g[ids])
            H[j] = math.fsum(grads.h[ids])
        else:
            G[j] = _sequential_sum(grads.g[ids])
            H[j] = _sequential_sum(grads.h[ids])
    if covered != len(node):
        assignment.bucket_of(node)  # names the missing IDs
        raise IntegrityError("node samples are not covered by the bucket assignment")
    return Histogram(G, H)


def _term(g: float, h: float, lam: float) -> float:
    denom = h + lam
    if denom == 0.0:
        return 0.0
    return g * g / denom


def split_scores(hist: Histogram, reg_lambda: float) -> List[float]:
    """Score of every candidate split ``s = 1 .. q-1`` using prefix sums."""
    G_tot = 0.0
    H_tot = 0.0
    for j in range(hist.num_buckets):
        G_tot += hist.G[j]
        H_tot += hist.H[j]
    parent = _term(G_tot, H_tot, reg_lambda)
    scores = []
    G_left = 0.0
    H_left = 0.0
    for j in range(hist.num_buckets - 1):
        G_left += hist.G[j]
        H_left += hist.H[j]
        scores.append(_term(G_left, H_left, reg_lambda)
                      + _term(G_tot - G_left, H_tot - H_left, reg_lambda) + parent)
    return scores


def find_best_split(hist: Histogram, reg_lambda: float) -> Tuple[float, int]:
    """Best ``(score, split_bucket)``; ties go to the smallest split bucket.

    The score is ``G_L^2/(H_L+lam) + G_R^2/(H_R+lam) + G^2/(H+lam)``; a term
    whose denominator is exactly zero counts as 0.
    """
    if hist.num_buckets < 2:
        raise ArgumentError("need at least 2 buckets to split")
    best_score = -math.inf
    best_split = 0
    for s, score in enumerate(split_scores(hist, reg_lambda), start=1):
        if score > best_score:
            best_score, best_split = score, s
    return best_score, best_split


def _node_totals(hist: Histogram, split_bucket: Optional[int] = None):
    """Totals of the whole histogram and, optionally, of its left part.

    Uses the same accumulation order as :func:`split_scores`, so children's
    totals agree bit for bit with the terms that scored the split.
    """
    G_tot = 0.0
    H_tot = 0.0
    for j in range(hist.num_buckets):
        G_tot += hist.G[j]
        H_tot += hist.H[j]
    if split_bucket is None:
        return G_tot, H_tot
    G_left = 0.0
    H_left = 0.0
    for j in range(split_bucket):
        G_left += hist.G[j]
        H_left += hist.H[j]
    return (G_left, H_left), (G_tot - G_left, H_tot - H_left)


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    """``-G / (H + lambda)``, before learning-rate scaling."""
    if not H + reg_lambda > 0:
        raise DegenerateNodeError(f"H + lambda = {H + reg_lambda} is not positive")
    return -G / (H + reg_lambda)


def _installed_weight(G: float, H: float, config: TrainConfig) -> float:
    if H + config.reg_lambda <= 0:
        # an empty node with lambda = 0 carries no gradient mass
        return 0.0
    return config.learning_rate * leaf_weight(G, H, config.reg_lambda)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def initial_predictions(sample_ids, config: TrainConfig) -> np.ndarray:
    """Starting raw scores.

    ``seeded_uniform`` derives each sample's value from ``(rng_seed, id)``
    through SplitMix64, so any participant holding a subset of the samples
    reproduces exactly the values a pooled run would use.
    """
    ids = np.asarray(sample_ids, dtype=np.int64)
    if config.base_score_init == "zero":
        return np.zeros(len(ids))
    mixed = _splitmix64(_splitmix64(np.full(len(ids), config.rng_seed, dtype=np.uint64))
                        ^ ids.astype(np.uint64))
    u = (mixed >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return config.base_score_low + (config.base_score_high - config.base_score_low) * u


# -- tree growing -------------------------------------------------------------


class HistogramSource(Protocol):
    """What :func:`boost` needs from whoever holds the data."""

    num_buckets: Sequence[int]

    def begin_tree(self, t: int) -> None: ...

    def histograms(self, t: int, nodes: Sequence[int]) -> Dict[int, List[Histogram]]: ...

    def apply_level(self, t: int, splits: Dict[int, Tuple[int, int]],
                    leaves: Dict[int, float]) -> None: ...

    def end_tree(self, t: int, tree: TreeNode) -> None: ...


def _choose_split(hists: List[Histogram], num_buckets: Sequence[int], reg_lambda: float):
    best = None
    any_splittable = False
    for f, hist in enumerate(hists):
        if num_buckets[f] < 2:
            continue
        if hist.nonempty() >= 2:
            any_splittable = True
        score, s = find_best_split(hist, reg_lambda)
        if best is None or score > best[0]:
            best = (score, f, s)
    if not any_splittable:
        return None
    return best


def grow_tree(source: HistogramSource, t: int, config: TrainConfig) -> TreeNode:
    root = TreeNode(0)
    nodes = {0: root}
    totals: Dict[int, Tuple[float, float]] = {}
    frontier = [0]
    for level in range(max(config.tree_depth, 1)):
        if not frontier:
            break
        hists = source.histograms(t, frontier)
        splits, leaves, nxt = {}, {}, []
        for nid in frontier:
            hs = hists[nid]
            if nid not in totals:
                totals[nid] = _node_totals(hs[0])
            choice = None
            if level < config.tree_depth:
                choice = _choose_split(hs, source.num_buckets, config.reg_lambda)
            node = nodes[nid]
            if choice is None:
                node.weight = _installed_weight(*totals[nid], config)
                leaves[nid] = node.weight
                continue
            _, f, s = choice
            node.feature, node.split_bucket = f, s
            left_tot, right_tot = _node_totals(hs[f], s)
            for cid, tot in ((2 * nid + 1, left_tot), (2 * nid + 2, right_tot)):
                nodes[cid] = TreeNode(cid)
                totals[cid] = tot
                nxt.append(cid)
            node.left, node.right = nodes[2 * nid + 1], nodes[2 * nid + 2]
            splits[nid] = (f, s)
        source.apply_level(t, splits, leaves)
        frontier = nxt
    if frontier:
        leaves = {}
        for nid in frontier:
            nodes[nid].weight = _installed_weight(*totals[nid], config)
            leaves[nid] = nodes[nid].weight
        source.apply_level(t, {}, leaves)
    return root


def boost(source: HistogramSource, config: TrainConfig, num_features: int) -> "GbdtModel":
    trees = []
    for t in range(config.num_trees):
        source.begin_tree(t)
        tree = grow_tree(source, t, config)
        source.end_tree(t, tree)
        trees.append(tree)
    return GbdtModel(trees, num_features, config)


class CentralizedSource:
    """All data in one place: a bucket-index matrix plus labels.

    ``bins[i, f]`` is the 0-based bucket of sample row ``i`` for feature
    ``f``; ``sample_ids`` (row order) feed the seeded initial predictions.
    """

    def __init__(self, bins, labels, num_buckets: Sequence[int], config: TrainConfig,
                 sample_ids=None, summation: str = "sequential"):
        self.bins = np.asarray(bins, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.num_buckets = list(num_buckets)
        self.config = config
        self.summation = summation
        n = len(self.labels)
        ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
        self.raw = initial_predictions(ids, config)
        self.node_of = np.zeros(n, dtype=np.int64)
        self.grads: Optional[Gradients] = None
        self.split_log: List[Tuple[int, int, int, int, float]] = []

    def begin_tree(self, t):
        self.grads = compute_gradients(self.labels, self.raw)
        self.node_of[:] = 0

    def histograms(self, t, nodes):
        out = {}
        for nid in nodes:
            rows = np.flatnonzero(self.node_of == nid)
            g, h = self.grads.g[rows], self.grads.h[rows]
            hs = []
            for f, q in enumerate(self.num_buckets):
                b = self.bins[rows, f]
                if self.summation == "exact":
                    G = np.array([math.fsum(g[b == j]) for j in range(q)])
                    H = np.array([math.fsum(h[b == j]) for j in range(q)])
                else:
                    G = np.bincount(b, weights=g, minlength=q).astype(np.float64)
                    H = np.bincount(b, weights=h, minlength=q).astype(np.float64)
                hs.append(Histogram(G, H))
            out[nid] = hs
        return out

    def apply_level(self, t, splits, leaves):
        for nid, (f, s) in splits.items():
            rows = np.flatnonzero(self.node_of == nid)
            go_left = self.bins[rows, f] < s
            self.node_of[rows[go_left]] = 2 * nid + 1
            self.node_of[rows[~go_left]] = 2 * nid + 2

    def end_tree(self, t, tree):
        weights = {node.node_id: node.weight for node in tree.iter_nodes() if node.is_leaf}
        self.raw = self.raw + np.array([weights[nid] for nid in self.node_of])


def _warn_if_single_class(labels) -> None:
    labels = np.asarray(labels)
    if len(labels) and (labels == labels[0]).all():
        warnings.warn("all training labels are identical; the model will be near-constant",
                      DegenerateLabelsWarning, stacklevel=3)


def train_on_buckets(assignments: Sequence[BucketAssignment], labels, config: TrainConfig,
                     sample_ids=None, summation: str = "sequential") -> "GbdtModel":
    """Train from precomputed bucket assignments (IDs are row positions)."""
    labels = np.asarray(labels)
    n = len(labels)
    bins = np.column_stack([a.bucket_of(np.arange(n)) for a in assignments]) if assignments \
        else np.zeros((n, 0), dtype=np.int64)
    return train_on_bins(bins, labels, [a.num_buckets for a in assignments], config,
                         sample_ids=sample_ids, summation=summation)


def train_on_bins(bins, labels, num_buckets: Sequence[int], config: TrainConfig,
                  sample_ids=None, summation: str = "sequential") -> "GbdtModel":
    """Train from a bucket-index matrix (``bins[i, f]``, 0-based)."""
    _warn_if_single_class(labels)
    source = CentralizedSource(bins, labels, num_buckets, config,
                               sample_ids=sample_ids, summation=summation)
    return boost(source, config, len(num_buckets))


def train_centralized(dataset, config: TrainConfig, summation: str = "sequential") -> "GbdtModel":
    """Bucketize every feature, train, and record value thresholds.

    ``dataset`` is anything with ``X`` (n x m), ``y`` and optionally ``ids``.
    """
    X = np.asarray(dataset.X, dtype=np.float64)
    y = np.asarray(dataset.y)
    n, m = X.shape
    if n < 2:
        raise ArgumentError("need at least 2 samples")
    if m < 1:
        raise ArgumentError("need at least one feature")
    ids = getattr(dataset, "ids", None)
    assignments = [sort_and_partition(X[:, f], config.num_buckets, feature_index=f)
                   for f in range(m)]
    model = train_on_buckets(assignments, y, config, sample_ids=ids, summation=summation)
    rows = np.arange(n)
    for t, tree in enumerate(model.trees):
        for node in tree.iter_nodes():
            if not node.is_leaf:
                model.thresholds[(t, node.node_id)] = boundary_threshold(
                    X[:, node.feature], rows, assignments[node.feature], node.split_bucket)
    return model


# -- model ----------------------------------------------------------------


@dataclass
class GbdtModel:
    """Ensemble of trees.

    ``thresholds`` maps ``(tree, node_id)`` to a feature value for routing raw
    samples. It is kept out of the canonical bytes because in the vertical
    setting those values live with the feature owners, not with the model.
    """

    trees: List[TreeNode]
    num_features: int
    config: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Dict[Tuple[int, int], float] = field(default_factory=dict, compare=False)

    # Canonical layout, little-endian:
    #   "FBM1", u32 num_trees, u32 tree_depth, u32 num_features,
    #   f64 reg_lambda, f64 learning_rate, then each tree in pre-order:
    #   u8 0 + u32 feature + u32 split_bucket for internal nodes,
    #   u8 1 + f64 weight for leaves.
    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<III", len(self.trees), self.config.tree_depth, self.num_features))
        out.write(struct.pack("<dd", self.config.reg_lambda, self.config.learning_rate))
        for tree in self.trees:
            for node in tree.iter_nodes():
                if node.is_leaf:
                    out.write(struct.pack("<Bd", 1, node.weight))
                else:
                    out.write(struct.pack("<BII", 0, node.feature, node.split_bucket))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, config: Optional[TrainConfig] = None) -> "GbdtModel":
        if data[:4] != MAGIC:
            raise ArgumentError("not a serialized model (bad magic)")
        num_trees, depth, m = struct.unpack_from("<III", data, 4)
        lam, eta = struct.unpack_from("<dd", data, 16)
        off = 32
        base = config or TrainConfig()
        config = base.replace(num_trees=num_trees, tree_depth=depth, reg_lambda=lam,
                              learning_rate=eta)

        def read(node_id):
            nonlocal off
            kind = data[off]
            if kind == 1:
                (w,) = struct.unpack_from("<d", data, off + 1)
                off += 9
                return TreeNode(node_id, weight=w)
            f, s = struct.unpack_from("<II", data, off + 1)
            off += 9
            node = TreeNode(node_id, feature=f, split_bucket=s)
            node.left = read(2 * node_id + 1)
            node.right = read(2 * node_id + 2)
            return node

        trees = [read(0) for _ in range(num_trees)]
        if off != len(data):
            raise ArgumentError("trailing bytes after model")
        return cls(trees, m, config)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def dump_text(self) -> str:
        lines = [f"model trees={len(self.trees)} features={self.num_features} "
                 f"lambda={self.config.reg_lambda!r} eta={self.config.learning_rate!r}"]
        for t, tree in enumerate(self.trees):
            lines.append(f"tree {t}")

            def walk(node, depth):
                pad = "  " * (depth + 1)
                if node.is_leaf:
                    lines.append(f"{pad}[{node.node_id}] leaf weight={node.weight!r}")
                    return
                thr = self.thresholds.get((t, node.node_id))
                extra = f" threshold={thr!r}" if thr is not None else ""
                lines.append(f"{pad}[{node.node_id}] f{node.feature} bucket<{node.split_bucket}{extra}")
                walk(node.left, depth + 1)
                walk(node.right, depth + 1)

            walk(tree, 0)
        return "\n".join(lines) + "\n"

    def internal_nodes(self):
        for t, tree in enumerate(self.trees):
            for node in tree.iter_nodes():
                if not node.is_leaf:
                    yield t, node

    # "FBT1", u32 count, then (u32 tree, u32 node, f64 threshold) sorted by key
    def thresholds_to_bytes(self) -> bytes:
        items = sorted(self.thresholds.items())
        out = [THRESHOLD_MAGIC, struct.pack("<I", len(items))]
        out += [struct.pack("<IId", t, nid, thr) for (t, nid), thr in items]
        return b"".join(out)

    def load_thresholds(self, data: bytes) -> None:
        if data[:4] != THRESHOLD_MAGIC:
            raise ArgumentError("not a threshold table (bad magic)")
        (count,) = struct.unpack_from("<I", data, 4)
        self.thresholds = {}
        for k in range(count):
            t, nid, thr = struct.unpack_from("<IId", data, 8 + 16 * k)
            self.thresholds[(t, nid)] = thr


def _feature_value(sample, f: int):
    try:
        v = sample[f]
    except (IndexError, KeyError):
        raise ArgumentError(f"sample has no value for feature {f}") from None
    if v is None:
        raise ArgumentError(f"sample has no value for feature {f}")
    return v


def predict(model: GbdtModel, sample, thresholds: Optional[Mapping] = None) -> float:
    """Probability for one sample.

    Without ``thresholds``, ``sample`` holds 0-based bucket indices per
    feature (sequence or mapping). With ``thresholds`` (``(tree, node) ->
    value``), ``sample`` holds raw feature values and routing is
    ``value < threshold``.
    """
    total = 0.0
    for t, tree in enumerate(model.trees):
        if thresholds is None:
            leaf = tree.leaf_for(lambda nd: _feature_value(sample, nd.feature) < nd.split_bucket)
        else:
            leaf = tree.leaf_for(
                lambda nd: _feature_value(sample, nd.feature) < thresholds[(t, nd.node_id)])
        total += leaf.weight
    return float(expit(total))


def predict_batch(model: GbdtModel, rows, thresholds: Optional[Mapping] = None,
                  raw: bool = False) -> np.ndarray:
    """Vectorized :func:`predict` over a 2-D array of samples."""
    rows = np.asarray(rows)
    n = rows.shape[0]
    total = np.zeros(n)
    for t, tree in enumerate(model.trees):
        node_of = np.zeros(n, dtype=np.int64)
        for node in sorted(tree.iter_nodes(), key=lambda nd: nd.node_id):
            if node.is_leaf:
                total[node_of == node.node_id] += node.weight
                continue
            if node.feature >= rows.shape[1]:
                raise ArgumentError(f"samples have no value for feature {node.feature}")
            here = node_of == node.node_id
            col = rows[here, node.feature]
            bound = node.split_bucket if thresholds is None else thresholds[(t, node.node_id)]
            node_of[here] = np.where(col < bound, 2 * node.node_id + 1, 2 * node.node_id + 2)
    return total if raw else expit(total)
