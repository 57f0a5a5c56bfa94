"""Horizontal federated training: samples split by row, every party has all features.

All participants first agree on global bucket boundaries: continuous
features go through the secure quantile lookup, discrete features use the
class list from the schema. Each tree level then costs one batched secure
sum: every participant contributes its local per-node, per-feature,
per-bucket gradient sums as fixed-point integers, and the coordinator (one
of the participants) sees only the totals. It picks splits and leaf weights
with the shared engine and broadcasts them, so every participant ends with
the same model.

Split channel payload (coordinator to everyone, big-endian)::

    u8 1, u32 tree, u32 count, then per node
      u32 node, u8 0, u32 feature, u32 split bucket   (split)
      u32 node, u8 1, f64 leaf weight                (leaf)

With ``exact=True`` the masked fixed-point sums are replaced by plain
integers in units of 2**-1074, which makes every aggregated sum the
correctly rounded total. That mode reveals all contributions and exists
only to compare against a pooled run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, Schema
from .errors import ArgumentError, PeerGone, ProtocolError, RangeError
from .gbdt import (GbdtModel, Gradients, Histogram, TrainConfig, TreeNode, boost,
                   compute_gradients, initial_predictions, predict_batch, train_on_bins,
                   _warn_if_single_class)
from .quantiles import (Quantiles, assign_to_buckets, build_discrete_buckets,
                        quantile_coordinator, quantile_participant)
from .secagg import AggParams, SecureSum, network_setup, round_key
from .session import exchange_config
from .transport import Channel, SimNetwork

__all__ = [
    "HorizontalParticipant",
    "HorizontalRun",
    "simulate_horizontal",
    "predict_local",
    "train_pooled",
    "local_histograms",
]

MSG_SPLITS = 1
SHIFT = 1 << 1074
_STATS = (0, 1)  # G, H


def _exact_ints(x: np.ndarray) -> List[int]:
    out = []
    for v in x.tolist():
        n, d = v.as_integer_ratio()
        out.append(n * (SHIFT // d))
    return out


def local_histograms(bins: np.ndarray, rows: np.ndarray, grads: Gradients,
                     num_buckets: Sequence[int]) -> List[Histogram]:
    """Per-feature local gradient sums over ``rows``, in ascending row order."""
    g, h = grads.g[rows], grads.h[rows]
    out = []
    for f, q in enumerate(num_buckets):
        b = bins[rows, f]
        out.append(Histogram(np.bincount(b, weights=g, minlength=q).astype(np.float64),
                             np.bincount(b, weights=h, minlength=q).astype(np.float64)))
    return out


def _digest(config: TrainConfig, schema: Schema, exact: bool) -> bytes:
    blob = json.dumps(schema.to_json(), sort_keys=True).encode()
    return hashlib.sha256(config.digest() + blob + bytes([exact])).digest()


def _pack_level(t: int, splits: Dict[int, Tuple[int, int]], leaves: Dict[int, float]) -> bytes:
    parts = [bytes([MSG_SPLITS]), struct.pack(">II", t, len(splits) + len(leaves))]
    for nid in sorted(set(splits) | set(leaves)):
        if nid in splits:
            parts.append(struct.pack(">IBII", nid, 0, *splits[nid]))
        else:
            parts.append(struct.pack(">IBd", nid, 1, leaves[nid]))
    return b"".join(parts)


def _unpack_level(payload: bytes, t: int):
    if payload[0] != MSG_SPLITS:
        raise ProtocolError(f"unexpected split message type {payload[0]}")
    got_t, count = struct.unpack_from(">II", payload, 1)
    if got_t != t:
        raise ProtocolError(f"split broadcast for tree {got_t}, expected {t}")
    off = 9
    splits, leaves = {}, {}
    for _ in range(count):
        nid, kind = struct.unpack_from(">IB", payload, off)
        if kind == 0:
            splits[nid] = struct.unpack_from(">II", payload, off + 5)
        else:
            (leaves[nid],) = struct.unpack_from(">d", payload, off + 5)
        off += 13
    return splits, leaves


class HorizontalParticipant:
    """One data holder; the one whose id equals ``coordinator`` also aggregates.

    ``params`` is only needed by the coordinator; the others receive it during
    key setup. ``rng`` seeds the key-agreement secrets (``None`` uses the OS
    source).
    """

    def __init__(self, endpoint, shard: Dataset, participants: Sequence[int], coordinator: int,
                 config: TrainConfig, schema: Optional[Schema] = None,
                 params: Optional[AggParams] = None, exact: bool = False,
                 rng: Optional[random.Random] = None, on_degenerate: str = "raise"):
        if shard.y is None:
            raise ArgumentError("every horizontal participant needs labels")
        self.endpoint = endpoint
        self.shard = shard
        self.participants = sorted(participants)
        self.coordinator = coordinator
        self.others = [p for p in self.participants if p != coordinator]
        self.config = config
        self.schema = schema or shard.schema
        self.params = params
        self.exact = exact
        self.rng = rng
        self.on_degenerate = on_degenerate
        self.quantiles: List[Quantiles] = []
        self.bins: Optional[np.ndarray] = None
        self.model: Optional[GbdtModel] = None
        self.n_total: Optional[int] = None

    @property
    def is_coordinator(self) -> bool:
        return self.endpoint.pid == self.coordinator

    @property
    def num_buckets(self) -> List[int]:
        return [qt.num_buckets for qt in self.quantiles]

    def run(self) -> GbdtModel:
        """Handshake, key setup, bucket boundaries, then training."""
        if self.is_coordinator and self.params is not None \
                and self.params.scale != self.config.fixed_point_scale:
            raise ArgumentError(f"aggregation scale {self.params.scale} differs from the "
                                f"configured fixed-point scale {self.config.fixed_point_scale}")
        exchange_config(self.endpoint, self.participants, self.coordinator,
                        _digest(self.config, self.schema, self.exact))
        session = None
        if not self.exact and self.others:
            session = network_setup(self.endpoint, self.participants, self.coordinator,
                                    self.params if self.is_coordinator else None, self.rng)
            self.params = session.params
        if self.params is None:
            self.params = AggParams.default(scale=self.config.fixed_point_scale)
        self.summer = SecureSum(self.endpoint, self.participants, self.coordinator, self.params,
                                session, self.exact)
        self._count_samples()
        self._agree_buckets()
        if self.is_coordinator:
            self.model = boost(_CoordinatorSource(self), self.config, len(self.quantiles))
        else:
            self.model = self._follow()
        return self.model

    def _count_samples(self) -> None:
        keys = [round_key(0, domain="count")]
        if not self.is_coordinator:
            self.summer.contribute(keys, [self.shard.n])
            return
        (n_total,) = self.summer.collect(keys, [self.shard.n]) if self.others else [self.shard.n]
        self.n_total = n_total
        if not self.exact and self.others and n_total * self.params.scale >= self.params.half:
            raise RangeError(f"{n_total} samples at scale {self.params.scale} can overflow "
                             f"modulus {self.params.modulus}; use a larger modulus or smaller scale")

    def _agree_buckets(self) -> None:
        specs = self.schema.features
        if len(specs) != self.shard.m:
            raise ArgumentError("schema and data disagree on the number of features")
        continuous = [f for f, s in enumerate(specs) if s.kind == "continuous"]
        columns = {f: self.shard.X[:, f] for f in continuous}
        found: Dict[int, Quantiles] = {}
        if continuous:
            if self.is_coordinator:
                bounds = {f: self.schema.bounds(f) for f in continuous}
                found = quantile_coordinator(self.endpoint, self.summer, columns, self.n_total,
                                             self.config.num_buckets, bounds, self.on_degenerate)
            else:
                found = quantile_participant(self.endpoint, self.summer, columns)
        self.quantiles = [found[f] if f in found else
                          build_discrete_buckets(self.shard.X[:, f], specs[f].classes, f)
                          for f in range(len(specs))]
        self.bins = np.column_stack([assign_to_buckets(self.shard.X[:, f], qt)
                                     for f, qt in enumerate(self.quantiles)])

    # -- one secure sum per tree level ------------------------------------

    def _keys(self, t: int, nodes: Sequence[int]) -> List[int]:
        return [round_key(t, nid, f, j, st, domain="hist")
                for nid in nodes for f, q in enumerate(self.num_buckets)
                for j in range(q) for st in _STATS]

    def _contributions(self, grads: Gradients, node_of: np.ndarray, nodes: Sequence[int]):
        if self.exact:
            gi, hi = _exact_ints(grads.g), _exact_ints(grads.h)
        out = []
        for nid in nodes:
            rows = np.flatnonzero(node_of == nid)
            if self.exact:
                for f, q in enumerate(self.num_buckets):
                    b = self.bins[rows, f]
                    for j in range(q):
                        sel = rows[b == j].tolist()
                        out.append(sum(gi[r] for r in sel))
                        out.append(sum(hi[r] for r in sel))
                continue
            for hist in local_histograms(self.bins, rows, grads, self.num_buckets):
                for j in range(hist.num_buckets):
                    out.append(hist.G[j])
                    out.append(hist.H[j])
        if not self.exact and self.others:
            scale = self.params.scale
            out = [int(round(v * scale)) for v in out]
        return out

    def _decode(self, totals, nodes: Sequence[int]) -> Dict[int, List[Histogram]]:
        if self.exact:
            vals = [v / SHIFT for v in totals]
        elif self.others:
            vals = [v / self.params.scale for v in totals]
        else:
            vals = list(totals)
        it = iter(vals)
        out = {}
        for nid in nodes:
            hs = []
            for q in self.num_buckets:
                G, H = np.zeros(q), np.zeros(q)
                for j in range(q):
                    G[j], H[j] = next(it), next(it)
                hs.append(Histogram(G, H))
            out[nid] = hs
        return out

    def _apply(self, node_of: np.ndarray, splits) -> None:
        for nid, (f, s) in splits.items():
            rows = np.flatnonzero(node_of == nid)
            go_left = self.bins[rows, f] < s
            node_of[rows[go_left]] = 2 * nid + 1
            node_of[rows[~go_left]] = 2 * nid + 2

    def _follow(self) -> GbdtModel:
        """Non-coordinator side of training; rebuilds the model from broadcasts."""
        config = self.config
        y = self.shard.y.astype(np.float64)
        raw = initial_predictions(self.shard.ids, config)
        node_of = np.zeros(self.shard.n, dtype=np.int64)
        trees = []
        for t in range(config.num_trees):
            grads = compute_gradients(y, raw)
            node_of[:] = 0
            nodes = {0: TreeNode(0)}
            frontier = [0]
            weights: Dict[int, float] = {}
            for level in range(max(config.tree_depth, 1) + 1):
                if not frontier:
                    break
                if level < max(config.tree_depth, 1):
                    self.summer.contribute(self._keys(t, frontier),
                                           self._contributions(grads, node_of, frontier))
                env = self.endpoint.recv(Channel.SPLIT, self.coordinator)
                splits, leaves = _unpack_level(env.payload, t)
                if set(splits) | set(leaves) != set(frontier):
                    raise ProtocolError(f"tree {t}: broadcast does not cover the frontier")
                for nid, (f, s) in splits.items():
                    node = nodes[nid]
                    node.feature, node.split_bucket = f, s
                    node.left, node.right = TreeNode(2 * nid + 1), TreeNode(2 * nid + 2)
                    nodes[2 * nid + 1], nodes[2 * nid + 2] = node.left, node.right
                for nid, w in leaves.items():
                    nodes[nid].weight = w
                    weights[nid] = w
                self._apply(node_of, splits)
                frontier = sorted(c for nid in splits for c in (2 * nid + 1, 2 * nid + 2))
            raw = raw + np.array([weights[nid] for nid in node_of])
            trees.append(nodes[0])
        return GbdtModel(trees, len(self.quantiles), config)


class _CoordinatorSource:
    def __init__(self, part: HorizontalParticipant):
        self.part = part
        self.num_buckets = part.num_buckets
        self.labels = part.shard.y.astype(np.float64)
        self.raw = initial_predictions(part.shard.ids, part.config)
        self.node_of = np.zeros(part.shard.n, dtype=np.int64)
        self.grads: Optional[Gradients] = None
        _warn_if_single_class(self.labels)

    def begin_tree(self, t):
        self.grads = compute_gradients(self.labels, self.raw)
        self.node_of[:] = 0

    def histograms(self, t, nodes):
        nodes = sorted(nodes)
        part = self.part
        own = part._contributions(self.grads, self.node_of, nodes)
        totals = part.summer.collect(part._keys(t, nodes), own) if part.others else own
        return part._decode(totals, nodes)

    def apply_level(self, t, splits, leaves):
        self.part.endpoint.broadcast(self.part.others, Channel.SPLIT,
                                     _pack_level(t, splits, leaves))
        self.part._apply(self.node_of, splits)

    def end_tree(self, t, tree):
        weights = {nd.node_id: nd.weight for nd in tree.iter_nodes() if nd.is_leaf}
        self.raw = self.raw + np.array([weights[nid] for nid in self.node_of])


def predict_local(model: GbdtModel, quantiles: Sequence[Quantiles], X, raw: bool = False):
    """Score samples with a replicated model using the agreed bucket boundaries."""
    X = np.asarray(X, dtype=np.float64)
    bins = np.column_stack([assign_to_buckets(X[:, f], qt) for f, qt in enumerate(quantiles)])
    return predict_batch(model, bins, raw=raw)


def train_pooled(shards: Sequence[Dataset], quantiles: Sequence[Quantiles], config: TrainConfig,
                 summation: str = "exact") -> GbdtModel:
    """Reference: all shards pooled in ID order and trained with the same buckets."""
    X = np.vstack([s.X for s in shards])
    y = np.concatenate([s.y for s in shards])
    ids = np.concatenate([s.ids for s in shards])
    order = np.argsort(ids, kind="stable")
    bins = np.column_stack([assign_to_buckets(X[order, f], qt) for f, qt in enumerate(quantiles)])
    return train_on_bins(bins, y[order], [qt.num_buckets for qt in quantiles], config,
                         sample_ids=ids[order], summation=summation)


@dataclass
class HorizontalRun:
    models: Dict[int, GbdtModel]
    quantiles: List[Quantiles]
    network: SimNetwork
    coordinator: int

    @property
    def model(self) -> GbdtModel:
        return self.models[self.coordinator]


def simulate_horizontal(shards: Sequence[Dataset], config: TrainConfig,
                        schema: Optional[Schema] = None, params: Optional[AggParams] = None,
                        exact: bool = False, coordinator: Optional[int] = None,
                        network: Optional[SimNetwork] = None, seed: Optional[int] = None,
                        on_degenerate: str = "raise") -> HorizontalRun:
    """Run every participant on its own thread over an in-process network."""
    l = len(shards)
    if l < 1:
        raise ArgumentError("need at least one participant")
    coordinator = l - 1 if coordinator is None else coordinator
    net = network or SimNetwork()
    params = params or AggParams.default(scale=config.fixed_point_scale)
    participants = list(range(l))
    endpoints = [net.endpoint(p) for p in participants]
    parts = [HorizontalParticipant(
        endpoints[p], shards[p], participants, coordinator, config, schema or shards[p].schema,
        params if p == coordinator else None, exact,
        random.Random(seed * 1000 + p) if seed is not None else None, on_degenerate)
        for p in participants]
    errors: List[BaseException] = []

    def run(part):
        try:
            part.run()
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors.append(exc)
            net.abort(f"participant {part.endpoint.pid} failed: {exc}")

    threads = [threading.Thread(target=run, args=(p,), name=f"horizontal-{p.endpoint.pid}")
               for p in parts]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        primary = [e for e in errors if not isinstance(e, PeerGone)]
        raise (primary or errors)[0]
    return HorizontalRun({p.endpoint.pid: p.model for p in parts}, parts[coordinator].quantiles,
                         net, coordinator)
