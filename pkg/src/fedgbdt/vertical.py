"""Vertical federated training: features split by column, labels with one party.

The active participant holds the labels and some features. Each passive
participant sorts its own features into equal-frequency buckets, perturbs
the bucket membership with q-ary randomized response, and uploads the
resulting sample-ID sets once. From then on the active participant trains
entirely on its own: gradients never leave it. Passive parties only learn
which of their features and buckets were chosen for a split, so they can
store a concrete value threshold, and they answer routing bits at
prediction time.

Wire payloads (big-endian):

bucket channel, one message per passive participant
    u32 feature count, then per feature u32 length + bucket assignment bytes
split channel, active to passive
    BEGIN  u8 1, u32 training session
    NOTICE u8 2, u32 tree, u32 node, u32 feature, u32 split bucket
    END    u8 3
predict channel
    QUERY    u8 1, u32 count, count x (u32 tree, u32 node, u32 sample ID)
    ANSWER   u8 2, u32 count, count x u8 (1 = value below threshold)
    SHUTDOWN u8 3
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import Dataset, auc, partition_vertical
from .errors import ArgumentError, IntegrityError, PeerGone, ProtocolError
from .gbdt import (GbdtModel, Gradients, TrainConfig, boost, build_histogram, compute_gradients,
                   initial_predictions, _warn_if_single_class)
from .ldp import BucketAssignment, boundary_threshold, ldp_rng, randomize_buckets, sort_and_partition
from .session import exchange_config
from .transport import Channel, SimNetwork

__all__ = [
    "PassiveParticipant",
    "ActiveParticipant",
    "VerticalSimulation",
    "run_vertical",
    "VerticalRun",
]

MSG_BEGIN, MSG_NOTICE, MSG_END = 1, 2, 3
MSG_QUERY, MSG_ANSWER, MSG_SHUTDOWN = 1, 2, 3

_NOTICE = struct.Struct(">IIII")
_QUERY = struct.Struct(">III")


def _lookup_table(datasets: Sequence[Dataset]) -> Tuple[Dict[int, int], np.ndarray]:
    """Merge rows of several same-column datasets, keyed by sample ID (first wins)."""
    index: Dict[int, int] = {}
    blocks = []
    row = 0
    for ds in datasets:
        for i in ds.ids.tolist():
            index.setdefault(i, row)
            row += 1
        blocks.append(ds.X)
    return index, np.vstack(blocks) if blocks else np.zeros((0, 0))


class PassiveParticipant:
    """Feature owner without labels.

    ``extra`` holds further samples (e.g. a test set, same columns) that the
    active participant may later ask routing bits for.
    """

    def __init__(self, endpoint, shard: Dataset, active: int, config: TrainConfig,
                 extra: Sequence[Dataset] = ()):
        self.endpoint = endpoint
        self.shard = shard
        self.active = active
        self.config = config
        self.features = [int(f) for f in shard.feature_index]
        self.partitions: Dict[int, BucketAssignment] = {}
        self.thresholds: Dict[Tuple[int, int], Tuple[int, float]] = {}
        self.uploads = 0
        self._row_of, self._values = _lookup_table([shard, *extra])

    def handshake(self, participants: Sequence[int]) -> None:
        exchange_config(self.endpoint, participants, self.active, self.config.digest())

    def prepare(self) -> List[BucketAssignment]:
        """Bucketize, perturb and upload every local feature; returns what was sent."""
        if self.uploads:
            raise ProtocolError("buckets were already uploaded")
        sent = []
        parts = [struct.pack(">I", len(self.features))]
        for col, f in enumerate(self.features):
            exact = sort_and_partition(self.shard.X[:, col], self.config.num_buckets,
                                       ids=self.shard.ids, feature_index=f)
            self.partitions[f] = exact
            noisy = randomize_buckets(exact, self.config.epsilon,
                                      ldp_rng(self.config.rng_seed, f))
            blob = noisy.to_bytes()
            parts.append(struct.pack(">I", len(blob)) + blob)
            sent.append(noisy)
        self.endpoint.send(self.active, Channel.BUCKET, b"".join(parts))
        self.uploads += 1
        return sent

    def _record_split(self, t: int, node: int, f: int, s: int) -> None:
        if f not in self.partitions:
            raise ProtocolError(f"split notice for feature {f}, which is not held here")
        col = self.features.index(f)
        thr = boundary_threshold(self.shard.X[:, col], self.shard.ids, self.partitions[f], s)
        self.thresholds[(t, node)] = (f, thr)

    def _answer(self, payload: bytes) -> bytes:
        (count,) = struct.unpack_from(">I", payload, 1)
        bits = bytearray(count)
        for k in range(count):
            t, node, sid = _QUERY.unpack_from(payload, 5 + _QUERY.size * k)
            try:
                f, thr = self.thresholds[(t, node)]
                row = self._row_of[sid]
            except KeyError:
                raise ProtocolError(f"no threshold or sample for query ({t}, {node}, {sid})") \
                    from None
            bits[k] = 1 if self._values[row, self.features.index(f)] < thr else 0
        return bytes([MSG_ANSWER]) + struct.pack(">I", count) + bytes(bits)

    def serve(self) -> None:
        """Handle split notices and routing queries until told to stop."""
        while True:
            env = self.endpoint.recv([Channel.SPLIT, Channel.PREDICT], self.active, timeout=None)
            kind = env.payload[0]
            if env.channel == Channel.SPLIT:
                if kind == MSG_BEGIN:
                    self.thresholds = {}
                elif kind == MSG_NOTICE:
                    self._record_split(*_NOTICE.unpack_from(env.payload, 1))
                elif kind != MSG_END:
                    raise ProtocolError(f"unexpected split message type {kind}")
            elif kind == MSG_QUERY:
                self.endpoint.send(self.active, Channel.PREDICT, self._answer(env.payload))
            elif kind == MSG_SHUTDOWN:
                return
            else:
                raise ProtocolError(f"unexpected predict message type {kind}")


class _VerticalSource:
    """Histogram source over the (perturbed) bucket sets, in row space."""

    def __init__(self, owner: "ActiveParticipant", config: TrainConfig, summation: str):
        self.owner = owner
        self.config = config
        self.summation = summation
        self.assignments = owner.assignments
        self.num_buckets = [a.num_buckets for a in self.assignments]
        self.labels = owner.shard.y.astype(np.float64)
        self.raw = initial_predictions(owner.shard.ids, config)
        self.grads: Optional[Gradients] = None
        self.node_rows: Dict[int, np.ndarray] = {}
        self.leaf_rows: Dict[int, np.ndarray] = {}

    def begin_tree(self, t):
        self.grads = compute_gradients(self.labels, self.raw)
        self.node_rows = {0: np.arange(len(self.labels))}
        self.leaf_rows = {}

    def histograms(self, t, nodes):
        return {nid: [build_histogram(a, self.grads, self.node_rows[nid], self.summation)
                      for a in self.assignments] for nid in nodes}

    def apply_level(self, t, splits, leaves):
        for nid, (f, s) in splits.items():
            rows = self.node_rows.pop(nid)
            left = np.intersect1d(rows, self.assignments[f].left_ids(s), assume_unique=True)
            self.node_rows[2 * nid + 1] = left
            self.node_rows[2 * nid + 2] = np.setdiff1d(rows, left, assume_unique=True)
            self.owner._notify_split(t, nid, f, s)
        for nid in leaves:
            self.leaf_rows[nid] = self.node_rows.pop(nid)

    def end_tree(self, t, tree):
        for node in tree.iter_nodes():
            if node.is_leaf:
                rows = self.leaf_rows[node.node_id]
                self.raw[rows] = self.raw[rows] + node.weight


class ActiveParticipant:
    """Label holder; trains on received bucket sets and drives prediction.

    Sample IDs in ``shard`` must be ascending; bucket IDs are mapped to row
    positions on arrival.
    """

    def __init__(self, endpoint, shard: Dataset, passives: Sequence[int], config: TrainConfig,
                 summation: str = "sequential"):
        if shard.y is None:
            raise ArgumentError("the active participant needs labels")
        if np.any(np.diff(shard.ids) <= 0):
            raise ArgumentError("sample IDs must be strictly ascending")
        self.endpoint = endpoint
        self.shard = shard
        self.passives = list(passives)
        self.config = config
        self.summation = summation
        self.assignments: List[BucketAssignment] = []
        self.owner_of: Dict[int, int] = {}
        self.uploads_received = 0
        self.own_thresholds: Dict[Tuple[int, int], float] = {}
        self._own_partitions: Dict[int, BucketAssignment] = {}
        self._session = 0
        self._model: Optional[GbdtModel] = None

    @property
    def participants(self) -> List[int]:
        return sorted(self.passives + [self.endpoint.pid])

    def handshake(self) -> None:
        exchange_config(self.endpoint, self.participants, self.endpoint.pid, self.config.digest())

    def _to_rows(self, a: BucketAssignment) -> BucketAssignment:
        ids = self.shard.ids
        buckets = []
        for b in a.buckets:
            pos = np.searchsorted(ids, b)
            ok = (pos < len(ids)) & (ids[np.minimum(pos, len(ids) - 1)] == b)
            if not ok.all():
                raise IntegrityError(f"feature {a.feature_index}: unknown sample IDs "
                                     f"{b[~ok][:5].tolist()}")
            buckets.append(np.sort(pos))
        rows = np.concatenate(buckets) if buckets else np.empty(0, dtype=np.int64)
        if len(rows) != len(ids) or len(np.unique(rows)) != len(ids):
            raise IntegrityError(f"feature {a.feature_index}: buckets do not cover every sample "
                                 "exactly once")
        return BucketAssignment(a.feature_index, tuple(buckets), a.epsilon_applied)

    def receive_buckets(self) -> None:
        """Collect one upload per passive participant and bucketize own features."""
        if self.assignments:
            raise ProtocolError("buckets were already received")
        by_feature: Dict[int, BucketAssignment] = {}
        pending = set(self.passives)
        while pending:
            env = self.endpoint.recv(Channel.BUCKET, sorted(pending))
            pending.discard(env.sender)
            payload = env.payload
            (count,) = struct.unpack_from(">I", payload, 0)
            off = 4
            for _ in range(count):
                (ln,) = struct.unpack_from(">I", payload, off)
                a = BucketAssignment.from_bytes(payload[off + 4:off + 4 + ln], self.config.epsilon)
                off += 4 + ln
                if a.feature_index in by_feature:
                    raise ProtocolError(f"feature {a.feature_index} uploaded twice")
                by_feature[a.feature_index] = self._to_rows(a)
                self.owner_of[a.feature_index] = env.sender
            self.uploads_received += 1
        rows = np.arange(self.shard.n)
        for col, f in enumerate(int(x) for x in self.shard.feature_index):
            if f in by_feature:
                raise ProtocolError(f"feature {f} is held by more than one participant")
            a = sort_and_partition(self.shard.X[:, col], self.config.num_buckets, ids=rows,
                                   feature_index=f)
            self._own_partitions[f] = a
            by_feature[f] = a
            self.owner_of[f] = self.endpoint.pid
        if sorted(by_feature) != list(range(len(by_feature))):
            raise ProtocolError(f"feature indices {sorted(by_feature)} are not 0..m-1")
        self.assignments = [by_feature[f] for f in range(len(by_feature))]

    def _notify_split(self, t: int, node: int, f: int, s: int) -> None:
        owner = self.owner_of[f]
        if owner == self.endpoint.pid:
            col = list(self.shard.feature_index).index(f)
            self.own_thresholds[(t, node)] = boundary_threshold(
                self.shard.X[:, col], np.arange(self.shard.n), self._own_partitions[f], s)
        else:
            self.endpoint.send(owner, Channel.SPLIT,
                               bytes([MSG_NOTICE]) + _NOTICE.pack(t, node, f, s))

    def train(self, config: Optional[TrainConfig] = None) -> GbdtModel:
        """Train on the stored buckets; callable repeatedly without new uploads.

        ``config`` may change trees, depth, lambda, learning rate and the
        initial score, but not the bucket count or privacy level that the
        uploads were built with.
        """
        config = config or self.config
        if not self.assignments:
            raise ProtocolError("no buckets yet; call receive_buckets first")
        if config.num_buckets != self.config.num_buckets or config.epsilon != self.config.epsilon:
            raise ArgumentError("bucket count and epsilon are fixed by the uploaded buckets")
        _warn_if_single_class(self.shard.y)
        self._session += 1
        self.own_thresholds = {}
        self.endpoint.broadcast(self.passives, Channel.SPLIT,
                                bytes([MSG_BEGIN]) + struct.pack(">I", self._session))
        source = _VerticalSource(self, config, self.summation)
        model = boost(source, config, len(self.assignments))
        self.endpoint.broadcast(self.passives, Channel.SPLIT, bytes([MSG_END]))
        self._model = model
        return model

    def predict(self, own: Dataset, raw: bool = False) -> np.ndarray:
        """Probabilities for samples whose other features sit with the passives.

        ``own`` carries the active participant's columns for those samples.
        All trees advance one level per round, with one query batch per
        passive participant.
        """
        model = self._model
        if model is None:
            raise ProtocolError("no trained model")
        k = own.n
        own_col = {int(f): c for c, f in enumerate(own.feature_index)}
        position = [np.zeros(k, dtype=np.int64) for _ in model.trees]
        nodes = [{nd.node_id: nd for nd in tree.iter_nodes()} for tree in model.trees]
        while True:
            queries: Dict[int, List[Tuple[int, int, int]]] = {}
            local: List[Tuple[int, int, bool]] = []
            for t in range(len(model.trees)):
                for i in range(k):
                    nd = nodes[t][int(position[t][i])]
                    if nd.is_leaf:
                        continue
                    owner = self.owner_of[nd.feature]
                    if owner == self.endpoint.pid:
                        v = own.X[i, own_col[nd.feature]]
                        local.append((t, i, bool(v < self.own_thresholds[(t, nd.node_id)])))
                    else:
                        queries.setdefault(owner, []).append((t, nd.node_id, i))
            if not queries and not local:
                break
            for p, entries in queries.items():
                body = b"".join(_QUERY.pack(t, nid, int(own.ids[i])) for t, nid, i in entries)
                self.endpoint.send(p, Channel.PREDICT, bytes([MSG_QUERY])
                                   + struct.pack(">I", len(entries)) + body)
            for p, entries in queries.items():
                env = self.endpoint.recv(Channel.PREDICT, p)
                if env.payload[0] != MSG_ANSWER:
                    raise ProtocolError(f"expected routing answers from {p}")
                (count,) = struct.unpack_from(">I", env.payload, 1)
                if count != len(entries):
                    raise ProtocolError(f"participant {p} answered {count} of {len(entries)}")
                for (t, _, i), bit in zip(entries, env.payload[5:5 + count]):
                    local.append((t, i, bool(bit)))
            for t, i, go_left in local:
                nid = int(position[t][i])
                position[t][i] = 2 * nid + 1 if go_left else 2 * nid + 2
        total = np.zeros(k)
        for t in range(len(model.trees)):
            total += np.array([nodes[t][int(n)].weight for n in position[t]])
        return total if raw else expit(total)

    def shutdown(self) -> None:
        self.endpoint.broadcast(self.passives, Channel.PREDICT, bytes([MSG_SHUTDOWN]))


class VerticalSimulation:
    """All participants in one process; passives run on background threads.

    Column shards follow :func:`~fedgbdt.data.partition_vertical`; the last
    participant is active. ``holdout`` datasets (full width) are split the
    same way so their samples can be scored with :meth:`predict`.
    """

    def __init__(self, train: Dataset, l: int, config: TrainConfig,
                 holdout: Sequence[Dataset] = (), network: Optional[SimNetwork] = None,
                 summation: str = "sequential"):
        self.l = l
        self.net = network or SimNetwork()
        shards = partition_vertical(train, l)
        held = [partition_vertical(h, l) for h in holdout]
        self.active_id = l - 1
        participants = list(range(l))
        self.errors: List[BaseException] = []
        self.passives: List[PassiveParticipant] = []
        self._threads = []
        for pid in range(l - 1):
            p = PassiveParticipant(self.net.endpoint(pid), shards[pid], self.active_id, config,
                                   extra=[h[pid] for h in held])
            self.passives.append(p)
            th = threading.Thread(target=self._run_passive, args=(p, participants),
                                  name=f"passive-{pid}", daemon=True)
            self._threads.append(th)
        self.active = ActiveParticipant(self.net.endpoint(self.active_id), shards[-1],
                                        list(range(l - 1)), config, summation)
        for th in self._threads:
            th.start()
        try:
            self.active.handshake()
            self.active.receive_buckets()
        except BaseException:
            self._fail("active participant failed during setup")
            raise

    def _run_passive(self, p: PassiveParticipant, participants) -> None:
        try:
            p.handshake(participants)
            p.prepare()
            p.serve()
        except BaseException as exc:  # noqa: BLE001 - surfaced by close()
            self.errors.append(exc)
            self.net.abort(f"participant {p.endpoint.pid} failed: {exc}")

    def _fail(self, reason: str) -> None:
        self.net.abort(reason)
        for th in self._threads:
            th.join(timeout=5)

    def train(self, config: Optional[TrainConfig] = None) -> GbdtModel:
        return self.active.train(config)

    def predict(self, holdout: Dataset, raw: bool = False) -> np.ndarray:
        own = partition_vertical(holdout, self.l)[-1]
        return self.active.predict(own, raw)

    def close(self) -> None:
        try:
            self.active.shutdown()
        except PeerGone:
            pass
        for th in self._threads:
            th.join(timeout=30)
        primary = [e for e in self.errors if not isinstance(e, PeerGone)]
        if primary:
            raise primary[0]

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fail("aborted")


@dataclass
class VerticalRun:
    model: GbdtModel
    probabilities: Optional[np.ndarray]
    auc: Optional[float]
    network: SimNetwork
    uploads: int


def run_vertical(train: Dataset, l: int, config: TrainConfig, test: Optional[Dataset] = None,
                 network: Optional[SimNetwork] = None,
                 summation: str = "sequential") -> VerticalRun:
    """Train once (and score ``test`` if given) over an in-process network."""
    with VerticalSimulation(train, l, config, [test] if test is not None else [], network,
                            summation) as sim:
        model = sim.train()
        probs = sim.predict(test) if test is not None else None
    score = auc(test.y, probs) if test is not None else None
    return VerticalRun(model, probs, score, sim.net, sim.active.uploads_received)
