"""Distributed quantile lookup for horizontally partitioned features.

The coordinator binary-searches each cut ``Q_j`` over the public value range.
For every probe, each participant counts its remaining values strictly below
``Q_j``; only the secure-aggregation total ever reaches the coordinator.
After a cut is fixed, every participant drops its values below it and the
next cut is searched the same way. Searches for several features run in
lockstep, one message flight per iteration.

Discrete features skip the search: one bucket per class.
"""

from __future__ import annotations

import logging
import math
import struct
import threading
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ArgumentError, DataError, ProtocolError, QuantileDegenerateError,
                     PeerGone, QuantileWarning, SchemaError)
from .secagg import AggParams, SecureSum, round_key
from .transport import Channel

log = logging.getLogger(__name__)

__all__ = [
    "Quantiles",
    "FeatureBounds",
    "count_below",
    "assign_to_buckets",
    "build_discrete_buckets",
    "CutSearch",
    "quantile_coordinator",
    "quantile_participant",
    "find_quantiles",
]

MAX_ITERS = 64
WIDTH_FLOOR = 1e-9

MSG_STEP = 0x01
MSG_DONE = 0x02


@dataclass(frozen=True)
class FeatureBounds:
    feature_index: int
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ArgumentError(f"feature {self.feature_index}: bounds need low < high")


@dataclass(frozen=True)
class Quantiles:
    """Cut points of a continuous feature, or the class list of a discrete one."""

    feature_index: int
    kind: str
    cuts: Tuple[float, ...] = ()
    classes: Tuple = ()

    def __post_init__(self):
        if self.kind == "continuous":
            if any(b < a for a, b in zip(self.cuts, self.cuts[1:])):
                raise ArgumentError("quantile cuts must be non-decreasing")
        elif self.kind == "discrete":
            if len(set(self.classes)) != len(self.classes):
                raise ArgumentError("discrete classes must be distinct")
        else:
            raise ArgumentError(f"unknown quantile kind {self.kind!r}")

    @property
    def num_buckets(self) -> int:
        return len(self.cuts) + 1 if self.kind == "continuous" else len(self.classes)

    def threshold(self, split_bucket: int) -> float:
        """Value realizing "buckets ``< split_bucket`` go left" for a continuous feature."""
        return self.cuts[split_bucket - 1]


def count_below(local_values, Q: float) -> int:
    return int(np.count_nonzero(np.asarray(local_values, dtype=np.float64) < Q))


def assign_to_buckets(values, quantiles: Quantiles) -> np.ndarray:
    """0-based bucket per value: the number of cuts ``<= value``, or the class position."""
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise DataError(f"feature {quantiles.feature_index}: NaN cannot be bucketized")
    if quantiles.kind == "continuous":
        return np.searchsorted(np.asarray(quantiles.cuts, dtype=np.float64), values, side="right")
    position = {float(c): j for j, c in enumerate(quantiles.classes)}
    try:
        return np.array([position[float(v)] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise SchemaError(
            f"feature {quantiles.feature_index}: value {exc.args[0]} is not a declared class"
        ) from None


def build_discrete_buckets(values, classes: Sequence, feature_index: int = 0) -> Quantiles:
    """One bucket per declared class, ordered by class value."""
    ordered = tuple(sorted(classes))
    quantiles = Quantiles(feature_index, "discrete", classes=ordered)
    assign_to_buckets(values, quantiles)  # rejects values outside the schema
    return quantiles


class CutSearch:
    """Coordinator-side binary search for all cuts of one feature.

    The per-cut target is ``round(remaining / buckets_left)``, which equals
    ``n/q`` when ``q`` divides ``n`` and otherwise keeps every bucket within
    one of ``n/q``. The search interval for cut ``j`` starts at the previous
    cut so cuts are monotone.
    """

    def __init__(self, feature_index: int, n_total: int, q: int, bounds: FeatureBounds,
                 max_iters: int = MAX_ITERS, width_floor: float = WIDTH_FLOOR):
        if q < 2:
            raise ArgumentError("need at least 2 buckets")
        self.feature_index = feature_index
        self.q = q
        self.bounds = bounds
        self.max_iters = max_iters
        self.min_width = width_floor * (bounds.high - bounds.low)
        self.remaining = n_total
        self.cuts: List[float] = []
        self.counts: List[int] = []
        self.misses: List[int] = []
        self._start_cut()

    @property
    def j(self) -> int:
        return len(self.cuts) + 1

    @property
    def done(self) -> bool:
        return len(self.cuts) == self.q - 1

    def _start_cut(self) -> None:
        if self.done:
            return
        self.lo = self.cuts[-1] if self.cuts else self.bounds.low
        self.hi = self.bounds.high
        self.target = int(round(self.remaining / (self.q - len(self.cuts))))
        self.iteration = 0
        self.best: Optional[Tuple[int, float, int]] = None
        self.probe = (self.lo + self.hi) / 2.0

    def round_key(self) -> int:
        return round_key(self.feature_index, self.j, self.iteration, domain="quantile")

    def update(self, count: int) -> Optional[float]:
        """Feed the aggregated count for the current probe; returns the cut once fixed."""
        Q = self.probe
        self.iteration += 1
        miss = abs(count - self.target)
        if self.best is None or miss < self.best[0]:
            self.best = (miss, Q, count)
        if count > self.target:
            self.hi = Q
        elif count < self.target:
            self.lo = Q
        if miss == 0 or self.iteration >= self.max_iters or self.hi - self.lo < self.min_width:
            miss, Q, count = self.best
            self.cuts.append(Q)
            self.counts.append(count)
            self.misses.append(miss)
            self.remaining -= count
            self._start_cut()
            return Q
        self.probe = (self.lo + self.hi) / 2.0
        return None

    def result(self) -> Quantiles:
        return Quantiles(self.feature_index, "continuous", cuts=tuple(self.cuts))


def _pack_step(cuts, probes) -> bytes:
    # QuantileProbe{feature:u32, j:u32, Q:f64}; fixed cuts use the same layout
    out = [bytes([MSG_STEP]), struct.pack(">I", len(cuts))]
    out += [struct.pack(">IId", f, j, Q) for f, j, Q in cuts]
    out.append(struct.pack(">I", len(probes)))
    out += [struct.pack(">IId", f, j, Q) for f, j, Q in probes]
    return b"".join(out)


def _unpack_step(payload: bytes):
    off = 1
    (nc,) = struct.unpack_from(">I", payload, off)
    off += 4
    cuts = [struct.unpack_from(">IId", payload, off + 16 * k) for k in range(nc)]
    off += 16 * nc
    (npr,) = struct.unpack_from(">I", payload, off)
    off += 4
    probes = [struct.unpack_from(">IId", payload, off + 16 * k) for k in range(npr)]
    return cuts, probes


class _LocalValues:
    def __init__(self, columns: Dict[int, np.ndarray]):
        self.values = {f: np.asarray(v, dtype=np.float64) for f, v in columns.items()}

    def cut(self, f: int, Q: float) -> None:
        v = self.values[f]
        self.values[f] = v[v >= Q]

    def count(self, f: int, Q: float) -> int:
        return count_below(self.values[f], Q)


def quantile_coordinator(endpoint, summer: SecureSum, columns: Dict[int, np.ndarray],
                         n_total: int, q: int, bounds: Dict[int, FeatureBounds],
                         on_degenerate: str = "raise") -> Dict[int, Quantiles]:
    """Drive the lockstep search for every feature in ``bounds``.

    ``columns`` are the coordinator's own values per feature.
    """
    local = _LocalValues(columns)
    searches = {f: CutSearch(f, n_total, q, bounds[f]) for f in sorted(bounds)}
    fixed: List[Tuple[int, int, float]] = []
    others = summer.others
    while True:
        active = [s for s in searches.values() if not s.done]
        probes = [(s.feature_index, s.j, s.probe) for s in active]
        if not probes:
            endpoint.broadcast(others, Channel.QUANTILE, bytes([MSG_DONE]) + _pack_step(fixed, [])[1:])
            break
        endpoint.broadcast(others, Channel.QUANTILE, _pack_step(fixed, probes))
        for f, _, Q in fixed:
            local.cut(f, Q)
        fixed = []
        keys = [s.round_key() for s in active]
        own = [local.count(f, Q) for f, _, Q in probes]
        totals = summer.collect(keys, own)
        for s, total in zip(active, totals):
            j = s.j
            Q = s.update(total)
            if Q is not None:
                fixed.append((s.feature_index, j, Q))
    result = {f: s.result() for f, s in searches.items()}
    degenerate = {f: s.misses for f, s in searches.items() if any(s.misses)}
    if degenerate:
        msg = ", ".join(f"feature {f} missed targets by {m}" for f, m in degenerate.items())
        if on_degenerate == "raise":
            raise QuantileDegenerateError(f"quantile targets unreachable: {msg}", cuts=result)
        warnings.warn(f"keeping best cuts: {msg}", QuantileWarning, stacklevel=2)
    return result


def quantile_participant(endpoint, summer: SecureSum,
                         columns: Dict[int, np.ndarray]) -> Dict[int, Quantiles]:
    """Answer probes until the coordinator says the search is over.

    Returns the cuts announced along the way, per feature.
    """
    local = _LocalValues(columns)
    iterations: Dict[Tuple[int, int], int] = {}
    announced: Dict[int, Dict[int, float]] = {f: {} for f in columns}
    while True:
        env = endpoint.recv(Channel.QUANTILE, summer.aggregator)
        kind = env.payload[0]
        cuts, probes = _unpack_step(env.payload)
        for f, j, Q in cuts:
            local.cut(f, Q)
            announced.setdefault(f, {})[j] = Q
        if kind == MSG_DONE:
            return {f: Quantiles(f, "continuous", cuts=tuple(c[j] for j in sorted(c)))
                    for f, c in announced.items()}
        if kind != MSG_STEP:
            raise ProtocolError(f"unexpected quantile message type {kind}")
        keys, counts = [], []
        for f, j, Q in probes:
            it = iterations.get((f, j), 0)
            iterations[(f, j)] = it + 1
            keys.append(round_key(f, j, it, domain="quantile"))
            counts.append(local.count(f, Q))
        summer.contribute(keys, counts)


def find_quantiles(shards: Sequence, q: int, bounds: FeatureBounds,
                   params: Optional[AggParams] = None, exact: bool = False,
                   coordinator: Optional[int] = None, network=None,
                   on_degenerate: str = "raise", seed: Optional[int] = None,
                   kind: str = "continuous") -> Quantiles:
    """Run the lookup for one feature whose values are split across ``shards``.

    Spins up an in-process network (or uses ``network``, a
    :class:`~fedgbdt.transport.SimNetwork`), sets up secure aggregation and
    runs one thread per participant.
    """
    import random

    from .secagg import network_setup
    from .transport import SimNetwork

    if kind != "continuous":
        raise ArgumentError("binary search applies to continuous features; "
                            "use build_discrete_buckets for discrete ones")
    l = len(shards)
    if l < 1:
        raise ArgumentError("need at least one participant")
    coordinator = l - 1 if coordinator is None else coordinator
    params = params or AggParams.test_profile()
    net = network or SimNetwork()
    endpoints = [net.endpoint(i) for i in range(l)]
    n_total = sum(len(s) for s in shards)
    f = bounds.feature_index
    results: Dict[int, object] = {}
    errors: List[BaseException] = []

    def run(pid):
        try:
            rng = random.Random(seed * 1000 + pid) if seed is not None else None
            ep = endpoints[pid]
            participants = list(range(l))
            session = None
            if not exact and l > 1:
                session = network_setup(ep, participants, coordinator,
                                        params if pid == coordinator else None, rng)
            summer = SecureSum(ep, participants, coordinator, params, session, exact)
            cols = {f: np.asarray(shards[pid], dtype=np.float64)}
            if pid == coordinator:
                results[pid] = quantile_coordinator(ep, summer, cols, n_total, q, {f: bounds},
                                                    on_degenerate)[f]
            else:
                quantile_participant(ep, summer, cols)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors.append(exc)
            net.abort(f"participant {pid} failed: {exc}")

    threads = [threading.Thread(target=run, args=(pid,)) for pid in range(l)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [e for e in errors if not isinstance(e, PeerGone)]
        raise (primary or errors)[0]
    return results[coordinator]
