"""Equal-frequency bucketization and randomized-response bucket perturbation.

A passive participant sorts one feature column, cuts it into ``q`` buckets of
(nearly) equal size and, before revealing which sample IDs landed in which
bucket, moves every sample to a different bucket with a small probability.
The perturbation is ``k``-ary randomized response over bucket indices and
gives epsilon-local differential privacy per sample.

Randomness comes from numpy's Philox4x32-10 counter-based generator keyed by
``SeedSequence([seed, feature_index])`` (see :func:`ldp_rng`), so the same
seed reproduces the same perturbation on any platform.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ArgumentError, DataError, FrameError, IntegrityError

__all__ = [
    "BucketAssignment",
    "sort_and_partition",
    "randomize_buckets",
    "stay_probability",
    "move_probability",
    "transition_matrix",
    "ldp_rng",
    "boundary_threshold",
]


@dataclass(frozen=True, eq=False)
class BucketAssignment:
    """Partition of one feature's sample IDs into ordered buckets.

    Buckets are 0-based here: bucket ``0`` holds the smallest feature values.
    Each bucket is a sorted ``int64`` array of sample IDs.
    """

    feature_index: int
    buckets: tuple
    epsilon_applied: float = math.inf
    _lookup: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_buckets(self) -> int:
        return len(self.buckets)

    def sizes(self) -> list:
        return [len(b) for b in self.buckets]

    def sample_ids(self) -> np.ndarray:
        """All sample IDs in ascending order."""
        if not self.buckets:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(self.buckets))

    def _dense(self) -> np.ndarray:
        dense = self._lookup.get("dense")
        if dense is None:
            ids = [b for b in self.buckets if len(b)]
            top = int(max(b[-1] for b in ids)) + 1 if ids else 0
            dense = np.full(top, -1, dtype=np.int64)
            for j, b in enumerate(self.buckets):
                dense[b] = j
            self._lookup["dense"] = dense
        return dense

    def bucket_of(self, ids) -> np.ndarray:
        """Bucket index for every ID in ``ids``.

        Raises:
            IntegrityError: if some ID is in no bucket.
        """
        ids = np.asarray(ids, dtype=np.int64)
        dense = self._dense()
        out = np.full(ids.shape, -1, dtype=np.int64)
        inside = (ids >= 0) & (ids < len(dense))
        out[inside] = dense[ids[inside]]
        if (out < 0).any():
            missing = ids[out < 0][:5].tolist()
            raise IntegrityError(
                f"feature {self.feature_index}: sample IDs {missing} are in no bucket"
            )
        return out

    def left_ids(self, split_bucket: int) -> np.ndarray:
        """Sorted IDs of buckets ``0 .. split_bucket-1`` (the left side)."""
        parts = self.buckets[:split_bucket]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def same_partition(self, other: "BucketAssignment") -> bool:
        return (
            self.feature_index == other.feature_index
            and self.num_buckets == other.num_buckets
            and all(np.array_equal(a, b) for a, b in zip(self.buckets, other.buckets))
        )

    # -- wire format ------------------------------------------------------
    # feature_index:u32, q:u32, then per bucket count:u32 followed by count
    # sample IDs as u32. Big-endian throughout.

    def to_bytes(self) -> bytes:
        parts = [struct.pack(">II", self.feature_index, self.num_buckets)]
        for b in self.buckets:
            if len(b) and (b[0] < 0 or b[-1] > 0xFFFFFFFF):
                raise ArgumentError("sample IDs must fit in 32 bits for the wire format")
            parts.append(struct.pack(">I", len(b)))
            parts.append(np.asarray(b, dtype=">u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes, epsilon_applied: float = math.inf) -> "BucketAssignment":
        if len(payload) < 8:
            raise FrameError("bucket upload shorter than its header")
        feature, q = struct.unpack_from(">II", payload, 0)
        off = 8
        buckets = []
        for _ in range(q):
            if off + 4 > len(payload):
                raise FrameError("bucket upload truncated")
            (count,) = struct.unpack_from(">I", payload, off)
            off += 4
            end = off + 4 * count
            if end > len(payload):
                raise FrameError("bucket upload truncated")
            ids = np.frombuffer(payload, dtype=">u4", count=count, offset=off).astype(np.int64)
            buckets.append(ids)
            off = end
        if off != len(payload):
            raise FrameError("trailing bytes after bucket upload")
        return cls(feature, tuple(buckets), epsilon_applied)


def _bucket_sizes(n: int, q: int) -> list:
    # front-loaded remainder: the first n % q buckets get one extra sample
    base, extra = divmod(n, q)
    return [base + 1 if j < extra else base for j in range(q)]


def sort_and_partition(values, q: int, ids=None, feature_index: int = 0) -> BucketAssignment:
    """Sort a feature column and cut it into ``q`` equal-frequency buckets.

    Ties in value are ordered by ascending sample ID, so equal values may end
    up on both sides of a bucket boundary.

    Args:
        values: feature values, one per sample.
        q: number of buckets, ``2 <= q <= n``.
        ids: sample IDs aligned with ``values``; defaults to ``0..n-1``.
        feature_index: recorded on the result.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != n:
        raise ArgumentError("ids and values differ in length")
    if q < 2:
        raise ArgumentError(f"need at least 2 buckets, got {q}")
    if n < q:
        raise ArgumentError(f"cannot cut {n} samples into {q} buckets")
    if np.isnan(values).any():
        raise DataError(f"feature {feature_index} contains NaN")
    order = np.lexsort((ids, values))
    sorted_ids = ids[order]
    buckets = []
    start = 0
    for size in _bucket_sizes(n, q):
        buckets.append(np.sort(sorted_ids[start:start + size]))
        start += size
    return BucketAssignment(feature_index, tuple(buckets))


def stay_probability(epsilon: float, q: int) -> float:
    """``e^eps / (e^eps + q - 1)``, evaluated without overflow."""
    if epsilon == math.inf:
        return 1.0
    return 1.0 / (1.0 + (q - 1) * math.exp(-epsilon))


def move_probability(epsilon: float, q: int) -> float:
    """Probability of landing in one *specific* other bucket: ``1 / (e^eps + q - 1)``."""
    if epsilon == math.inf:
        return 0.0
    return math.exp(-epsilon) / (1.0 + (q - 1) * math.exp(-epsilon))


def transition_matrix(epsilon: float, q: int) -> np.ndarray:
    """Closed-form ``P[out = column | in = row]`` of the mechanism."""
    m = np.full((q, q), move_probability(epsilon, q))
    np.fill_diagonal(m, stay_probability(epsilon, q))
    return m


def ldp_rng(seed: int, feature_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, feature_index])))


def randomize_buckets(assignment: BucketAssignment, epsilon: float,
                      rng: Optional[np.random.Generator] = None) -> BucketAssignment:
    """Apply q-ary randomized response to every sample's bucket.

    Each sample keeps its bucket with probability ``e^eps/(e^eps+q-1)`` and
    otherwise moves to one of the other ``q-1`` buckets uniformly. Samples
    are processed in ascending ID order, drawing one uniform and one integer
    per sample, so the output depends only on the input and the generator
    state. ``epsilon = inf`` returns the input unchanged.
    """
    if not (epsilon > 0):
        raise ArgumentError(f"epsilon must be positive, got {epsilon}")
    if epsilon == math.inf:
        return assignment
    if rng is None:
        raise ArgumentError("a seeded generator is required for finite epsilon")
    q = assignment.num_buckets
    ids = assignment.sample_ids()
    old = assignment.bucket_of(ids)
    u = rng.random(len(ids))
    r = rng.integers(0, q - 1, size=len(ids))
    moved = r + (r >= old)
    new = np.where(u < stay_probability(epsilon, q), old, moved)
    buckets = tuple(ids[new == j] for j in range(q))
    return BucketAssignment(assignment.feature_index, buckets, epsilon)


def boundary_threshold(values, ids, assignment: BucketAssignment, split_bucket: int) -> float:
    """Concrete threshold realizing "buckets ``< split_bucket`` go left".

    Midpoint between the largest value left of the boundary and the smallest
    value right of it; routing is ``value < threshold``. Empty buckets next
    to the boundary are skipped. When the two extremes are equal (a run of
    duplicates straddles the boundary) the threshold is that value.
    """
    values = np.asarray(values, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if not 1 <= split_bucket <= assignment.num_buckets - 1:
        raise ArgumentError(f"split bucket {split_bucket} outside 1..{assignment.num_buckets - 1}")
    pos = {int(i): k for k, i in enumerate(ids)}
    left = [b for b in assignment.buckets[:split_bucket] if len(b)]
    right = [b for b in assignment.buckets[split_bucket:] if len(b)]
    if not left:
        return -math.inf
    if not right:
        return math.inf
    lo = max(values[pos[int(i)]] for i in left[-1])
    hi = min(values[pos[int(i)]] for i in right[0])
    if lo >= hi:
        return float(hi)
    mid = lo + (hi - lo) / 2.0
    if mid <= lo:
        mid = hi
    return float(mid)

