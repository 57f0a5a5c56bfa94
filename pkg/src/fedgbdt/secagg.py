"""Pairwise-masking secure aggregation without dropout recovery.

One participant (the aggregator) learns only the sum of everybody's input.
Every other pair ``(i, j)`` agrees on a Diffie-Hellman secret ``S_ij`` once;
for round ``k`` participant ``i`` adds ``+PRG(k || S_ij)`` if ``i < j`` and
``-PRG(k || S_ij)`` otherwise, so the masks cancel in the sum. The aggregator
adds its own input in the clear. Reals travel as fixed-point residues mod
``N`` with signed decoding.

PRG layout (bit-exact): for counter ``c = 0, 1, ...`` take the first 8 bytes
of ``SHA-256(k as 8-byte big-endian || S as minimal big-endian bytes || c as
4-byte big-endian)``; concatenate as many 8-byte words as ``N`` needs,
read them big-endian and reduce mod ``N``.
"""

from __future__ import annotations

import hashlib
import random
import secrets
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ProtocolError, RangeError, ReplayError

__all__ = [
    "AggParams",
    "AggSession",
    "MaskedResidue",
    "MODP_2048_P",
    "TEST_256_P",
    "encode_fixed",
    "decode_fixed",
    "encode_int",
    "prg",
    "round_key",
    "setup",
    "aggregate",
    "aggregate_many",
]

# RFC 3526 group 14, generator 2
MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
# largest safe prime below 2**256; 4 generates the prime-order subgroup
TEST_256_P = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF72EF


@dataclass(frozen=True)
class AggParams:
    prime: int = MODP_2048_P
    generator: int = 2
    modulus: int = 1 << 40
    scale: int = 1 << 20

    def __post_init__(self):
        if not 1 < self.generator < self.prime:
            raise ArgumentError("generator must satisfy 1 < g < p")
        if self.modulus < 2:
            raise ArgumentError("aggregation modulus must be >= 2")
        if self.scale < 1:
            raise ArgumentError("fixed-point scale must be positive")

    @classmethod
    def default(cls, modulus: int = 1 << 40, scale: int = 1 << 20) -> "AggParams":
        return cls(MODP_2048_P, 2, modulus, scale)

    @classmethod
    def test_profile(cls, modulus: int = 1 << 40, scale: int = 1 << 20) -> "AggParams":
        return cls(TEST_256_P, 4, modulus, scale)

    @property
    def half(self) -> int:
        return self.modulus // 2

    # wire: u16 len + p, u16 len + g, u16 len + N, u64 scale
    def to_bytes(self) -> bytes:
        out = []
        for v in (self.prime, self.generator, self.modulus):
            raw = _minimal_bytes(v)
            out.append(struct.pack(">H", len(raw)) + raw)
        out.append(struct.pack(">Q", self.scale))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AggParams":
        vals = []
        off = 0
        for _ in range(3):
            (ln,) = struct.unpack_from(">H", data, off)
            vals.append(int.from_bytes(data[off + 2:off + 2 + ln], "big"))
            off += 2 + ln
        (scale,) = struct.unpack_from(">Q", data, off)
        return cls(vals[0], vals[1], vals[2], scale)


def _minimal_bytes(v: int) -> bytes:
    return v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")


def encode_int(v: int, params: AggParams) -> int:
    if abs(v) >= params.half:
        raise RangeError(f"|{v}| does not fit below N/2 = {params.half}")
    return v % params.modulus


def encode_fixed(x: float, params: AggParams) -> int:
    """``round(x * scale) mod N``."""
    return encode_int(int(round(x * params.scale)), params)


def signed(r: int, params: AggParams) -> int:
    r %= params.modulus
    return r - params.modulus if r > params.half else r


def decode_fixed(r: int, params: AggParams) -> float:
    return signed(r, params) / params.scale


def prg(k: int, shared: int, modulus: int) -> int:
    words = max(1, -(-modulus.bit_length() // 64))
    prefix = struct.pack(">Q", k) + _minimal_bytes(shared)
    if words == 1:
        return int.from_bytes(hashlib.sha256(prefix + b"\0\0\0\0").digest()[:8], "big") % modulus
    stream = b"".join(hashlib.sha256(prefix + struct.pack(">I", c)).digest()[:8]
                      for c in range(words))
    return int.from_bytes(stream, "big") % modulus


def round_key(*parts: int, domain: str = "agg") -> int:
    """64-bit round index from a schedule tuple, identical at every participant."""
    data = domain.encode() + b"\0" + b"".join(struct.pack(">Q", p) for p in parts)
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


@dataclass(frozen=True)
class MaskedResidue:
    value: int
    round: int
    origin: int

    # Masked{k:u64, i:u32, value:u64}
    def to_bytes(self) -> bytes:
        return struct.pack(">QIQ", self.round, self.origin, self.value)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> "MaskedResidue":
        k, i, v = struct.unpack_from(">QIQ", data, offset)
        return cls(v, k, i)

    SIZE = 20


@dataclass
class AggSession:
    """One participant's view of secure aggregation."""

    participant_id: int
    params: AggParams
    secret: int
    aggregator: int
    peer_publics: Dict[int, int] = field(default_factory=dict)
    shared: Dict[int, int] = field(default_factory=dict)
    used_rounds: set = field(default_factory=set, repr=False)
    _pads: Optional[list] = field(default=None, repr=False, compare=False)

    @cached_property
    def public(self) -> int:
        return pow(self.params.generator, self.secret, self.params.prime)

    @classmethod
    def create(cls, participant_id: int, params: AggParams, aggregator: int,
               rng: Optional[random.Random] = None) -> "AggSession":
        p = params.prime
        secret = (rng.randrange(1, p - 1) if rng is not None else secrets.randbelow(p - 2) + 1)
        return cls(participant_id, params, secret, aggregator)

    @property
    def is_aggregator(self) -> bool:
        return self.participant_id == self.aggregator

    def derive(self, publics: Dict[int, int]) -> None:
        """Store peers' public keys and derive ``S_ij = S_j^{s_i} mod p``."""
        for j, pub in publics.items():
            if j == self.participant_id or j == self.aggregator:
                raise ProtocolError(f"unexpected public key for participant {j}")
            if j in self.peer_publics:
                raise ProtocolError(f"duplicate public key for participant {j}")
            if not 1 < pub < self.params.prime - 1:
                raise ProtocolError(f"public key of participant {j} is out of range")
            self.peer_publics[j] = pub
            self.shared[j] = pow(pub, self.secret, self.params.prime)
        self._pads = None

    def mask_value(self, k: int) -> int:
        """Sum of this participant's pairwise masks for round ``k`` (mod N)."""
        N = self.params.modulus
        if N.bit_length() > 64:
            total = 0
            for j, s in self.shared.items():
                r = prg(k, s, N)
                total += r if self.participant_id < j else -r
            return total % N
        # single-word fast path of prg(): secret bytes and counter are fixed per peer
        if self._pads is None:
            self._pads = [(_minimal_bytes(s) + b"\0\0\0\0", self.participant_id < j)
                          for j, s in self.shared.items()]
        kb = struct.pack(">Q", k)
        sha, frombytes = hashlib.sha256, int.from_bytes
        total = 0
        for tail, plus in self._pads:
            r = frombytes(sha(kb + tail).digest()[:8], "big") % N
            total += r if plus else -r
        return total % N

    def mask(self, residue: int, k: int) -> MaskedResidue:
        if self.is_aggregator:
            raise ProtocolError("the aggregator does not mask its input")
        if k in self.used_rounds:
            raise ReplayError(f"round {k} already used by participant {self.participant_id}")
        self.used_rounds.add(k)
        return MaskedResidue((residue + self.mask_value(k)) % self.params.modulus, k,
                             self.participant_id)

    def mask_many(self, residues: Sequence[int], keys: Sequence[int]) -> List[MaskedResidue]:
        return [self.mask(r, k) for r, k in zip(residues, keys)]


def setup(l: int, params: AggParams, aggregator: Optional[int] = None,
          rng: Optional[random.Random] = None) -> List[AggSession]:
    """In-process setup for participants ``0 .. l-1``.

    The aggregator relays every non-aggregator's public key to the others.
    Masked rounds need at least two non-aggregators, so ``l >= 3``.
    """
    if l < 3:
        raise ProtocolError("masked aggregation needs l >= 3: with one non-aggregator "
                            "there is no pairwise mask and its input would be exposed")
    aggregator = l - 1 if aggregator is None else aggregator
    sessions = [AggSession.create(i, params, aggregator, rng) for i in range(l)]
    publics = {s.participant_id: s.public for s in sessions if not s.is_aggregator}
    for s in sessions:
        if not s.is_aggregator:
            s.derive({j: pub for j, pub in publics.items() if j != s.participant_id})
    return sessions


def aggregate(masked: Iterable[MaskedResidue], own: int, params: AggParams,
              expected: Optional[Sequence[int]] = None, k: Optional[int] = None) -> float:
    """Decode ``(sum of masked residues + own) mod N``.

    Raises:
        ProtocolError: a contribution is missing, duplicated or from another round.
    """
    masked = list(masked)
    origins = [m.origin for m in masked]
    if len(set(origins)) != len(origins):
        raise ProtocolError("duplicate contribution")
    if expected is not None and sorted(origins) != sorted(expected):
        missing = sorted(set(expected) - set(origins))
        raise ProtocolError(f"missing contributions from {missing}")
    if k is not None and any(m.round != k for m in masked):
        raise ProtocolError("contribution from a different round")
    total = (sum(m.value for m in masked) + own) % params.modulus
    return decode_fixed(total, params)


def aggregate_many(columns: Sequence[Sequence[int]], own: Sequence[int],
                   params: AggParams) -> np.ndarray:
    """Sum many rounds at once: ``columns[i][r]`` is participant ``i``'s residue for round ``r``."""
    N = params.modulus
    out = np.empty(len(own))
    for r in range(len(own)):
        total = own[r]
        for col in columns:
            total += col[r]
        out[r] = decode_fixed(total % N, params)
    return out


# -- over a transport ---------------------------------------------------------
# setup channel: u8 type, then
#   PARAMS  AggParams bytes
#   PUB     SetupPub{i:u32, len:u16, S_i}
#   RELAY   u32 count, then that many SetupPub entries
# agg channel: u8 type, u32 count, then per entry
#   MASKED  Masked{k:u64, i:u32, value:u64}
#   EXACT   k:u64, i:u32, len:u16, two's-complement big-endian integer
#           (unmasked; test mode only)

MSG_PARAMS = 0x10
MSG_PUB = 0x11
MSG_RELAY = 0x12
MSG_MASKED = 0x01
MSG_EXACT = 0x02


def _pack_pub(i: int, pub: int) -> bytes:
    raw = _minimal_bytes(pub)
    return struct.pack(">IH", i, len(raw)) + raw


def _unpack_pubs(data: bytes, offset: int, count: int) -> Dict[int, int]:
    pubs = {}
    for _ in range(count):
        i, ln = struct.unpack_from(">IH", data, offset)
        offset += 6
        if i in pubs:
            raise ProtocolError(f"duplicate public key for participant {i}")
        pubs[i] = int.from_bytes(data[offset:offset + ln], "big")
        offset += ln
    return pubs


def network_setup(endpoint, participants: Sequence[int], aggregator: int,
                  params: Optional[AggParams] = None,
                  rng: Optional[random.Random] = None) -> AggSession:
    """Run the one-time key setup over ``endpoint``; every participant calls this.

    The aggregator supplies ``params`` and relays public keys; the others
    receive the parameters, publish ``g^s mod p`` and derive pairwise secrets.
    """
    from .transport import Channel

    others = [p for p in participants if p != aggregator]
    if endpoint.pid == aggregator:
        if params is None:
            raise ArgumentError("the aggregator must supply aggregation parameters")
        if len(others) == 1:
            raise ProtocolError("masked aggregation needs l >= 3")
        session = AggSession.create(aggregator, params, aggregator, rng)
        endpoint.broadcast(others, Channel.SETUP, bytes([MSG_PARAMS]) + params.to_bytes())
        pubs = {}
        for _ in others:
            env = endpoint.recv(Channel.SETUP, others)
            if env.payload[0] != MSG_PUB:
                raise ProtocolError("expected a public key")
            got = _unpack_pubs(env.payload, 1, 1)
            (i, pub), = got.items()
            if i != env.sender or i in pubs:
                raise ProtocolError(f"bad or duplicate public key from {env.sender}")
            pubs[i] = pub
        for j in others:
            rest = [_pack_pub(i, pub) for i, pub in sorted(pubs.items()) if i != j]
            endpoint.send(j, Channel.SETUP,
                          bytes([MSG_RELAY]) + struct.pack(">I", len(rest)) + b"".join(rest))
        return session

    env = endpoint.recv(Channel.SETUP, aggregator)
    if env.payload[0] != MSG_PARAMS:
        raise ProtocolError("expected aggregation parameters")
    params = AggParams.from_bytes(env.payload[1:])
    session = AggSession.create(endpoint.pid, params, aggregator, rng)
    endpoint.send(aggregator, Channel.SETUP, bytes([MSG_PUB]) + _pack_pub(endpoint.pid, session.public))
    env = endpoint.recv(Channel.SETUP, aggregator)
    if env.payload[0] != MSG_RELAY:
        raise ProtocolError("expected relayed public keys")
    (count,) = struct.unpack_from(">I", env.payload, 1)
    pubs = _unpack_pubs(env.payload, 5, count)
    if sorted(pubs) != sorted(p for p in others if p != endpoint.pid):
        raise ProtocolError("relayed public keys do not cover every peer")
    session.derive(pubs)
    return session


class SecureSum:
    """Batched sums of integer contributions toward one aggregator.

    ``exact=True`` replaces masking by plain, arbitrary-precision integers;
    it exists so tests can compare against a pooled run bit for bit and it
    leaks every contribution.
    """

    def __init__(self, endpoint, participants: Sequence[int], aggregator: int,
                 params: AggParams, session: Optional[AggSession] = None, exact: bool = False):
        self.endpoint = endpoint
        self.participants = list(participants)
        self.aggregator = aggregator
        self.params = params
        self.session = session
        self.exact = exact
        self.others = [p for p in self.participants if p != aggregator]
        if not exact and self.others and session is None:
            raise ProtocolError("masked aggregation needs a set-up session")
        if not exact and params.modulus > 1 << 64:
            raise ArgumentError("masked residues travel as 8 bytes; N must be <= 2**64")

    def contribute(self, keys: Sequence[int], values: Sequence[int]) -> None:
        from .transport import Channel

        if len(keys) != len(values):
            raise ArgumentError("keys and values differ in length")
        pid = self.endpoint.pid
        if self.exact:
            parts = [bytes([MSG_EXACT]), struct.pack(">I", len(keys))]
            for k, v in zip(keys, values):
                raw = int(v).to_bytes((int(v).bit_length() + 8) // 8 or 1, "big", signed=True)
                parts.append(struct.pack(">QIH", k, pid, len(raw)) + raw)
        else:
            parts = [bytes([MSG_MASKED]), struct.pack(">I", len(keys))]
            for k, v in zip(keys, values):
                parts.append(self.session.mask(encode_int(int(v), self.params), k).to_bytes())
        self.endpoint.send(self.aggregator, Channel.AGG, b"".join(parts))

    def _read(self, payload: bytes, keys: Sequence[int], sender: int) -> List[int]:
        kind = payload[0]
        (count,) = struct.unpack_from(">I", payload, 1)
        if count != len(keys):
            raise ProtocolError(f"participant {sender} sent {count} values, expected {len(keys)}")
        off = 5
        out = []
        for k in keys:
            if kind == MSG_MASKED and not self.exact:
                m = MaskedResidue.from_bytes(payload, off)
                off += MaskedResidue.SIZE
                got_k, origin, v = m.round, m.origin, m.value
            elif kind == MSG_EXACT and self.exact:
                got_k, origin, ln = struct.unpack_from(">QIH", payload, off)
                off += 14
                v = int.from_bytes(payload[off:off + ln], "big", signed=True)
                off += ln
            else:
                raise ProtocolError(f"unexpected aggregation message type {kind}")
            if got_k != k or origin != sender:
                raise ProtocolError(f"contribution for the wrong round from {sender}")
            out.append(v)
        return out

    def collect(self, keys: Sequence[int], own: Sequence[int]) -> List[int]:
        """Aggregator side: integer totals per key (signed)."""
        from .transport import Channel

        columns = {}
        for _ in self.others:
            env = self.endpoint.recv(Channel.AGG, [p for p in self.others if p not in columns])
            columns[env.sender] = self._read(env.payload, keys, env.sender)
        if self.exact:
            return [int(o) + sum(columns[p][r] for p in self.others) for r, o in enumerate(own)]
        N = self.params.modulus
        totals = []
        for r, o in enumerate(own):
            t = encode_int(int(o), self.params)
            for p in self.others:
                t += columns[p][r]
            totals.append(signed(t % N, self.params))
        return totals
