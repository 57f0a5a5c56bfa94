"""Message transport between participants.

Frame layout (big-endian)::

    u32 payload length | u8 channel tag | payload | u32 CRC32(tag || payload)

Two backends share the :class:`Endpoint` interface:

* :class:`SimNetwork` delivers frames between in-process endpoints. With a
  :class:`NetProfile` each frame is delayed by ``latency + size/bandwidth``,
  either by really sleeping (``mode="sleep"``) or by only accounting the
  modeled time (``mode="virtual"``).
* :class:`SocketEndpoint` speaks the same frames over TCP, one connection per
  ordered pair of participants.

Delivery is reliable and FIFO per (sender, channel). ``recv`` may wait on
several channels at once and returns the earliest matching arrival.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import math
import socket
import struct
import threading
import time
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .errors import FrameError, PeerGone, TransportError, TransportTimeout

log = logging.getLogger(__name__)

__all__ = [
    "Channel",
    "Envelope",
    "NetProfile",
    "TrafficStats",
    "Endpoint",
    "SimNetwork",
    "SocketEndpoint",
    "encode_frame",
    "decode_frame",
    "LAN",
    "WAN",
]

HEADER = struct.Struct(">IB")
TRAILER = struct.Struct(">I")
FRAME_OVERHEAD = HEADER.size + TRAILER.size
MAX_PAYLOAD = 1 << 30


class Channel(enum.IntEnum):
    SETUP = 1
    BUCKET = 2
    QUANTILE = 3
    AGG = 4
    SPLIT = 5
    PREDICT = 6


@dataclass(frozen=True)
class Envelope:
    sender: int
    recipient: int
    channel: Channel
    payload: bytes


@dataclass(frozen=True)
class NetProfile:
    latency_ms: float = 0.0
    bandwidth_kbps: float = math.inf

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")
        if not self.bandwidth_kbps > 0:
            raise ValueError("bandwidth must be positive")

    def transfer_seconds(self, nbytes: int) -> float:
        if self.bandwidth_kbps == math.inf:
            return 0.0
        return nbytes * 8 / (self.bandwidth_kbps * 1000.0)

    def delay_seconds(self, nbytes: int) -> float:
        return self.latency_ms / 1000.0 + self.transfer_seconds(nbytes)

    @classmethod
    def parse(cls, text: str) -> "NetProfile":
        """``lan``, ``wan`` or ``latency_ms=100,bandwidth_kbps=20000``."""
        text = text.strip().lower()
        if text in ("", "lan", "none"):
            return LAN
        if text == "wan":
            return WAN
        kwargs = {}
        for part in text.split(","):
            key, _, value = part.partition("=")
            kwargs[key.strip()] = float(value)
        return cls(**kwargs)


LAN = NetProfile()
# 20 Mbit/s per link with 100 ms added latency
WAN = NetProfile(latency_ms=100.0, bandwidth_kbps=20_000.0)


def encode_frame(channel: Channel, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes is too large")
    head = HEADER.pack(len(payload), int(channel))
    crc = zlib.crc32(payload, zlib.crc32(head[4:]))
    return head + payload + TRAILER.pack(crc)


def decode_frame(buf: bytes, offset: int = 0) -> Tuple[Channel, bytes, int]:
    """Parse one frame at ``offset``; returns ``(channel, payload, next_offset)``."""
    if len(buf) - offset < FRAME_OVERHEAD:
        raise FrameError("truncated frame header")
    length, tag = HEADER.unpack_from(buf, offset)
    if length > MAX_PAYLOAD:
        raise FrameError(f"frame claims {length} payload bytes")
    start = offset + HEADER.size
    end = start + length
    if len(buf) < end + TRAILER.size:
        raise FrameError("truncated frame payload")
    payload = bytes(buf[start:end])
    (crc,) = TRAILER.unpack_from(buf, end)
    if zlib.crc32(payload, zlib.crc32(bytes([tag]))) != crc:
        raise FrameError("frame checksum mismatch")
    try:
        channel = Channel(tag)
    except ValueError:
        raise FrameError(f"unknown channel tag {tag}") from None
    return channel, payload, end + TRAILER.size


class TrafficStats:
    """Thread-safe byte and message counters keyed by channel and sender."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes: Dict[Channel, int] = defaultdict(int)
        self.messages: Dict[Channel, int] = defaultdict(int)
        self.by_sender: Dict[Tuple[int, Channel], int] = defaultdict(int)
        self.modeled_seconds = 0.0

    def record(self, sender: int, channel: Channel, nbytes: int, delay: float = 0.0) -> None:
        with self._lock:
            self.bytes[channel] += nbytes
            self.messages[channel] += 1
            self.by_sender[(sender, channel)] += 1
            self.modeled_seconds += delay

    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def report(self) -> Dict[str, int]:
        return {f"bytes_{c.name.lower()}": self.bytes.get(c, 0) for c in Channel}


class _Mailbox:
    def __init__(self):
        self._cond = threading.Condition()
        self._pending: List[Envelope] = []
        self._closed: Optional[str] = None

    def put(self, env: Envelope) -> None:
        with self._cond:
            self._pending.append(env)
            self._cond.notify_all()

    def close(self, reason: str) -> None:
        with self._cond:
            self._closed = reason
            self._cond.notify_all()

    def take(self, channels, senders, timeout: Optional[float]) -> Envelope:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                for idx, env in enumerate(self._pending):
                    if env.channel in channels and (senders is None or env.sender in senders):
                        del self._pending[idx]
                        return env
                if self._closed is not None:
                    raise PeerGone(self._closed)
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TransportTimeout(
                        f"no message on {[c.name for c in channels]} within {timeout}s")
                self._cond.wait(remaining)


def _as_set(x, kind) -> Optional[frozenset]:
    if x is None:
        return None
    if isinstance(x, (int, enum.IntEnum)):
        return frozenset([kind(x)])
    return frozenset(kind(v) for v in x)


class Endpoint:
    """One participant's handle on the network."""

    def __init__(self, pid: int, timeout: Optional[float] = 120.0):
        self.pid = pid
        self.timeout = timeout
        self._mailbox = _Mailbox()
        self.stats = TrafficStats()

    def send(self, to: int, channel: Channel, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self, channel: Union[Channel, Iterable[Channel]],
             sender: Union[int, Iterable[int], None] = None,
             timeout: Optional[float] = -1.0) -> Envelope:
        """Next message on ``channel`` (one or several) from ``sender`` (or anyone)."""
        channels = _as_set(channel, Channel)
        senders = _as_set(sender, int)
        return self._mailbox.take(channels, senders, self.timeout if timeout == -1.0 else timeout)

    def broadcast(self, to: Iterable[int], channel: Channel, payload: bytes) -> None:
        for peer in to:
            self.send(peer, channel, payload)

    def close(self) -> None:
        self._mailbox.close("endpoint closed")


class _SimEndpoint(Endpoint):
    def __init__(self, net: "SimNetwork", pid: int, timeout):
        super().__init__(pid, timeout)
        self._net = net

    def send(self, to, channel, payload):
        self._net._send(self.pid, to, Channel(channel), bytes(payload))


class SimNetwork:
    """In-process network with optional delay modeling.

    ``transcript`` keeps every delivered :class:`Envelope` for audits when
    ``record`` is set.
    """

    def __init__(self, profile: NetProfile = LAN, mode: str = "virtual",
                 timeout: Optional[float] = 120.0, record: bool = True):
        if mode not in ("virtual", "sleep"):
            raise ValueError("mode must be 'virtual' or 'sleep'")
        self.profile = profile
        self.mode = mode
        self.timeout = timeout
        self.record = record
        self.stats = TrafficStats()
        self.transcript: List[Envelope] = []
        self._endpoints: Dict[int, _SimEndpoint] = {}
        self._lock = threading.Lock()
        self._link_free: Dict[Tuple[int, int], float] = {}
        self._link_last: Dict[Tuple[int, int], float] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._cond = threading.Condition(self._lock)
        self._worker: Optional[threading.Thread] = None
        self._stopped = False

    def endpoint(self, pid: int) -> Endpoint:
        with self._lock:
            if pid in self._endpoints:
                raise TransportError(f"participant {pid} already registered")
            ep = _SimEndpoint(self, pid, self.timeout)
            self._endpoints[pid] = ep
            return ep

    def _send(self, sender: int, to: int, channel: Channel, payload: bytes) -> None:
        frame = encode_frame(channel, payload)
        with self._lock:
            if self._stopped:
                raise PeerGone("network aborted")
            if to not in self._endpoints:
                raise PeerGone(f"participant {to} is not registered")
            now = time.monotonic()
            link = (sender, to)
            start = max(now, self._link_free.get(link, 0.0))
            self._link_free[link] = start + self.profile.transfer_seconds(len(frame))
            deliver_at = self._link_free[link] + self.profile.latency_ms / 1000.0
            deliver_at = max(deliver_at, self._link_last.get(link, 0.0))
            self._link_last[link] = deliver_at
            delay = deliver_at - now
            self.stats.record(sender, channel, len(frame), delay)
            self._endpoints[sender].stats.record(sender, channel, len(frame), delay)
            if self.mode == "virtual" or delay <= 0:
                self._deliver(sender, to, frame)
                return
            heapq.heappush(self._heap, (deliver_at, next(self._seq), sender, to, frame))
            if self._worker is None:
                self._worker = threading.Thread(target=self._run, name="simnet", daemon=True)
                self._worker.start()
            self._cond.notify_all()

    def _deliver(self, sender: int, to: int, frame: bytes) -> None:
        channel, payload, _ = decode_frame(frame)
        env = Envelope(sender, to, channel, payload)
        if self.record:
            self.transcript.append(env)
        self._endpoints[to]._mailbox.put(env)

    def _run(self) -> None:
        with self._lock:
            while not self._stopped:
                if not self._heap:
                    self._cond.wait()
                    continue
                due = self._heap[0][0]
                now = time.monotonic()
                if due > now:
                    self._cond.wait(due - now)
                    continue
                _, _, sender, to, frame = heapq.heappop(self._heap)
                self._deliver(sender, to, frame)

    def abort(self, reason: str = "network aborted") -> None:
        """Wake every blocked receiver with :class:`PeerGone`."""
        with self._lock:
            self._stopped = True
            self._cond.notify_all()
            endpoints = list(self._endpoints.values())
        for ep in endpoints:
            ep._mailbox.close(reason)

    def close(self) -> None:
        self.abort("network closed")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerGone("connection closed")
        buf += chunk
    return bytes(buf)


class SocketEndpoint(Endpoint):
    """TCP backend. ``peers`` maps participant id to ``(host, port)``.

    Each endpoint listens on its own address; the first send to a peer opens
    an outbound connection and announces the sender id as a 4-byte prefix.
    ``stats`` counts frames both sent and received by this endpoint.
    """

    def __init__(self, pid: int, peers: Dict[int, Tuple[str, int]],
                 timeout: Optional[float] = 120.0, connect_timeout: float = 30.0,
                 listen: bool = True):
        super().__init__(pid, timeout)
        self.peers = dict(peers)
        self.connect_timeout = connect_timeout
        self._out: Dict[int, socket.socket] = {}
        self._out_locks: Dict[int, threading.Lock] = defaultdict(threading.Lock)
        self._threads: List[threading.Thread] = []
        self._server: Optional[socket.socket] = None
        self._closing = False
        if listen:
            host, port = self.peers[pid]
            self._server = socket.create_server((host, port), reuse_port=False)
            self.peers[pid] = (host, self._server.getsockname()[1])
            t = threading.Thread(target=self._accept_loop, name=f"accept-{pid}", daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def address(self) -> Tuple[str, int]:
        return self.peers[self.pid]

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn: socket.socket) -> None:
        try:
            (sender,) = struct.unpack(">I", _recv_exact(conn, 4))
            while True:
                head = _recv_exact(conn, HEADER.size)
                length, _ = HEADER.unpack(head)
                if length > MAX_PAYLOAD:
                    raise FrameError(f"frame claims {length} payload bytes")
                rest = _recv_exact(conn, length + TRAILER.size)
                channel, payload, _ = decode_frame(head + rest)
                self.stats.record(sender, channel, len(head) + len(rest))
                self._mailbox.put(Envelope(sender, self.pid, channel, payload))
        except PeerGone:
            pass
        except (OSError, FrameError) as exc:
            if not self._closing:
                log.warning("participant %s: inbound connection failed: %s", self.pid, exc)
        finally:
            conn.close()

    def _connection(self, to: int) -> socket.socket:
        sock = self._out.get(to)
        if sock is not None:
            return sock
        if to not in self.peers:
            raise PeerGone(f"participant {to} is not in the registry")
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                sock = socket.create_connection(self.peers[to], timeout=self.connect_timeout)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise PeerGone(f"cannot reach participant {to}: {exc}") from exc
                time.sleep(0.05)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(struct.pack(">I", self.pid))
        self._out[to] = sock
        return sock

    def send(self, to, channel, payload):
        channel = Channel(channel)
        frame = encode_frame(channel, bytes(payload))
        with self._out_locks[to]:
            sock = self._connection(to)
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise PeerGone(f"send to {to} failed: {exc}") from exc
        self.stats.record(self.pid, channel, len(frame))

    def close(self) -> None:
        self._closing = True
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        if self._server is not None:
            self._server.close()
        super().close()
