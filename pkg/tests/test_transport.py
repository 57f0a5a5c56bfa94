import threading
import time

import pytest

from fedgbdt.errors import FrameError, PeerGone, TransportError, TransportTimeout
from fedgbdt.transport import (LAN, WAN, Channel, NetProfile, SimNetwork, SocketEndpoint,
                               decode_frame, encode_frame)
from fedgbdt.vertical import run_vertical


def test_frame_round_trip_and_overhead():
    frame = encode_frame(Channel.AGG, b"hello")
    assert len(frame) == 5 + 9
    channel, payload, end = decode_frame(frame)
    assert (channel, payload, end) == (Channel.AGG, b"hello", len(frame))


def test_frames_concatenate():
    buf = encode_frame(Channel.SETUP, b"a") + encode_frame(Channel.SPLIT, b"")
    c1, p1, off = decode_frame(buf)
    c2, p2, end = decode_frame(buf, off)
    assert (c1, p1, c2, p2, end) == (Channel.SETUP, b"a", Channel.SPLIT, b"", len(buf))


def test_corrupted_frames_are_rejected():
    frame = bytearray(encode_frame(Channel.BUCKET, b"payload"))
    with pytest.raises(FrameError):
        decode_frame(bytes(frame[:-1]))
    with pytest.raises(FrameError):
        decode_frame(bytes(frame[:3]))
    flipped = bytearray(frame)
    flipped[6] ^= 1
    with pytest.raises(FrameError):
        decode_frame(bytes(flipped))
    bad_tag = bytearray(frame)
    bad_tag[4] = 99
    with pytest.raises(FrameError):
        decode_frame(bytes(bad_tag))


def test_profile_parsing():
    assert NetProfile.parse("lan") == LAN
    assert NetProfile.parse("WAN") == WAN
    p = NetProfile.parse("latency_ms=5,bandwidth_kbps=1000")
    assert p.delay_seconds(1000) == pytest.approx(0.005 + 0.008)
    with pytest.raises(ValueError):
        NetProfile(latency_ms=-1)


def test_sim_delivery_fifo_and_filters():
    net = SimNetwork()
    a, b, c = net.endpoint(0), net.endpoint(1), net.endpoint(2)
    for i in range(3):
        a.send(2, Channel.AGG, bytes([i]))
    b.send(2, Channel.SPLIT, b"x")
    assert c.recv(Channel.SPLIT).sender == 1
    assert [c.recv(Channel.AGG, 0).payload for _ in range(3)] == [b"\0", b"\1", b"\2"]
    with pytest.raises(TransportTimeout):
        c.recv(Channel.AGG, timeout=0.05)
    assert net.stats.bytes[Channel.AGG] == 3 * 10
    assert net.stats.messages[Channel.SPLIT] == 1
    assert len(net.transcript) == 4
    net.close()


def test_sim_registration_and_abort():
    net = SimNetwork()
    a = net.endpoint(0)
    with pytest.raises(TransportError):
        net.endpoint(0)
    with pytest.raises(PeerGone):
        a.send(5, Channel.AGG, b"")
    out = []

    def waiter():
        try:
            a.recv(Channel.AGG)
        except PeerGone as e:
            out.append(e)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.05)
    net.abort("stop")
    t.join(2)
    assert out and "stop" in str(out[0])


def test_virtual_mode_accounts_delay_without_sleeping():
    net = SimNetwork(WAN, mode="virtual")
    a, b = net.endpoint(0), net.endpoint(1)
    t0 = time.monotonic()
    a.send(1, Channel.AGG, b"x" * 1000)
    b.recv(Channel.AGG)
    assert time.monotonic() - t0 < 0.05
    assert net.stats.modeled_seconds == pytest.approx(0.1 + 1009 * 8 / 20e6, rel=1e-6)
    net.close()


def test_sleep_mode_round_trip_reflects_latency():
    net = SimNetwork(WAN, mode="sleep")
    a, b = net.endpoint(0), net.endpoint(1)
    t0 = time.monotonic()
    a.send(1, Channel.AGG, b"ping")
    b.recv(Channel.AGG)
    b.send(0, Channel.AGG, b"pong")
    a.recv(Channel.AGG)
    assert time.monotonic() - t0 >= 0.2
    net.close()


def test_sleep_mode_keeps_order():
    net = SimNetwork(NetProfile(latency_ms=20), mode="sleep")
    a, b = net.endpoint(0), net.endpoint(1)
    for i in range(5):
        a.send(1, Channel.AGG, bytes([i]))
    assert [b.recv(Channel.AGG).payload[0] for _ in range(5)] == list(range(5))
    net.close()


def test_model_does_not_depend_on_profile(bundled_split, quick_config):
    train, _ = bundled_split
    lan = run_vertical(train, 2, quick_config, network=SimNetwork(LAN))
    wan = run_vertical(train, 2, quick_config, network=SimNetwork(WAN, mode="virtual"))
    assert lan.model.to_bytes() == wan.model.to_bytes()
    assert wan.network.stats.modeled_seconds > lan.network.stats.modeled_seconds


@pytest.mark.network
def test_sockets_exchange_frames():
    peers = {0: ("127.0.0.1", 0), 1: ("127.0.0.1", 0)}
    a = SocketEndpoint(0, peers)
    peers[0] = a.address
    b = SocketEndpoint(1, peers)
    a.peers[1] = b.address
    try:
        a.send(1, Channel.SPLIT, b"hi")
        env = b.recv(Channel.SPLIT, timeout=5)
        assert (env.sender, env.payload) == (0, b"hi")
        b.send(0, Channel.PREDICT, b"back")
        assert a.recv(Channel.PREDICT, 1, timeout=5).payload == b"back"
        assert a.stats.messages[Channel.SPLIT] == 1
        assert a.stats.messages[Channel.PREDICT] == 1
    finally:
        a.close()
        b.close()
