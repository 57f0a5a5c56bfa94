"""Session start handshake: every participant proves it runs the same config.

setup channel, u8 type then
  HELLO    32-byte SHA-256 digest of the run configuration
  VERDICT  u8 1 (go) or 0 (abort)
"""

from __future__ import annotations

from typing import Sequence

from .errors import ProtocolError
from .transport import Channel

MSG_HELLO = 0x01
MSG_VERDICT = 0x02


def exchange_config(endpoint, participants: Sequence[int], leader: int, digest: bytes) -> None:
    """Abort before any data flows unless all digests match the leader's.

    Raises:
        ProtocolError: on a mismatch, at every participant.
    """
    others = [p for p in participants if p != leader]
    if endpoint.pid != leader:
        endpoint.send(leader, Channel.SETUP, bytes([MSG_HELLO]) + digest)
        env = endpoint.recv(Channel.SETUP, leader)
        if env.payload[:1] != bytes([MSG_VERDICT]):
            raise ProtocolError("expected a config verdict")
        if env.payload[1] != 1:
            raise ProtocolError("config hash mismatch among participants; run aborted")
        return
    mismatched = []
    for _ in others:
        env = endpoint.recv(Channel.SETUP, others)
        if env.payload[:1] != bytes([MSG_HELLO]):
            raise ProtocolError(f"expected a config hash from participant {env.sender}")
        if env.payload[1:] != digest:
            mismatched.append(env.sender)
    verdict = bytes([MSG_VERDICT, 0 if mismatched else 1])
    endpoint.broadcast(others, Channel.SETUP, verdict)
    if mismatched:
        raise ProtocolError(f"config hash mismatch from participants {sorted(mismatched)}")
