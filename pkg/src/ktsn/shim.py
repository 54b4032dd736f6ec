"""Client library: datagram sends with an explicit transmission time.

Sends that carry a txtime go into the socket's descriptor ring for the
scheduler daemon; sends without one take the regular (baseline) datapath.

Preload integration
-------------------
A preloadable wrapper can sit on the platform's datagram send entry points
(``sendmsg``, ``sendto``, ``send``) and route a call here when the message
carries an ``SCM_TXTIME`` control message, passing everything else through.
It is configured with two environment variables, read by
:func:`tsn_socket_from_env`:

``KTSN_RING_PATH``
    path of the ring file created by the daemon
``KTSN_CLASS``
    traffic class for all txtime sends of the process (default 0)
"""

from __future__ import annotations

import enum
import os
import time
from typing import Optional

from .frames import MAX_PAYLOAD, FlowTuple, PayloadTooLarge
from .ring import DescriptorRing, PacketDescriptor
from .vswitch import BaselinePath

ENV_RING_PATH = "KTSN_RING_PATH"
ENV_CLASS = "KTSN_CLASS"
DEFAULT_MAX_SPIN_NS = 10_000


class SendStatus(enum.Enum):
    SENT = "sent"
    WOULD_BLOCK = "would_block"


class TsnSocket:
    """One flow bound to one descriptor ring. Single producer: use from one
    thread at a time."""

    def __init__(
        self,
        flow: FlowTuple,
        traffic_class: int,
        ring: Optional[DescriptorRing],
        *,
        baseline: Optional[BaselinePath] = None,
        max_spin_ns: int = DEFAULT_MAX_SPIN_NS,
    ):
        if not 0 <= traffic_class <= 0xFF:
            raise ValueError(f"traffic class {traffic_class} out of range")
        self.flow = flow
        self.traffic_class = traffic_class
        self.ring = ring
        self.baseline = baseline
        self.max_spin_ns = max_spin_ns
        self.txtime_enabled = True
        self.seq_counter = 0
        self.would_block = 0
        self.plain_sent = 0

    def send_txtime(self, payload: bytes, txtime: int) -> SendStatus:
        """Queue ``payload`` for transmission at ``txtime`` (ns, daemon clock;
        0 means as soon as possible).

        A full ring is retried for up to ``max_spin_ns`` before giving up. The
        sequence number is consumed either way, so a WOULD_BLOCK leaves a gap
        the receiver can see.
        """
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        if txtime < 0:
            raise ValueError("txtime is an unsigned instant")
        if self.ring is None:
            raise RuntimeError("socket is not attached to a scheduler ring")
        desc = PacketDescriptor(self.seq_counter, txtime, self.traffic_class, self.flow, bytes(payload))
        self.seq_counter += 1
        if self.ring.push(desc):
            return SendStatus.SENT
        deadline = time.monotonic_ns() + self.max_spin_ns
        while time.monotonic_ns() < deadline:
            if self.ring.push(desc):
                return SendStatus.SENT
        self.would_block += 1
        return SendStatus.WOULD_BLOCK

    def send_plain(self, payload: bytes) -> SendStatus:
        """Send without a txtime over the regular datapath; the ring is untouched."""
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        if self.baseline is None:
            raise RuntimeError("socket has no regular datapath configured")
        self.baseline.send(self.flow, bytes(payload))
        self.plain_sent += 1
        return SendStatus.SENT

    def send(self, payload: bytes, txtime: Optional[int] = None) -> SendStatus:
        """Route by presence of a txtime, as an intercepted send would."""
        if txtime is None:
            return self.send_plain(payload)
        return self.send_txtime(payload, txtime)

    def close(self) -> None:
        if self.ring is not None:
            self.ring.close()
        if self.baseline is not None:
            self.baseline.close()


def tsn_socket_open(flow: FlowTuple, traffic_class: int, ring_path: str, **kwargs) -> TsnSocket:
    """Attach to the daemon's ring at ``ring_path``.

    Raises :class:`~ktsn.ring.RingAttachFailed` if the file cannot be opened
    and :class:`~ktsn.ring.HeaderMismatch` if its header is not a ring header.
    """
    return TsnSocket(flow, traffic_class, DescriptorRing.attach(ring_path), **kwargs)


def tsn_socket_from_env(flow: FlowTuple, environ=None, **kwargs) -> TsnSocket:
    environ = os.environ if environ is None else environ
    try:
        path = environ[ENV_RING_PATH]
    except KeyError:
        raise RuntimeError(f"{ENV_RING_PATH} is not set") from None
    return tsn_socket_open(flow, int(environ.get(ENV_CLASS, "0")), path, **kwargs)
