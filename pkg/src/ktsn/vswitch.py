"""Userspace L2 learning switch with VXLAN tunnel ports.

Local ports hand frames to in-process sinks (the scheduler egress, a
listener). Tunnel ports carry frames to a remote switch inside VXLAN over an
ordinary datagram transport: real UDP sockets, or an in-memory hub for
simulated runs. Only the VXLAN header and inner frame travel as the datagram
payload; the OS (or the hub) supplies the outer UDP/IP headers.
"""

from __future__ import annotations

import collections
import logging
import queue
import select
import socket
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

from .clock import NS_PER_S
from .frames import (
    ETH_HEADER_LEN,
    HEADERS_LEN,
    MAX_FRAME_LEN,
    VXLAN_PORT,
    CodecError,
    FlowTuple,
    VxlanParams,
    encode_udp_frame,
    split_vxlan_payload,
    vxlan_encap,
    vxlan_header,
)

logger = logging.getLogger(__name__)

Address = tuple[str, int]
DEFAULT_MAC_TTL = 300 * NS_PER_S


class TransportError(OSError):
    pass


class UdpTransport:
    """Datagram transport over an OS UDP socket."""

    def __init__(self, bind: Address = ("127.0.0.1", 0), rcvbuf: int = 4 << 20):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
            self.sock.bind(bind)
        except OSError as exc:
            self.sock.close()
            raise TransportError(f"cannot bind UDP transport to {bind[0]}:{bind[1]}: {exc}") from exc

    @property
    def local_addr(self) -> Address:
        return self.sock.getsockname()

    def fileno(self) -> int:
        return self.sock.fileno()

    def send(self, data: bytes, addr: Address) -> int:
        try:
            return self.sock.sendto(data, addr)
        except OSError as exc:
            raise TransportError(f"sendto {addr[0]}:{addr[1]} failed: {exc}") from exc

    def recv(self, timeout: Optional[float] = None) -> Optional[tuple[bytes, Address]]:
        self.sock.settimeout(timeout)
        try:
            return self.sock.recvfrom(65535)
        except (socket.timeout, BlockingIOError):
            return None

    def close(self) -> None:
        self.sock.close()


class LoopbackHub:
    """In-memory datagram network; with a simulated clock, delivery is delayed
    by ``delay`` ns and happens through clock wakeups."""

    def __init__(self, clock=None, delay: int = 0):
        self.clock = clock
        self.delay = delay
        self.endpoints: dict[Address, "HubTransport"] = {}
        self.sent = 0

    def endpoint(self, addr: Address, on_receive: Optional[Callable[[bytes, Address], None]] = None) -> "HubTransport":
        if addr in self.endpoints:
            raise TransportError(f"address {addr} already in use")
        ep = HubTransport(self, addr, on_receive)
        self.endpoints[addr] = ep
        return ep

    def _route(self, data: bytes, src: Address, dst: Address) -> None:
        target = self.endpoints.get(dst)
        if target is None:
            raise TransportError(f"no endpoint at {dst[0]}:{dst[1]}")
        self.sent += 1
        if self.clock is None:
            target._deliver(data, src)
        else:
            self.clock.schedule(self.clock.now() + self.delay, lambda: target._deliver(data, src))


class HubTransport:
    def __init__(self, hub: LoopbackHub, addr: Address, on_receive=None):
        self.hub = hub
        self.local_addr = addr
        self.on_receive = on_receive
        self.inbox: collections.deque = collections.deque()

    def send(self, data: bytes, addr: Address) -> int:
        self.hub._route(bytes(data), self.local_addr, addr)
        return len(data)

    def _deliver(self, data: bytes, src: Address) -> None:
        if self.on_receive is not None:
            self.on_receive(data, src)
        else:
            self.inbox.append((data, src))

    def recv(self, timeout: Optional[float] = None) -> Optional[tuple[bytes, Address]]:
        return self.inbox.popleft() if self.inbox else None

    def close(self) -> None:
        self.hub.endpoints.pop(self.local_addr, None)


class MacTable:
    """MAC -> (port, last_seen) with ageing and a size bound (LRU eviction)."""

    def __init__(self, ttl: int = DEFAULT_MAC_TTL, max_entries: int = 1024):
        self.ttl = ttl
        self.max_entries = max_entries
        self._entries: OrderedDict[bytes, tuple[int, int]] = OrderedDict()

    def learn(self, mac: bytes, port_id: int, now: int) -> None:
        self._entries.pop(mac, None)
        self._entries[mac] = (port_id, now)
        while len(self._entries) > self.max_entries:
            self._entries.popitem(last=False)

    def lookup(self, mac: bytes, now: int) -> Optional[int]:
        entry = self._entries.get(mac)
        if entry is None:
            return None
        port_id, seen = entry
        if now - seen > self.ttl:
            del self._entries[mac]
            return None
        return port_id

    def expire(self, now: int) -> int:
        stale = [mac for mac, (_, seen) in self._entries.items() if now - seen > self.ttl]
        for mac in stale:
            del self._entries[mac]
        return len(stale)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, mac) -> bool:
        return mac in self._entries


class LocalPort:
    """Port whose egress is an in-process sink (or a FIFO if no sink given)."""

    def __init__(self, port_id: int, sink: Optional[Callable[[bytes], None]] = None):
        self.port_id = port_id
        self.sink = sink
        self.frames: collections.deque = collections.deque()

    def output(self, frame: bytes) -> None:
        if self.sink is not None:
            self.sink(frame)
        else:
            self.frames.append(frame)


class TunnelPort:
    """VXLAN tunnel to one remote endpoint (``params.outer.dst_ip``/``dst_port``)."""

    def __init__(self, port_id: int, params: VxlanParams, transport):
        self.port_id = port_id
        self.params = params
        self.transport = transport
        self.remote: Address = (params.outer.dst_ip, params.outer.dst_port)
        self._ident = 0
        self.last_outer: Optional[bytes] = None

    def output(self, frame: bytes) -> None:
        outer = vxlan_encap(frame, self.params, ident=self._ident)
        self._ident += 1
        self.last_outer = outer
        self.transport.send(outer[HEADERS_LEN:], self.remote)


@dataclass
class SwitchCounters:
    received: int = 0
    unicast: int = 0
    flooded: int = 0
    filtered: int = 0
    malformed: int = 0
    vni_mismatch: int = 0
    rx_overflow: int = 0


class VirtualSwitch:
    """Learning bridge. One forwarding context calls :meth:`ingress`,
    :meth:`tunnel_ingress`, :meth:`poll` or :meth:`process_rx`; optional
    receive threads (:meth:`start_rx_threads`) only fill a bounded queue."""

    def __init__(self, name: str = "vswitch", mac_ttl: int = DEFAULT_MAC_TTL, max_macs: int = 1024, rx_queue_len: int = 4096):
        self.name = name
        self.ports: dict[int, LocalPort | TunnelPort] = {}
        self.macs = MacTable(mac_ttl, max_macs)
        self.counters = SwitchCounters()
        self._rx: queue.Queue = queue.Queue(maxsize=rx_queue_len)
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def _add(self, port):
        if port.port_id in self.ports:
            raise ValueError(f"{self.name}: port {port.port_id} already exists")
        self.ports[port.port_id] = port
        return port

    def add_local_port(self, port_id: int, sink: Optional[Callable[[bytes], None]] = None) -> LocalPort:
        return self._add(LocalPort(port_id, sink))

    def add_tunnel_port(self, port_id: int, params: VxlanParams, transport) -> TunnelPort:
        return self._add(TunnelPort(port_id, params, transport))

    def ingress(self, port_id: int, frame: bytes, now: int) -> list[tuple[int, bytes]]:
        """Learn, choose egress ports, and output ``frame`` on them.

        Returns the (port_id, frame) pairs forwarded; the frame is forwarded
        unmodified (tunnel encapsulation happens inside the tunnel port).
        """
        if port_id not in self.ports:
            raise KeyError(f"{self.name}: no port {port_id}")
        frame = bytes(frame)
        if not ETH_HEADER_LEN <= len(frame) <= MAX_FRAME_LEN:
            self.counters.malformed += 1
            return []
        self.counters.received += 1
        dst, src = frame[0:6], frame[6:12]
        if not src[0] & 1:
            self.macs.learn(src, port_id, now)

        out_port = None if dst[0] & 1 else self.macs.lookup(dst, now)
        if out_port is None:
            targets = [p for p in self.ports if p != port_id]
            self.counters.flooded += 1
        elif out_port == port_id:
            self.counters.filtered += 1
            targets = []
        else:
            targets = [out_port]
            self.counters.unicast += 1

        actions = []
        for target in targets:
            try:
                self.ports[target].output(frame)
            except (CodecError, TransportError) as exc:
                logger.warning("%s: output on port %d failed: %s", self.name, target, exc)
                continue
            actions.append((target, frame))
        return actions

    def tunnel_ingress(self, port_id: int, datagram: bytes, now: int) -> list[tuple[int, bytes]]:
        """Decapsulate a VXLAN datagram received on tunnel ``port_id`` and forward it."""
        port = self.ports[port_id]
        try:
            vni, inner = split_vxlan_payload(datagram)
        except CodecError as exc:
            self.counters.malformed += 1
            logger.debug("%s: dropping malformed tunnel datagram: %s", self.name, exc)
            return []
        if isinstance(port, TunnelPort) and vni != port.params.vni:
            self.counters.vni_mismatch += 1
            return []
        return self.ingress(port_id, inner, now)

    def poll(self, clock, timeout: Optional[float] = None) -> int:
        """Receive whatever is ready on tunnel sockets and forward it inline."""
        tunnels = [p for p in self.ports.values() if isinstance(p, TunnelPort) and hasattr(p.transport, "fileno")]
        if not tunnels:
            return 0
        ready, _, _ = select.select([p.transport for p in tunnels], [], [], timeout)
        by_transport = {id(p.transport): p.port_id for p in tunnels}
        handled = 0
        for transport in ready:
            got = transport.recv(0)
            if got is not None:
                self.tunnel_ingress(by_transport[id(transport)], got[0], clock.now())
                handled += 1
        return handled

    def start_rx_threads(self) -> None:
        """One receive thread per socket tunnel, feeding the bounded rx queue."""
        for port in self.ports.values():
            if isinstance(port, TunnelPort) and hasattr(port.transport, "fileno"):
                t = threading.Thread(target=self._rx_loop, args=(port,), name=f"{self.name}-rx{port.port_id}", daemon=True)
                t.start()
                self._threads.append(t)

    def _rx_loop(self, port: TunnelPort) -> None:
        while not self._stop.is_set():
            got = port.transport.recv(0.05)
            if got is None:
                continue
            try:
                self._rx.put_nowait((port.port_id, got[0]))
            except queue.Full:
                self.counters.rx_overflow += 1

    def process_rx(self, clock, timeout: Optional[float] = None) -> int:
        """Forward datagrams queued by the receive threads."""
        handled = 0
        block = timeout is not None
        while True:
            try:
                port_id, data = self._rx.get(block=block and handled == 0, timeout=timeout)
            except queue.Empty:
                return handled
            self.tunnel_ingress(port_id, data, clock.now())
            handled += 1

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=1)
        self._threads.clear()


class BaselinePath:
    """Regular-datapath sender: VXLAN encapsulation in process, then the OS
    datagram socket. No txtime, no shaping."""

    def __init__(self, overlay: VxlanParams, transport=None):
        self.overlay = overlay
        self._own = transport is None
        self.transport = transport if transport is not None else UdpTransport(("0.0.0.0", 0))
        self._ident: dict[FlowTuple, int] = {}

    def send(self, flow: FlowTuple, payload: bytes) -> int:
        ident = self._ident.get(flow, 0)
        self._ident[flow] = ident + 1
        return baseline_path_send(flow, payload, self.overlay, self.transport, ident=ident)

    def close(self) -> None:
        if self._own:
            self.transport.close()


def baseline_path_send(flow: FlowTuple, payload: bytes, overlay: VxlanParams, transport=None, *, ident: int = 0) -> int:
    """Send ``payload`` as a VXLAN-encapsulated frame through a datagram socket.

    Returns the datagram size handed to the transport (VXLAN header + inner
    frame); the OS adds the outer UDP/IP headers.
    """
    inner = encode_udp_frame(flow, payload, ident=ident)
    data = vxlan_header(overlay.vni) + inner
    remote = (overlay.outer.dst_ip, overlay.outer.dst_port)
    if transport is None:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            try:
                return sock.sendto(data, remote)
            except OSError as exc:
                raise TransportError(f"baseline send to {remote[0]}:{remote[1]} failed: {exc}") from exc
    return transport.send(data, remote)


def tunnel_params(vni: int, local: Address, remote: Address, local_mac: str = "02:00:00:00:ff:01", remote_mac: str = "02:00:00:00:ff:02") -> VxlanParams:
    """VxlanParams for a tunnel from ``local`` to ``remote`` (host, port) pairs."""
    local_ip = socket.gethostbyname(local[0]) if local[0] not in ("", "0.0.0.0") else "127.0.0.1"
    outer = FlowTuple(local_mac, remote_mac, local_ip, socket.gethostbyname(remote[0]), local[1] or VXLAN_PORT, remote[1])
    return VxlanParams(vni, outer)

