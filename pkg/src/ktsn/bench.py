"""Talker/listener benchmark harness.

A talker sends ``count`` messages with period ``T``. On the TSN path message
``i`` carries ``txtime = base + i*T`` and goes through the descriptor ring,
the shaper daemon and its userspace switch; on the baseline path the talker
sends and then sleeps ``T``, over an in-process VXLAN encapsulation and the
OS datagram socket. A listener behind its own switch timestamps arrivals.

Every message payload starts with a little-endian (seq, txtime, t_send)
stamp so the listener can build :class:`~ktsn.stats.RunRecord` without a
side channel. All real-clock components share one CLOCK_MONOTONIC epoch.
"""

from __future__ import annotations

import enum
import logging
import multiprocessing as mp
import os
import platform
import statistics
import struct
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .clock import NS_PER_MS, NS_PER_S, NS_PER_US, RealClock, SimulatedClock, reduce_timer_slack
from .frames import MAX_PAYLOAD, FlowTuple, decode_udp_frame
from .gclfile import GclConfig, load_gcl
from .report import RunResult
from .ring import DescriptorRing, PacketDescriptor
from .shim import SendStatus, TsnSocket, tsn_socket_open
from .stats import RunRecord
from .tas import (
    GateControlList,
    GateSlot,
    PastTxtimePolicy,
    RingSource,
    ScheduledSource,
    SchedulerConfig,
    TasScheduler,
    TxRecord,
)
from .vswitch import BaselinePath, LoopbackHub, UdpTransport, VirtualSwitch, tunnel_params

logger = logging.getLogger(__name__)

STAMP = struct.Struct("<QQQ")
DEFAULT_PAYLOADS = (64, 256, 1024)
DEFAULT_VNI = 42
TSN_CLASS = 0


class BenchMode(enum.Enum):
    TSN = "tsn"
    BASELINE = "baseline"


class BenchConfigError(ValueError):
    pass


class BenchRuntimeError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    mode: BenchMode = BenchMode.TSN
    payload_size: int = 64
    period: int = NS_PER_MS
    count: int = 10_000
    warmup: int = 100
    lead: int = 2500 * NS_PER_US
    start_delay: int = 200 * NS_PER_MS
    phase: int = 100 * NS_PER_US
    drain_timeout: float = 1.0
    gcl_path: Optional[str] = None
    output: Optional[str] = None
    vni: int = DEFAULT_VNI
    spin_window: int = 300 * NS_PER_US
    poll_interval: int = NS_PER_MS

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = BenchMode(self.mode)

    def validate(self) -> "BenchConfig":
        if self.count < 2:
            raise BenchConfigError(f"count must be >= 2 for jitter to be defined, got {self.count}")
        if not STAMP.size <= self.payload_size <= MAX_PAYLOAD:
            raise BenchConfigError(f"payload must be within {STAMP.size}..{MAX_PAYLOAD} bytes, got {self.payload_size}")
        if self.period <= 0:
            raise BenchConfigError("period must be positive")
        if not 0 <= self.warmup < self.count:
            raise BenchConfigError(f"warmup {self.warmup} must be below count {self.count}")
        if not 0 <= self.phase < self.period:
            raise BenchConfigError("phase must fall inside one period")
        return self


@dataclass(frozen=True)
class SendLogEntry:
    seq: int
    txtime: int
    t_send: int
    status: SendStatus


TALKER_FLOW = FlowTuple("02:00:00:00:00:01", "02:00:00:00:00:02", "10.244.1.10", "10.244.2.10", 40000, 50000)


def default_gcl(period: int = NS_PER_MS, num_classes: int = 2) -> GclConfig:
    """Two-slot schedule: class 0 open in the first half of each period, class 1 in the second."""
    half = period // 2
    gcl = GateControlList(period, (GateSlot(0, half, {0}), GateSlot(half, period - half, {1})), num_classes)
    return GclConfig(gcl.validate(), PastTxtimePolicy.DROP)


def stamp_payload(seq: int, txtime: int, t_send: int, size: int) -> bytes:
    return STAMP.pack(seq, txtime, t_send) + bytes(size - STAMP.size)


def parse_stamp(payload: bytes) -> tuple[int, int, int]:
    return STAMP.unpack_from(payload)


def talker_txtimes(base: int, count: int, period: int) -> list[int]:
    return [base + i * period for i in range(count)]


def aligned_base(now: int, period: int, start_delay: int, phase: int) -> int:
    """First period boundary after ``now + start_delay``, shifted by ``phase``."""
    start = now + start_delay
    return -(-start // period) * period + phase


def talker_run(cfg: BenchConfig, clock, sock: TsnSocket, base: int) -> list[SendLogEntry]:
    """Send ``cfg.count`` messages; returns one log entry per message."""
    cfg.validate()
    log = []
    if cfg.mode is BenchMode.TSN:
        for txtime in talker_txtimes(base, cfg.count, cfg.period):
            clock.sleep_until(max(txtime - cfg.lead, 0), spin=False)
            seq = sock.seq_counter
            t_send = clock.now()
            status = sock.send_txtime(stamp_payload(seq, txtime, t_send, cfg.payload_size), txtime)
            log.append(SendLogEntry(seq, txtime, t_send, status))
    else:
        clock.sleep_until(base, spin=False)
        for seq in range(cfg.count):
            t_send = clock.now()
            status = sock.send_plain(stamp_payload(seq, 0, t_send, cfg.payload_size))
            log.append(SendLogEntry(seq, 0, t_send, status))
            clock.sleep_until(clock.now() + cfg.period, spin=False)
    return log


class Listener:
    """Local-port sink that timestamps each arriving frame."""

    def __init__(self, clock):
        self.clock = clock
        self.records: list[RunRecord] = []
        self.undecodable = 0

    def on_frame(self, frame: bytes) -> None:
        t_arrival = self.clock.now()
        try:
            _, payload = decode_udp_frame(frame)
            seq, txtime, t_send = parse_stamp(payload)
        except (ValueError, struct.error):
            self.undecodable += 1
            return
        self.records.append(RunRecord(seq, txtime, t_send, t_arrival))


@dataclass
class ListenResult:
    records: list[RunRecord]
    expected: int
    timed_out: bool

    @property
    def loss_count(self) -> int:
        return self.expected - len({r.seq for r in self.records if r.seq < self.expected})


def listener_run(expect: int, clock, switch: VirtualSwitch, listener: Listener, *, drain_timeout: float = 1.0, first_timeout: float = 10.0) -> ListenResult:
    """Forward tunnel traffic to ``listener`` until ``expect`` messages arrive.

    Stops early when nothing arrives for ``drain_timeout`` seconds after the
    first message (or ``first_timeout`` before it); the result then reports
    ``timed_out`` and the missing messages count as loss.
    """
    idle_limit = first_timeout
    last_activity = time.monotonic()
    while len(listener.records) < expect:
        if switch.poll(clock, timeout=0.05):
            last_activity = time.monotonic()
            idle_limit = drain_timeout
        elif time.monotonic() - last_activity > idle_limit:
            logger.warning("listener timed out with %d of %d messages", len(listener.records), expect)
            return ListenResult(listener.records, expect, True)
    return ListenResult(listener.records, expect, False)


# -- simulated end-to-end pipeline -------------------------------------------


@dataclass
class SimulationResult:
    records: list[RunRecord]
    tx_records: list[TxRecord]
    send_log: list[SendLogEntry]
    scheduler_stats: dict = field(default_factory=dict)


def simulate_pipeline(
    count: int = 100,
    period: int = NS_PER_MS,
    payload_size: int = 64,
    *,
    lead: int = 300 * NS_PER_US,
    egress_delay: int = 5 * NS_PER_US,
    tunnel_delay: int = 20 * NS_PER_US,
    phase: int = 100 * NS_PER_US,
    gcl: Optional[GclConfig] = None,
    start: int = 10 * NS_PER_MS,
) -> SimulationResult:
    """Talker -> ring -> shaper -> switch -> VXLAN tunnel -> switch -> listener,
    all on one :class:`SimulatedClock` with fixed hop delays."""
    cfg = BenchConfig(BenchMode.TSN, payload_size, period, count, warmup=0, lead=lead, phase=phase).validate()
    gcl = gcl or default_gcl(period)
    clock = SimulatedClock()
    ring = DescriptorRing.create(capacity=1024)
    sock = TsnSocket(TALKER_FLOW, TSN_CLASS, ring)

    hub = LoopbackHub(clock, delay=tunnel_delay)
    listener = Listener(clock)
    rx_switch = VirtualSwitch("listener")
    rx_switch.add_local_port(1, listener.on_frame)
    rx_ep = hub.endpoint(("10.0.0.2", 4789), lambda data, src: rx_switch.tunnel_ingress(2, data, clock.now()))
    rx_switch.add_tunnel_port(2, tunnel_params(DEFAULT_VNI, rx_ep.local_addr, ("10.0.0.1", 4789)), rx_ep)

    tx_switch = VirtualSwitch("ktsnd")
    tx_switch.add_local_port(1)
    tx_ep = hub.endpoint(("10.0.0.1", 4789))
    tx_switch.add_tunnel_port(2, tunnel_params(DEFAULT_VNI, tx_ep.local_addr, rx_ep.local_addr), tx_ep)

    def egress(frame: bytes) -> None:
        clock.schedule(clock.now() + egress_delay, lambda: tx_switch.ingress(1, frame, clock.now()))

    base = aligned_base(start, period, cfg.lead, phase)
    send_log: list[SendLogEntry] = []

    def send(txtime: int) -> None:
        seq = sock.seq_counter
        t_send = clock.now()
        status = sock.send_txtime(stamp_payload(seq, txtime, t_send, payload_size), txtime)
        send_log.append(SendLogEntry(seq, txtime, t_send, status))

    for txtime in talker_txtimes(base, count, period):
        clock.schedule(txtime - cfg.lead, lambda t=txtime: send(t))

    scheduler = TasScheduler(SchedulerConfig(gcl.gcl, gcl.past_txtime_policy))
    tx_records = list(scheduler.run(clock, egress, RingSource([ring])))
    clock.run_until_idle()
    return SimulationResult(listener.records, tx_records, send_log, scheduler.stats())


# -- real-clock calibration and release accuracy ------------------------------


def calibrate_release_tolerance(
    clock: Optional[RealClock] = None,
    samples: int = 500,
    delay: int = NS_PER_MS,
    margin: float = 2.0,
    floor: int = 10 * NS_PER_US,
    ceiling: int = 500 * NS_PER_US,
) -> dict:
    """Measure this machine's timed-wakeup overshoot and per-release cost.

    tolerance = clamp(margin * (p99.9 overshoot + median release cost), floor, ceiling)
    """
    reduce_timer_slack()
    clock = clock or RealClock()
    overshoots = []
    for _ in range(samples):
        deadline = clock.now() + delay
        overshoots.append(clock.sleep_until(deadline) - deadline)
    overshoots.sort()
    p999 = overshoots[min(len(overshoots) - 1, int(0.999 * len(overshoots)))]

    scheduler = TasScheduler(SchedulerConfig(default_gcl().gcl, PastTxtimePolicy.SEND_IMMEDIATELY))
    costs = []
    payload = bytes(1024)
    for seq in range(200):
        scheduler.submit(PacketDescriptor(seq, 0, TSN_CLASS, TALKER_FLOW, payload), 0)
        t0 = time.perf_counter_ns()
        scheduler.next_release(0)
        _, entry = scheduler._pop_next()
        scheduler.encode(entry.desc)
        costs.append(time.perf_counter_ns() - t0)
    cost = int(statistics.median(costs))
    tolerance = int(min(ceiling, max(floor, margin * (p999 + cost))))
    return {
        "release_tolerance_ns": tolerance,
        "overshoot_p50_ns": overshoots[len(overshoots) // 2],
        "overshoot_p99_ns": overshoots[min(len(overshoots) - 1, int(0.99 * len(overshoots)))],
        "overshoot_p999_ns": p999,
        "fraction_over_tolerance": sum(1 for o in overshoots if o > tolerance) / len(overshoots),
        "overshoot_max_ns": overshoots[-1],
        "release_cost_ns": cost,
        "samples": samples,
        "spin_window_ns": clock.spin_window_ns,
        "margin": margin,
        "host": platform.node(),
        "python": platform.python_version(),
        "cpus": os.cpu_count(),
    }


def measure_release_accuracy(count: int = 1000, period: int = NS_PER_MS, clock: Optional[RealClock] = None) -> list[TxRecord]:
    """Real-clock shaper run: ``count`` descriptors alternating between the two
    classes of :func:`default_gcl`, one per period, all queued up front."""
    reduce_timer_slack()
    clock = clock or RealClock()
    gcl = default_gcl(period)
    scheduler = TasScheduler(SchedulerConfig(gcl.gcl, PastTxtimePolicy.SEND_IMMEDIATELY))
    base = aligned_base(clock.now(), period, 50 * NS_PER_MS, 0)
    arrivals = []
    for i in range(count):
        offset = period // 4 if i % 2 == 0 else period // 8
        desc = PacketDescriptor(i, base + i * period + offset, i % 2, TALKER_FLOW, bytes(64))
        arrivals.append((0, desc))
    sink: list[bytes] = []
    return list(scheduler.run(clock, sink.append, ScheduledSource(arrivals)))


# -- real-clock multi-process runs ---------------------------------------------


def serve_listener(bind, vni: int, expect: int, epoch_ns: int, drain_timeout: float, first_timeout: float, conn) -> None:
    """Listener process body: report the bound address, then the records."""
    try:
        reduce_timer_slack()
        clock = RealClock(epoch_ns)
        transport = UdpTransport(bind)
        switch = VirtualSwitch("listener")
        listener = Listener(clock)
        switch.add_local_port(1, listener.on_frame)
        switch.add_tunnel_port(2, tunnel_params(vni, transport.local_addr, ("127.0.0.1", 9)), transport)
        conn.send(("ready", transport.local_addr))
        result = listener_run(expect, clock, switch, listener, drain_timeout=drain_timeout, first_timeout=first_timeout)
        conn.send(("done", [(r.seq, r.txtime, r.t_send, r.t_arrival) for r in result.records], result.timed_out))
        transport.close()
    except Exception as exc:  # report to the parent instead of dying silently
        conn.send(("error", repr(exc)))


def serve_daemon(gcl_config: GclConfig, ring_paths: Sequence[str], remote, vni: int, epoch_ns: int, spin_window: int, poll_interval: int, stop, conn=None, tx_log: Optional[list] = None) -> dict:
    """Daemon body: create rings, shape their traffic and tunnel it to ``remote``."""
    reduce_timer_slack()
    clock = RealClock(epoch_ns, spin_window)
    rings = [DescriptorRing.create(path=p) for p in ring_paths]
    config = SchedulerConfig(gcl_config.gcl, gcl_config.past_txtime_policy, spin_window=spin_window, poll_interval=poll_interval)
    scheduler = TasScheduler(config)
    transport = UdpTransport(("127.0.0.1", 0))
    switch = VirtualSwitch("ktsnd")
    switch.add_local_port(1)
    switch.add_tunnel_port(2, tunnel_params(vni, transport.local_addr, tuple(remote)), transport)
    if conn is not None:
        conn.send(("ready", transport.local_addr))
    for rec in scheduler.run(clock, lambda frame: switch.ingress(1, frame, clock.now()), RingSource(rings), stop=stop):
        if tx_log is not None:
            tx_log.append(rec)
    stats = scheduler.stats()
    if conn is not None:
        conn.send(("done", stats))
    for ring in rings:
        ring.close()
    transport.close()
    return stats


def _daemon_entry(gcl_config, ring_paths, remote, vni, epoch_ns, spin_window, poll_interval, stop, conn):
    try:
        serve_daemon(gcl_config, ring_paths, remote, vni, epoch_ns, spin_window, poll_interval, stop, conn)
    except Exception as exc:
        conn.send(("error", repr(exc)))


def _expect(conn, what: str, timeout: float, proc=None):
    deadline = time.monotonic() + timeout
    while not conn.poll(0.1):
        if proc is not None and not proc.is_alive():
            raise BenchRuntimeError(f"{what}: process exited with code {proc.exitcode}")
        if time.monotonic() > deadline:
            raise BenchRuntimeError(f"{what}: no response within {timeout:.0f} s")
    msg = conn.recv()
    if msg[0] == "error":
        raise BenchRuntimeError(f"{what} failed: {msg[1]}")
    return msg


def run_real(cfg: BenchConfig, *, epoch_ns: int = 0) -> RunResult:
    """One (mode, payload) run on loopback with separate listener and daemon processes."""
    cfg.validate()
    gcl_config = load_gcl(cfg.gcl_path) if cfg.gcl_path else default_gcl(cfg.period)
    ctx = mp.get_context("spawn")
    clock = RealClock(epoch_ns, cfg.spin_window)
    run_seconds = (cfg.start_delay + cfg.count * cfg.period) / NS_PER_S

    parent, child = ctx.Pipe()
    listener = ctx.Process(
        target=serve_listener,
        args=(("127.0.0.1", 0), cfg.vni, cfg.count, epoch_ns, cfg.drain_timeout, run_seconds + 10, child),
        daemon=True,
    )
    listener.start()
    daemon = None
    stop = ctx.Event()
    with tempfile.TemporaryDirectory(prefix="ktsn-") as tmp:
        try:
            _, listen_addr = _expect(parent, "listener start", 30, listener)
            if cfg.mode is BenchMode.TSN:
                ring_path = os.path.join(tmp, "ring0")
                dparent, dchild = ctx.Pipe()
                daemon = ctx.Process(
                    target=_daemon_entry,
                    args=(gcl_config, [ring_path], listen_addr, cfg.vni, epoch_ns, cfg.spin_window, cfg.poll_interval, stop, dchild),
                    daemon=True,
                )
                daemon.start()
                _expect(dparent, "daemon start", 30, daemon)
                sock = tsn_socket_open(TALKER_FLOW, TSN_CLASS, ring_path)
            else:
                overlay = tunnel_params(cfg.vni, ("127.0.0.1", 0), tuple(listen_addr))
                sock = TsnSocket(TALKER_FLOW, TSN_CLASS, None, baseline=BaselinePath(overlay))
            base = aligned_base(clock.now(), cfg.period, cfg.start_delay, cfg.phase)
            send_log = talker_run(cfg, clock, sock, base)
            sock.close()
            msg = _expect(parent, "listener", run_seconds + 30, listener)
            records = [RunRecord(*r) for r in msg[1]]
            if msg[2]:
                logger.warning("%s/%d: listener drained with %d of %d messages", cfg.mode.value, cfg.payload_size, len(records), cfg.count)
            blocked = sum(1 for e in send_log if e.status is SendStatus.WOULD_BLOCK)
            if blocked:
                logger.warning("%s/%d: %d sends hit a full ring", cfg.mode.value, cfg.payload_size, blocked)
            if daemon is not None:
                stop.set()
                _, daemon_stats = _expect(dparent, "daemon stop", 10, daemon)
                logger.info("daemon counters: %s", daemon_stats)
        finally:
            stop.set()
            for proc in (listener, daemon):
                if proc is not None:
                    proc.join(timeout=5)
                    if proc.is_alive():
                        proc.terminate()
    return RunResult(cfg.mode.value, cfg.payload_size, cfg.period, cfg.count, cfg.warmup, records)


def run_matrix(
    modes: Sequence[BenchMode] = (BenchMode.TSN, BenchMode.BASELINE),
    payloads: Sequence[int] = DEFAULT_PAYLOADS,
    **overrides,
) -> list[RunResult]:
    results = []
    for payload in payloads:
        for mode in modes:
            cfg = BenchConfig(mode=mode, payload_size=payload, **overrides)
            logger.info("running %s with %d B payload", cfg.mode.value, payload)
            results.append(run_real(cfg))
    return results
