"""``ktsn`` command line.

Every real-clock subcommand measures time from the raw CLOCK_MONOTONIC
origin (epoch 0), so separately started processes on one host agree on
instants without any handshake.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .bench import (
    DEFAULT_PAYLOADS,
    DEFAULT_VNI,
    TALKER_FLOW,
    TSN_CLASS,
    BenchConfig,
    BenchConfigError,
    BenchMode,
    BenchRuntimeError,
    Listener,
    aligned_base,
    calibrate_release_tolerance,
    default_gcl,
    listener_run,
    run_matrix,
    serve_daemon,
    talker_run,
)
from .clock import NS_PER_MS, NS_PER_US, RealClock, reduce_timer_slack
from .gclfile import GclConfigError, load_gcl
from .report import ReportError, RunResult, emit_report, load_runs
from .ring import RingError
from .shim import SendStatus, TsnSocket, tsn_socket_open
from .vswitch import BaselinePath, TransportError, UdpTransport, VirtualSwitch, tunnel_params

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

logger = logging.getLogger("ktsn")


class CliConfigError(ValueError):
    pass


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise CliConfigError(f"expected HOST:PORT, got {text!r}")
    try:
        num = int(port)
    except ValueError:
        raise CliConfigError(f"bad port in {text!r}") from None
    if not 0 <= num <= 0xFFFF:
        raise CliConfigError(f"port out of range in {text!r}")
    return host, num


def parse_port_specs(text: str) -> list[tuple[tuple[str, int], tuple[str, int]]]:
    """``BIND=REMOTE[,BIND=REMOTE...]``, each side HOST:PORT."""
    specs = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        bind, sep, remote = item.partition("=")
        if not sep:
            raise CliConfigError(f"port spec {item!r} is not BIND=REMOTE")
        specs.append((parse_addr(bind), parse_addr(remote)))
    if not specs:
        raise CliConfigError("no ports given")
    return specs


def _stop_event(duration: Optional[float]) -> threading.Event:
    """Event set by SIGINT/SIGTERM or after ``duration`` seconds."""
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    if duration is not None:
        timer = threading.Timer(duration, stop.set)
        timer.daemon = True
        timer.start()
    return stop


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    sys.stdout.flush()


# -- subcommands ----------------------------------------------------------------


def cmd_daemon(args) -> int:
    gcl_config = load_gcl(args.gcl) if args.gcl else default_gcl(args.period_ns)
    remote = parse_addr(args.remote)
    stop = _stop_event(args.duration)
    logger.info("daemon: rings %s, tunnel to %s:%d", ", ".join(args.ring), *remote)
    stats = serve_daemon(gcl_config, args.ring, remote, args.vni, 0, args.spin_window_ns, args.poll_interval_ns, stop)
    _print_json(stats)
    return EXIT_OK


def cmd_switch(args) -> int:
    specs = parse_port_specs(args.ports)
    clock = RealClock(0)
    switch = VirtualSwitch("ktsn-switch")
    transports = []
    try:
        for port_id, (bind, remote) in enumerate(specs, start=1):
            transport = UdpTransport(bind)
            transports.append(transport)
            switch.add_tunnel_port(port_id, tunnel_params(args.vni, transport.local_addr, remote), transport)
            print(f"port {port_id}: {transport.local_addr[0]}:{transport.local_addr[1]} -> {remote[0]}:{remote[1]}", flush=True)
        stop = _stop_event(args.duration)
        while not stop.is_set():
            switch.poll(clock, timeout=0.05)
    finally:
        for transport in transports:
            transport.close()
    _print_json(vars(switch.counters))
    return EXIT_OK


def _bench_config(args, mode: BenchMode, payload: int) -> BenchConfig:
    return BenchConfig(
        mode=mode,
        payload_size=payload,
        period=args.period_ns,
        count=args.count,
        warmup=args.warmup,
        vni=args.vni,
    ).validate()


def cmd_talker(args) -> int:
    cfg = _bench_config(args, BenchMode(args.mode), args.payload)
    cfg.lead = args.lead_ns
    cfg.start_delay = args.start_delay_ns
    clock = RealClock(0)
    if cfg.mode is BenchMode.TSN:
        if not args.ring:
            raise CliConfigError("--ring is required in tsn mode")
        sock = tsn_socket_open(TALKER_FLOW, TSN_CLASS, args.ring)
    else:
        if not args.remote:
            raise CliConfigError("--remote is required in baseline mode")
        overlay = tunnel_params(cfg.vni, ("127.0.0.1", 0), parse_addr(args.remote))
        sock = TsnSocket(TALKER_FLOW, TSN_CLASS, None, baseline=BaselinePath(overlay))
    try:
        base = aligned_base(clock.now(), cfg.period, cfg.start_delay, cfg.phase)
        log = talker_run(cfg, clock, sock, base)
    finally:
        sock.close()
    blocked = sum(1 for e in log if e.status is SendStatus.WOULD_BLOCK)
    _print_json({"mode": cfg.mode.value, "sent": len(log) - blocked, "would_block": blocked, "base_ns": base})
    return EXIT_OK


def cmd_listener(args) -> int:
    cfg = _bench_config(args, BenchMode(args.mode), args.payload)
    reduce_timer_slack()
    clock = RealClock(0)
    transport = UdpTransport(parse_addr(args.bind))
    try:
        switch = VirtualSwitch("listener")
        listener = Listener(clock)
        switch.add_local_port(1, listener.on_frame)
        switch.add_tunnel_port(2, tunnel_params(cfg.vni, transport.local_addr, ("127.0.0.1", 9)), transport)
        print(f"listening on {transport.local_addr[0]}:{transport.local_addr[1]}", flush=True)
        result = listener_run(args.expect, clock, switch, listener, drain_timeout=args.drain_timeout, first_timeout=args.first_timeout)
    finally:
        transport.close()
    if not result.records:
        raise BenchRuntimeError("no messages received")
    run = RunResult(cfg.mode.value, cfg.payload_size, cfg.period, args.expect, cfg.warmup, result.records)
    stats = emit_report([run], args.out)
    _print_json(stats[run.key].summary_row())
    return EXIT_OK


def cmd_bench(args) -> int:
    modes = [BenchMode(m) for m in args.modes]
    for payload in args.payloads:
        _bench_config(args, modes[0], payload)
    out = Path(args.out)
    if args.calibrate:
        calibration = calibrate_release_tolerance()
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.json").write_text(json.dumps(calibration, indent=2, sort_keys=True) + "\n")
        logger.info("release tolerance %d ns", calibration["release_tolerance_ns"])
    results = run_matrix(
        modes, args.payloads, period=args.period_ns, count=args.count, warmup=args.warmup, vni=args.vni,
        gcl_path=args.gcl,
    )
    all_stats = emit_report(results, out, plot=args.plot)
    for key in sorted(all_stats):
        row = all_stats[key].summary_row()
        spread = all_stats[key].jitter_spread() if all_stats[key].jitters else ""
        print(f"{key:>16}  median={row['median']}  p90={row['p90']}  p99={row['p99']}  loss={row['loss']}  jitter_spread={spread}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    calibration = calibrate_release_tolerance(samples=args.samples)
    text = json.dumps(calibration, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    results = load_runs(args.in_dir)
    all_stats = emit_report(results, args.out, plot=args.plot)
    print(f"wrote {len(all_stats)} runs to {args.out}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_run_shape(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=[m.value for m in BenchMode], default="tsn")
    p.add_argument("--payload", type=int, default=64, help="payload bytes (default 64)")
    p.add_argument("--period-ns", type=int, default=NS_PER_MS)
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--vni", type=int, default=DEFAULT_VNI)


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not argparse's default status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ktsn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("daemon", help="run the shaper daemon on one or more rings")
    p.add_argument("--gcl", help="GCL YAML file (default: two-class half/half schedule)")
    p.add_argument("--ring", action="append", required=True, help="ring file to create; repeatable")
    p.add_argument("--remote", default="127.0.0.1:4789", help="tunnel peer HOST:PORT")
    p.add_argument("--vni", type=int, default=DEFAULT_VNI)
    p.add_argument("--period-ns", type=int, default=NS_PER_MS, help="cycle of the default GCL")
    p.add_argument("--spin-window-ns", type=int, default=300 * NS_PER_US)
    p.add_argument("--poll-interval-ns", type=int, default=NS_PER_MS)
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("switch", help="relay VXLAN traffic between tunnel ports")
    p.add_argument("--ports", required=True, help="BIND=REMOTE[,BIND=REMOTE...] with HOST:PORT on each side")
    p.add_argument("--vni", type=int, default=DEFAULT_VNI)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_switch)

    p = sub.add_parser("talker", help="send a periodic message stream")
    _add_run_shape(p)
    p.add_argument("--ring", help="daemon ring file (tsn mode)")
    p.add_argument("--remote", help="listener HOST:PORT (baseline mode)")
    p.add_argument("--lead-ns", type=int, default=2500 * NS_PER_US)
    p.add_argument("--start-delay-ns", type=int, default=200 * NS_PER_MS)
    p.set_defaults(func=cmd_talker)

    p = sub.add_parser("listener", help="receive, timestamp and report a message stream")
    _add_run_shape(p)
    p.add_argument("--expect", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bind", default="127.0.0.1:0")
    p.add_argument("--drain-timeout", type=float, default=1.0)
    p.add_argument("--first-timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_listener)

    p = sub.add_parser("bench", help="run the mode x payload matrix on loopback and write a report")
    p.add_argument("--modes", nargs="+", choices=[m.value for m in BenchMode], default=[m.value for m in BenchMode])
    p.add_argument("--payloads", nargs="+", type=int, default=list(DEFAULT_PAYLOADS))
    p.add_argument("--period-ns", type=int, default=NS_PER_MS)
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--vni", type=int, default=DEFAULT_VNI)
    p.add_argument("--gcl")
    p.add_argument("--out", default="ktsn-results")
    p.add_argument("--calibrate", action="store_true", help="also store release-tolerance calibration")
    p.add_argument("--plot", action="store_true", help="render PNG plots (needs matplotlib)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="measure this machine's release tolerance")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="rebuild summary and CDF tables from a result directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


CONFIG_ERRORS = (CliConfigError, BenchConfigError, GclConfigError, ValueError)
RUNTIME_ERRORS = (BenchRuntimeError, ReportError, RingError, TransportError, OSError, RuntimeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.monotonic()
    try:
        code = args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"ktsn {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"ktsn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    logger.info("%s finished in %.1f s", args.command, time.monotonic() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
