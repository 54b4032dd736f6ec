"""CSV emission for benchmark runs.

Files written by :func:`emit_report` into the output directory:

``run_<mode>_<payload>.csv``
    seq, txtime_ns, t_send_ns, t_arrival_ns, latency_ns, jitter_ns
    (arrival order; jitter_ns empty where a contiguous segment starts)
``summary.csv``
    mode, payload, n, median, p90, p99, min, max, loss, then the latency
    definition label, |jitter| percentiles and the gap count
``cdf_<mode>_<payload>.csv``
    latency_ns, cumulative_fraction
``runs.json``
    manifest with period, expected count and warm-up per run; lets
    :func:`load_runs` rebuild everything from a directory

Output is a pure function of the input records.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .stats import RunRecord, RunStats, cdf_table, segment_jitter, summarize

RUN_COLUMNS = ["seq", "txtime_ns", "t_send_ns", "t_arrival_ns", "latency_ns", "jitter_ns"]
SUMMARY_COLUMNS = [
    "mode", "payload", "n", "median", "p90", "p99", "min", "max", "loss",
    "latency_definition", "jitter_abs_p50", "jitter_abs_p90", "jitter_abs_p99", "gaps",
]
CDF_COLUMNS = ["latency_ns", "cumulative_fraction"]
MANIFEST = "runs.json"


class ReportError(OSError):
    pass


@dataclass
class RunResult:
    mode: str
    payload: int
    period: int
    expected: int
    warmup: int
    records: list[RunRecord]

    @property
    def key(self) -> str:
        return f"{self.mode}_{self.payload}"

    def stats(self) -> RunStats:
        return summarize(
            self.records, mode=self.mode, payload=self.payload, period=self.period,
            expected=self.expected, warmup=self.warmup,
        )


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def write_run_csv(path: Path, result: RunResult) -> None:
    stats = result.stats()
    jitter, _ = segment_jitter(result.records, result.period)
    rows = []
    for rec, jit in zip(result.records, jitter):
        rows.append([rec.seq, rec.txtime, rec.t_send, rec.t_arrival, rec.latency(stats.latency_definition), "" if jit is None else jit])
    _write_csv(path, RUN_COLUMNS, rows)


def read_run_csv(path: Path) -> list[RunRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            RunRecord(int(row["seq"]), int(row["txtime_ns"]), int(row["t_send_ns"]), int(row["t_arrival_ns"]))
            for row in csv.DictReader(fh)
        ]


def emit_report(results: Sequence[RunResult], out_dir, *, plot: bool = False) -> dict[str, RunStats]:
    """Write run, summary and CDF tables for ``results``; returns stats by run key."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc

    ordered = sorted(results, key=lambda r: (r.mode, r.payload))
    all_stats: dict[str, RunStats] = {}
    summary_rows = []
    manifest = []
    try:
        for result in ordered:
            stats = result.stats()
            all_stats[result.key] = stats
            run_file = f"run_{result.key}.csv"
            write_run_csv(out / run_file, result)
            _write_csv(out / f"cdf_{result.key}.csv", CDF_COLUMNS, [(v, repr(f)) for v, f in cdf_table(stats.latencies)])
            row = stats.summary_row()
            summary_rows.append([row[c] for c in SUMMARY_COLUMNS])
            manifest.append({
                "mode": result.mode, "payload": result.payload, "period_ns": result.period,
                "expected": result.expected, "warmup": result.warmup, "file": run_file,
            })
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)
        with open(out / MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc

    if plot:
        render_plots(all_stats, out)
    return all_stats


def load_runs(in_dir) -> list[RunResult]:
    base = Path(in_dir)
    try:
        with open(base / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ReportError(f"cannot read {base / MANIFEST}: {exc}") from exc
    results = []
    for entry in manifest:
        results.append(RunResult(
            entry["mode"], int(entry["payload"]), int(entry["period_ns"]), int(entry["expected"]),
            int(entry["warmup"]), read_run_csv(base / entry["file"]),
        ))
    return results


def render_plots(all_stats: dict[str, RunStats], out_dir) -> list[Path]:
    """Latency CDF per payload and a median/p99 bar chart. Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written = []
    payloads = sorted({s.payload for s in all_stats.values()})
    for payload in payloads:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for stats in sorted((s for s in all_stats.values() if s.payload == payload), key=lambda s: s.mode):
            table = cdf_table(stats.latencies)
            ax.step([v / 1000 for v, _ in table], [f for _, f in table], where="post", label=f"{stats.mode} ({stats.latency_definition})")
        ax.set_xlabel("latency [us]")
        ax.set_ylabel("CDF")
        ax.set_title(f"{payload} B")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / f"cdf_{payload}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    modes = sorted({s.mode for s in all_stats.values()})
    width = 0.8 / max(len(modes), 1)
    for i, mode in enumerate(modes):
        xs, medians = [], []
        for j, payload in enumerate(payloads):
            stats = all_stats.get(f"{mode}_{payload}")
            if stats is not None:
                xs.append(j + i * width)
                medians.append(stats.percentiles((0.5,))[0] / 1000)
        ax.bar(xs, medians, width=width, label=mode)
    ax.set_xticks([j + width * (len(modes) - 1) / 2 for j in range(len(payloads))])
    ax.set_xticklabels([f"{p} B" for p in payloads])
    ax.set_ylabel("median latency [us]")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out / "latency_median.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written
