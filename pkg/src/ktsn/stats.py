"""Latency, jitter, percentile and CDF computations over run records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

LATENCY_FROM_TXTIME = "arrival-minus-txtime"
LATENCY_FROM_SEND = "arrival-minus-send"


@dataclass(frozen=True)
class RunRecord:
    """Timing of one message. ``txtime`` is 0 when the talker set none."""

    seq: int
    txtime: int
    t_send: int
    t_arrival: int

    def latency(self, definition: str = LATENCY_FROM_TXTIME) -> int:
        if definition == LATENCY_FROM_TXTIME:
            return self.t_arrival - self.txtime
        if definition == LATENCY_FROM_SEND:
            return self.t_arrival - self.t_send
        raise ValueError(f"unknown latency definition {definition!r}")


def compute_jitter(arrivals: Sequence[int], period: int) -> list[int]:
    """Signed jitter of consecutive arrivals: ``t[i] - (t[i-1] + period)``."""
    if len(arrivals) < 2:
        raise ValueError("jitter needs at least two arrivals")
    return [arrivals[i] - arrivals[i - 1] - period for i in range(1, len(arrivals))]


def contiguous_segments(records: Sequence[RunRecord]) -> list[list[RunRecord]]:
    """Split arrival-ordered records wherever seq does not advance by exactly one."""
    segments: list[list[RunRecord]] = []
    for rec in records:
        if segments and rec.seq == segments[-1][-1].seq + 1:
            segments[-1].append(rec)
        else:
            segments.append([rec])
    return segments


def segment_jitter(records: Sequence[RunRecord], period: int) -> tuple[list[Optional[int]], int]:
    """Per-record jitter (``None`` at the start of each segment) and the gap count.

    Records must be in arrival order. Jitter is only computed between
    consecutive sequence numbers, so a lost or reordered message starts a
    new segment instead of producing a spurious sample.
    """
    per_record: list[Optional[int]] = []
    segments = contiguous_segments(records)
    for seg in segments:
        per_record.append(None)
        if len(seg) > 1:
            per_record.extend(compute_jitter([r.t_arrival for r in seg], period))
    return per_record, max(0, len(segments) - 1)


def compute_percentiles(samples: Iterable[int], points: Sequence[float]) -> list[int]:
    """Nearest-rank percentiles: the value at zero-based index ceil(p*n) - 1."""
    ordered = sorted(samples)
    n = len(ordered)
    if n == 0:
        raise ValueError("percentiles of an empty sample set")
    out = []
    for p in points:
        if not 0 < p <= 1:
            raise ValueError(f"percentile point {p} not in (0, 1]")
        rank = math.ceil(Fraction(str(p)) * n)
        out.append(ordered[max(rank, 1) - 1])
    return out


def cdf_table(samples: Iterable[int]) -> list[tuple[int, float]]:
    """(value, fraction of samples <= value) for each distinct value."""
    ordered = sorted(samples)
    n = len(ordered)
    table: list[tuple[int, float]] = []
    for i, value in enumerate(ordered, start=1):
        if table and table[-1][0] == value:
            table[-1] = (value, i / n)
        else:
            table.append((value, i / n))
    return table


@dataclass
class RunStats:
    """Statistics of one (mode, payload) run after warm-up exclusion."""

    mode: str
    payload: int
    period: int
    latency_definition: str
    latencies: list[int]
    jitters: list[int]
    loss_count: int
    gap_count: int
    warmup: int = 0
    extra: dict = field(default_factory=dict)

    def percentiles(self, points: Sequence[float], samples: Optional[Sequence[int]] = None) -> list[int]:
        return compute_percentiles(self.latencies if samples is None else samples, points)

    @property
    def jitter_magnitudes(self) -> list[int]:
        return [abs(j) for j in self.jitters]

    def jitter_spread(self) -> int:
        """p99 - p50 of |jitter|; smaller means a steeper arrival CDF."""
        p50, p99 = compute_percentiles(self.jitter_magnitudes, (0.5, 0.99))
        return p99 - p50

    def summary_row(self) -> dict:
        median, p90, p99 = self.percentiles((0.5, 0.9, 0.99))
        row = {
            "mode": self.mode,
            "payload": self.payload,
            "n": len(self.latencies),
            "median": median,
            "p90": p90,
            "p99": p99,
            "min": min(self.latencies),
            "max": max(self.latencies),
            "loss": self.loss_count,
            "latency_definition": self.latency_definition,
        }
        if self.jitters:
            j50, j90, j99 = compute_percentiles(self.jitter_magnitudes, (0.5, 0.9, 0.99))
            row.update(jitter_abs_p50=j50, jitter_abs_p90=j90, jitter_abs_p99=j99)
        else:
            row.update(jitter_abs_p50="", jitter_abs_p90="", jitter_abs_p99="")
        row["gaps"] = self.gap_count
        return row


def summarize(
    records: Sequence[RunRecord],
    *,
    mode: str,
    payload: int,
    period: int,
    expected: int,
    warmup: int = 0,
    latency_definition: Optional[str] = None,
) -> RunStats:
    """Build :class:`RunStats` from arrival-ordered records.

    Messages with ``seq < warmup`` are excluded from every statistic. Loss
    counts distinct expected sequence numbers that never arrived.
    """
    if latency_definition is None:
        latency_definition = LATENCY_FROM_TXTIME if mode == "tsn" else LATENCY_FROM_SEND
    seen = set()
    kept = []
    for rec in records:
        if rec.seq in seen:
            continue
        seen.add(rec.seq)
        if rec.seq >= warmup:
            kept.append(rec)
    if not kept:
        raise ValueError("no records left after warm-up exclusion")
    loss = sum(1 for s in range(warmup, expected) if s not in seen)
    per_record, gaps = segment_jitter(kept, period)
    by_seq = sorted(kept, key=lambda r: r.seq)
    return RunStats(
        mode=mode,
        payload=payload,
        period=period,
        latency_definition=latency_definition,
        latencies=[r.latency(latency_definition) for r in by_seq],
        jitters=[j for j in per_record if j is not None],
        loss_count=loss,
        gap_count=gaps,
        warmup=warmup,
    )
