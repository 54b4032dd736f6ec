"""Userspace Time-Aware Shaper.

Descriptors wait in per-class queues ordered by (txtime, seq). A descriptor is
released at ``max(txtime, next opening of its class gate at or after txtime)``;
among descriptors due at the same instant, lower class ids go first, then
earlier txtime, then lower seq. Frames are not assumed to take any time on the
wire, so there are no guard bands: a gate that is open at the release instant
is open for the whole frame.
"""

from __future__ import annotations

import bisect
import enum
import heapq
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Protocol

from .clock import DEFAULT_SPIN_WINDOW_NS, NS_PER_US, checked_add
from .frames import DEFAULT_TTL, encode_udp_frame
from .ring import DescriptorRing, PacketDescriptor

logger = logging.getLogger(__name__)

MAX_CLASSES = 8


class GclValidationError(ValueError):
    """A gate control list breaks one of its structural rules."""

    def __init__(self, message: str, slot: Optional[int] = None):
        super().__init__(message)
        self.slot = slot


class ZeroCycle(GclValidationError):
    pass


class Unsorted(GclValidationError):
    pass


class Overlap(GclValidationError):
    pass


class Gap(GclValidationError):
    pass


class EmptySlot(GclValidationError):
    pass


class BadClassId(GclValidationError):
    pass


class ClassNeverOpen(ValueError):
    pass


class UnknownClass(ValueError):
    pass


@dataclass(frozen=True)
class GateSlot:
    offset: int
    length: int
    open_classes: frozenset[int]

    def __init__(self, offset: int, length: int, open_classes: Iterable[int]):
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "open_classes", frozenset(open_classes))

    @property
    def end(self) -> int:
        return self.offset + self.length

    @property
    def mask(self) -> int:
        return sum(1 << c for c in self.open_classes)


@dataclass(frozen=True)
class GateControlList:
    """Cyclic IEEE 802.1Qbv schedule.

    ``slots`` must tile ``[0, cycle)`` exactly; phase zero of the schedule is
    ``base_time``. Call :meth:`validate` (or build through
    :class:`TasScheduler`, which validates) before querying gates.
    """

    cycle: int
    slots: tuple[GateSlot, ...]
    num_classes: int = 2
    base_time: int = 0
    _windows: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))

    @classmethod
    def uniform(cls, cycle: int, classes: Iterable[Iterable[int]], num_classes: int = 2, base_time: int = 0) -> "GateControlList":
        """Equal-length slots, one per entry of ``classes``."""
        classes = [list(c) for c in classes]
        step, rest = divmod(cycle, len(classes))
        slots = []
        for i, open_classes in enumerate(classes):
            length = step + (rest if i == len(classes) - 1 else 0)
            slots.append(GateSlot(i * step, length, open_classes))
        return cls(cycle, tuple(slots), num_classes, base_time)

    def validate(self) -> "GateControlList":
        if self.cycle <= 0:
            raise ZeroCycle(f"cycle must be positive, got {self.cycle}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise BadClassId(f"num_classes must be in 1..{MAX_CLASSES}, got {self.num_classes}")
        if self.base_time < 0:
            raise ValueError("base_time must be >= 0")
        if not self.slots:
            raise Gap("no slots: the whole cycle is uncovered")
        for i, slot in enumerate(self.slots):
            bad = [c for c in slot.open_classes if not 0 <= c < self.num_classes]
            if bad:
                raise BadClassId(f"slot {i} opens class {bad[0]} but num_classes is {self.num_classes}", i)
            if i and slot.offset < self.slots[i - 1].offset:
                raise Unsorted(f"slot {i} offset {slot.offset} precedes slot {i - 1} offset {self.slots[i - 1].offset}", i)
        expected = 0
        for i, slot in enumerate(self.slots):
            if slot.length <= 0:
                raise EmptySlot(f"slot {i} has non-positive length {slot.length}", i)
            if slot.offset < expected:
                raise Overlap(f"slot {i} starts at {slot.offset}, inside the previous slot ending at {expected}", i)
            if slot.offset > expected:
                raise Gap(f"nothing covers [{expected}, {slot.offset}) before slot {i}", i)
            expected = slot.end
        if expected < self.cycle:
            raise Gap(f"nothing covers [{expected}, {self.cycle}) at the end of the cycle")
        if expected > self.cycle:
            raise Overlap(f"slots end at {expected}, past the cycle of {self.cycle}")
        return self

    def _open_windows(self, class_id: int) -> list[tuple[int, int]]:
        """Merged [start, end) phase intervals during which ``class_id`` is open."""
        if self._windows is None:
            object.__setattr__(self, "_windows", {})
        cached = self._windows.get(class_id)
        if cached is None:
            cached = []
            for slot in self.slots:
                if class_id in slot.open_classes:
                    if cached and cached[-1][1] == slot.offset:
                        cached[-1] = (cached[-1][0], slot.end)
                    else:
                        cached.append((slot.offset, slot.end))
            self._windows[class_id] = cached
        return cached

    def _check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_classes:
            raise UnknownClass(f"class {class_id} outside 0..{self.num_classes - 1}")

    def phase(self, t: int) -> int:
        if t < self.base_time:
            raise ValueError(f"instant {t} precedes the schedule base time {self.base_time}")
        return (t - self.base_time) % self.cycle

    def slot_at(self, t: int) -> GateSlot:
        p = self.phase(t)
        offsets = [s.offset for s in self.slots]
        return self.slots[bisect.bisect_right(offsets, p) - 1]

    def gate_open(self, class_id: int, t: int) -> bool:
        self._check_class(class_id)
        return class_id in self.slot_at(t).open_classes

    def next_gate_open(self, class_id: int, t: int) -> int:
        """Earliest instant >= ``t`` at which ``class_id``'s gate is open.

        Instants before ``base_time`` are treated as ``base_time``; the gate
        state is undefined before the schedule starts.
        """
        self._check_class(class_id)
        windows = self._open_windows(class_id)
        if not windows:
            raise ClassNeverOpen(f"class {class_id} is not opened by any slot")
        t = max(t, self.base_time)
        p = (t - self.base_time) % self.cycle
        cycle_start = t - p
        for start, end in windows:
            if p < end:
                return t if p >= start else cycle_start + start
        return cycle_start + self.cycle + windows[0][0]


class PastTxtimePolicy(enum.Enum):
    DROP = "drop"
    SEND_IMMEDIATELY = "send_immediately"


class SubmitResult(enum.Enum):
    QUEUED = "queued"
    DROPPED = "dropped"


@dataclass
class SchedulerConfig:
    gcl: GateControlList
    past_txtime_policy: PastTxtimePolicy = PastTxtimePolicy.DROP
    release_tolerance: int = 200 * NS_PER_US
    spin_window: int = DEFAULT_SPIN_WINDOW_NS
    poll_interval: int = 200 * NS_PER_US
    stall_backoff: int = 1 * NS_PER_US
    udp_checksum: bool = True
    ttl: int = DEFAULT_TTL

    def __post_init__(self):
        if self.release_tolerance <= 0:
            raise ValueError("release_tolerance must be positive")
        if self.poll_interval <= 0 or self.stall_backoff <= 0:
            raise ValueError("poll_interval and stall_backoff must be positive")


@dataclass(frozen=True)
class TxRecord:
    """One transmitted frame.

    ``scheduled_time`` is the computed release instant; ``release_time`` is
    the clock reading when the frame was handed to egress.
    """

    seq: int
    release_time: int
    frame_len: int
    class_id: int
    txtime: int
    scheduled_time: int


@dataclass(order=True)
class _Entry:
    txtime: int
    seq: int
    arrival: int
    desc: PacketDescriptor = field(compare=False)


class DescriptorSource(Protocol):
    def poll(self, now: int) -> Iterable[PacketDescriptor]: ...

    def next_arrival(self) -> Optional[int]: ...

    @property
    def exhausted(self) -> bool: ...


class RingSource:
    """Round-robin poller over client rings; never exhausted unless closed."""

    def __init__(self, rings: Iterable[DescriptorRing], batch: int = 32):
        self.rings = list(rings)
        self.batch = batch
        self.closed = False

    def poll(self, now: int) -> list[PacketDescriptor]:
        out: list[PacketDescriptor] = []
        progress = True
        while progress:
            progress = False
            for ring in self.rings:
                desc = ring.pop()
                if desc is not None:
                    out.append(desc)
                    progress = len(out) < self.batch * len(self.rings)
        return out

    def next_arrival(self) -> Optional[int]:
        return None

    @property
    def exhausted(self) -> bool:
        return self.closed and all(len(r) == 0 for r in self.rings)


class ScheduledSource:
    """Descriptors that become visible at known instants (for simulation)."""

    def __init__(self, arrivals: Iterable[tuple[int, PacketDescriptor]]):
        self._pending = sorted(arrivals, key=lambda a: a[0])
        self._index = 0

    def poll(self, now: int) -> list[PacketDescriptor]:
        out = []
        while self._index < len(self._pending) and self._pending[self._index][0] <= now:
            out.append(self._pending[self._index][1])
            self._index += 1
        return out

    def next_arrival(self) -> Optional[int]:
        if self._index < len(self._pending):
            return self._pending[self._index][0]
        return None

    @property
    def exhausted(self) -> bool:
        return self._index >= len(self._pending)


Egress = Callable[[bytes], Optional[bool]]


class TasScheduler:
    """Per-class queues plus the gate-aware release rule."""

    def __init__(self, config: SchedulerConfig):
        config.gcl.validate()
        self.config = config
        self.gcl = config.gcl
        self._queues: list[list[_Entry]] = [[] for _ in range(self.gcl.num_classes)]
        self._arrivals = itertools.count()
        self._ident: dict = {}
        self._lock = threading.Lock()
        self._counters = {"queued": 0, "dropped_late": 0, "transmitted": 0, "egress_stalls": 0}

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)

    def _count(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._counters[name] += n

    def stats(self) -> dict:
        """Consistent snapshot of the counters; safe from any thread."""
        with self._lock:
            snapshot = dict(self._counters)
        snapshot["backlog"] = len(self)
        return snapshot

    def submit(self, desc: PacketDescriptor, now: int) -> SubmitResult:
        if not 0 <= desc.traffic_class < self.gcl.num_classes:
            raise UnknownClass(f"descriptor {desc.seq} has class {desc.traffic_class}, schedule has {self.gcl.num_classes}")
        if desc.txtime and desc.txtime < now and self.config.past_txtime_policy is PastTxtimePolicy.DROP:
            self._count("dropped_late")
            logger.debug("dropping seq %d: txtime %d is before now %d", desc.seq, desc.txtime, now)
            return SubmitResult.DROPPED
        effective = max(desc.txtime, now)
        heapq.heappush(self._queues[desc.traffic_class], _Entry(effective, desc.seq, next(self._arrivals), desc))
        self._count("queued")
        return SubmitResult.QUEUED

    def release_time(self, class_id: int, txtime: int) -> int:
        return max(txtime, self.gcl.next_gate_open(class_id, txtime))

    def _best(self) -> Optional[tuple]:
        best = None
        for class_id, queue in enumerate(self._queues):
            if queue:
                head = queue[0]
                key = (self.release_time(class_id, head.txtime), class_id, head.txtime, head.seq, head.arrival)
                if best is None or key < best:
                    best = key
        return best

    def next_release(self, now: int = 0) -> Optional[tuple[int, PacketDescriptor]]:
        """Next (release instant, descriptor), or ``None`` when idle.

        The head of each class queue has the smallest release time of its
        class because the release rule is monotone in txtime.
        """
        best = self._best()
        if best is None:
            return None
        return best[0], self._queues[best[1]][0].desc

    def _pop_next(self) -> tuple[int, _Entry]:
        best = self._best()
        return best[0], heapq.heappop(self._queues[best[1]])

    def encode(self, desc: PacketDescriptor) -> bytes:
        ident = self._ident.get(desc.flow, 0)
        self._ident[desc.flow] = ident + 1
        return encode_udp_frame(desc.flow, desc.payload, self.config.ttl, ident=ident, udp_checksum=self.config.udp_checksum)

    def run(
        self,
        clock,
        egress: Egress,
        source: Optional[DescriptorSource] = None,
        *,
        stop: Optional[threading.Event] = None,
        max_records: Optional[int] = None,
    ) -> Iterator[TxRecord]:
        """Release loop; yields one :class:`TxRecord` per transmitted frame.

        Returns once the source is exhausted and all queues are empty, when
        ``stop`` is set, or after ``max_records`` frames. A simulated clock
        with nothing queued and nothing pending also ends the loop.

        ``egress`` receives each encoded frame; a ``False`` return is a stall
        and the same frame is retried after ``stall_backoff``.
        """
        simulated = getattr(clock, "simulated", False)
        cfg = self.config
        emitted = 0
        while stop is None or not stop.is_set():
            now = clock.now()
            if source is not None:
                for desc in source.poll(now):
                    self.submit(desc, now)

            hint = source.next_arrival() if source is not None else None
            if simulated:
                pending = clock.next_wakeup()
                if pending is not None and (hint is None or pending < hint):
                    hint = pending

            nxt = self.next_release(now)
            if nxt is None:
                if hint is None:
                    if simulated or source is None or source.exhausted:
                        return
                    clock.sleep_until(now + cfg.poll_interval, spin=False)
                else:
                    clock.sleep_until(max(hint, now), spin=False)
                continue

            release = nxt[0]
            if release > now:
                if hint is not None and hint < release:
                    clock.sleep_until(max(hint, now), spin=False)
                    continue
                if simulated:
                    clock.sleep_until(release)
                    continue
                if release - now > cfg.spin_window:
                    # coarse nap, then re-poll the rings before the final approach
                    clock.sleep_until(min(release - cfg.spin_window, now + cfg.poll_interval), spin=False)
                    continue
                # final approach on a real clock: commit to this frame and
                # encode it before spinning, so the spin ends at the wire
                scheduled, entry = self._pop_next()
                frame = self.encode(entry.desc)
                clock.sleep_until(release)
            else:
                scheduled, entry = self._pop_next()
                frame = self.encode(entry.desc)

            while True:
                released_at = clock.now()
                if egress(frame) is not False:
                    break
                self._count("egress_stalls")
                clock.sleep_until(checked_add(released_at, cfg.stall_backoff), spin=False)
            self._count("transmitted")
            yield TxRecord(entry.seq, released_at, len(frame), entry.desc.traffic_class, entry.txtime, scheduled)
            emitted += 1
            if max_records is not None and emitted >= max_records:
                return


def run_release_loop(scheduler: TasScheduler, clock, egress: Egress, source: Optional[DescriptorSource] = None, **kwargs) -> Iterator[TxRecord]:
    return scheduler.run(clock, egress, source, **kwargs)
