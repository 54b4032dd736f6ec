"""Single-producer/single-consumer descriptor ring over a flat byte region.

The region is either a private ``bytearray`` or a memory-mapped file that a
client process and the daemon map concurrently. File layout (little endian)::

    offset  size  field
    0       4     magic 0x4B54534E ("KTSN")
    4       2     layout version
    6       2     reserved (0)
    8       4     capacity (slots, power of two)
    12      4     slot_size (bytes)
    64      8     head  (next slot the producer writes; producer-owned)
    128     8     tail  (next slot the consumer reads; consumer-owned)
    192     ...   capacity * slot_size bytes of slots

Each slot holds one descriptor::

    0   8   seq
    8   8   txtime (ns, 0 = unset)
    16  1   traffic class
    17  1   reserved
    18  2   payload length
    20  24  flow tuple (FlowTuple.packed(), big endian)
    44  4   reserved
    48  ... payload

head and tail increase monotonically and are reduced modulo capacity only
when addressing a slot. The producer writes the slot before storing the new
head and the consumer reads the slot before storing the new tail; each index
is a single aligned 8-byte store in native byte order (little endian on the
supported hosts), so the other side observes either the old or the new
value. This relies on the in-order stores of CPython plus a TSO memory model
(x86-64).
"""

from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass
from typing import Generator, Optional

from .frames import MAX_PAYLOAD, FlowTuple, PayloadTooLarge

RING_MAGIC = 0x4B54534E
RING_VERSION = 1

HEADER_SIZE = 192
HEAD_OFFSET = 64
TAIL_OFFSET = 128
DESCRIPTOR_HEADER_SIZE = 48
MIN_SLOT_SIZE = DESCRIPTOR_HEADER_SIZE + MAX_PAYLOAD
DEFAULT_CAPACITY = 1024
DEFAULT_SLOT_SIZE = 1536

_HEADER = struct.Struct("<IHHII")
_SLOT = struct.Struct("<QQBxH24s4x")

assert _SLOT.size == DESCRIPTOR_HEADER_SIZE


class RingError(Exception):
    pass


class BadCapacity(RingError, ValueError):
    pass


class BackingUnavailable(RingError, OSError):
    pass


class RingAttachFailed(RingError, OSError):
    pass


class HeaderMismatch(RingError):
    pass


@dataclass(frozen=True)
class PacketDescriptor:
    """One application datagram plus the metadata the scheduler needs."""

    seq: int
    txtime: int
    traffic_class: int
    flow: FlowTuple
    payload: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        if not 0 <= self.traffic_class <= 0xFF:
            raise ValueError(f"traffic class {self.traffic_class} out of range")
        if self.seq < 0 or self.txtime < 0:
            raise ValueError("seq and txtime are unsigned")

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def _complete(steps: Generator):
    try:
        while True:
            next(steps)
    except StopIteration as stop:
        return stop.value


class DescriptorRing:
    """Bounded SPSC FIFO of :class:`PacketDescriptor`.

    Use :meth:`create` to make a ring and :meth:`attach` to map an existing
    shared file. :meth:`push` returns ``False`` when full (would block) and
    :meth:`pop` returns ``None`` when empty; neither ever blocks or drops.
    """

    def __init__(self, buffer, capacity: int, slot_size: int, path: Optional[str] = None, mapping=None):
        self._buf = buffer
        self._mmap = mapping
        self.capacity = capacity
        self.slot_size = slot_size
        self.path = path
        self._mask = capacity - 1
        # head/tail go through one-element "Q" views: item assignment is a
        # single 8-byte memcpy. struct.pack_into would memset the field to
        # zero before writing it, briefly publishing index 0 to the peer.
        self._head = buffer[HEAD_OFFSET : HEAD_OFFSET + 8].cast("Q")
        self._tail = buffer[TAIL_OFFSET : TAIL_OFFSET + 8].cast("Q")

    @classmethod
    def create(cls, capacity: int = DEFAULT_CAPACITY, slot_size: int = DEFAULT_SLOT_SIZE, path: Optional[str] = None) -> "DescriptorRing":
        """Make an empty ring, in process memory or backed by the file at ``path``."""
        if capacity < 2 or capacity & (capacity - 1) or capacity >= 1 << 32:
            raise BadCapacity(f"capacity {capacity} is not a power of two >= 2")
        if slot_size < MIN_SLOT_SIZE or slot_size >= 1 << 32:
            raise BadCapacity(f"slot_size {slot_size} is below the minimum {MIN_SLOT_SIZE}")
        size = HEADER_SIZE + capacity * slot_size
        if path is None:
            ring = cls(memoryview(bytearray(size)), capacity, slot_size)
        else:
            try:
                fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o600)
                try:
                    os.ftruncate(fd, size)
                    mapping = mmap.mmap(fd, size)
                finally:
                    os.close(fd)
            except OSError as exc:
                raise BackingUnavailable(f"cannot create ring file {path}: {exc}") from exc
            ring = cls(memoryview(mapping), capacity, slot_size, path, mapping)
        _HEADER.pack_into(ring._buf, 0, RING_MAGIC, RING_VERSION, 0, capacity, slot_size)
        return ring

    @classmethod
    def attach(cls, path: str) -> "DescriptorRing":
        """Map an existing ring file, validating its header."""
        try:
            fd = os.open(path, os.O_RDWR)
        except OSError as exc:
            raise RingAttachFailed(f"cannot open ring file {path}: {exc}") from exc
        try:
            size = os.fstat(fd).st_size
            if size < HEADER_SIZE:
                raise HeaderMismatch(f"{path}: {size} bytes is smaller than the ring header")
            mapping = mmap.mmap(fd, size)
        except OSError as exc:
            raise RingAttachFailed(f"cannot map ring file {path}: {exc}") from exc
        finally:
            os.close(fd)
        magic, version, _, capacity, slot_size = _HEADER.unpack_from(mapping, 0)
        problem = None
        if magic != RING_MAGIC:
            problem = f"bad magic {magic:#010x}"
        elif version != RING_VERSION:
            problem = f"layout version {version}, expected {RING_VERSION}"
        elif capacity < 2 or capacity & (capacity - 1) or slot_size < MIN_SLOT_SIZE:
            problem = f"invalid geometry capacity={capacity} slot_size={slot_size}"
        elif size != HEADER_SIZE + capacity * slot_size:
            problem = f"file size {size} does not match capacity={capacity} slot_size={slot_size}"
        if problem:
            mapping.close()
            raise HeaderMismatch(f"{path}: {problem}")
        return cls(memoryview(mapping), capacity, slot_size, path, mapping)

    def close(self) -> None:
        if self._mmap is not None:
            self._head.release()
            self._tail.release()
            self._buf.release()
            self._mmap.close()
            self._mmap = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def head(self) -> int:
        return self._head[0]

    @property
    def tail(self) -> int:
        return self._tail[0]

    def __len__(self) -> int:
        return self.head - self.tail

    def _slot_offset(self, index: int) -> int:
        return HEADER_SIZE + (index & self._mask) * self.slot_size

    def _write_slot(self, index: int, desc: PacketDescriptor) -> None:
        offset = self._slot_offset(index)
        _SLOT.pack_into(self._buf, offset, desc.seq, desc.txtime, desc.traffic_class, len(desc.payload), desc.flow.packed())
        start = offset + DESCRIPTOR_HEADER_SIZE
        self._buf[start : start + len(desc.payload)] = desc.payload

    def _read_slot(self, index: int) -> PacketDescriptor:
        offset = self._slot_offset(index)
        seq, txtime, tclass, length, flow = _SLOT.unpack_from(self._buf, offset)
        start = offset + DESCRIPTOR_HEADER_SIZE
        return PacketDescriptor(seq, txtime, tclass, FlowTuple.unpack(flow), bytes(self._buf[start : start + length]))

    # push/pop are written as step generators; each ``yield`` marks a point
    # where the other side may run. The model checker interleaves them.
    def push_steps(self, desc: PacketDescriptor) -> Generator[None, None, bool]:
        head = self._head[0]
        yield
        tail = self._tail[0]
        yield
        if head - tail >= self.capacity:
            return False
        self._write_slot(head, desc)
        yield
        self._head[0] = head + 1
        return True

    def pop_steps(self) -> Generator[None, None, Optional[PacketDescriptor]]:
        tail = self._tail[0]
        yield
        head = self._head[0]
        yield
        if head == tail:
            return None
        desc = self._read_slot(tail)
        yield
        self._tail[0] = tail + 1
        return desc

    def push(self, desc: PacketDescriptor) -> bool:
        """Append ``desc``; ``False`` means the ring is full (would block)."""
        return _complete(self.push_steps(desc))

    def pop(self) -> Optional[PacketDescriptor]:
        """Remove the oldest descriptor, or return ``None`` if the ring is empty."""
        return _complete(self.pop_steps())

    def drain(self, limit: Optional[int] = None) -> list[PacketDescriptor]:
        out = []
        while limit is None or len(out) < limit:
            desc = self.pop()
            if desc is None:
                break
            out.append(desc)
        return out

    def __repr__(self) -> str:
        where = self.path or "in-process"
        return f"DescriptorRing({where}, capacity={self.capacity}, slot_size={self.slot_size}, used={len(self)})"
