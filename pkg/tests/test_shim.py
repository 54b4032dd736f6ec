import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktsn.clock import NS_PER_MS, SimulatedClock
from ktsn.frames import PayloadTooLarge, VxlanParams, decode_udp_frame
from ktsn.ring import DescriptorRing, HeaderMismatch, RingAttachFailed
from ktsn.shim import ENV_CLASS, ENV_RING_PATH, SendStatus, TsnSocket, tsn_socket_from_env, tsn_socket_open
from ktsn.tas import GateControlList, GateSlot, RingSource, SchedulerConfig, TasScheduler
from ktsn.vswitch import BaselinePath, LoopbackHub
from oracles import ref_parse
from strategies import TEST_FLOW

GCL = GateControlList(NS_PER_MS, (GateSlot(0, NS_PER_MS, {0, 1}),))


@pytest.fixture
def daemon_ring(ring_path):
    ring = DescriptorRing.create(16, path=ring_path)
    yield ring
    ring.close()


def test_open_valid_ring(daemon_ring, ring_path):
    sock = tsn_socket_open(TEST_FLOW, 1, ring_path)
    assert sock.seq_counter == 0 and sock.traffic_class == 1
    sock.close()


def test_open_missing_ring(tmp_path):
    with pytest.raises(RingAttachFailed):
        tsn_socket_open(TEST_FLOW, 0, str(tmp_path / "absent"))


def test_open_wrong_magic(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE" + bytes(200 + 2 * 1536))
    with pytest.raises(HeaderMismatch):
        tsn_socket_open(TEST_FLOW, 0, str(bad))


def test_txtime_send_reaches_the_scheduler(daemon_ring, ring_path):
    sock = tsn_socket_open(TEST_FLOW, 0, ring_path)
    now = 5 * NS_PER_MS
    assert sock.send_txtime(bytes(64), now + NS_PER_MS) is SendStatus.SENT
    frames = []
    source = RingSource([daemon_ring])
    source.closed = True
    records = list(TasScheduler(SchedulerConfig(GCL)).run(SimulatedClock(now), frames.append, source))
    assert [(r.seq, r.release_time) for r in records] == [(0, now + NS_PER_MS)]
    assert decode_udp_frame(frames[0]) == (TEST_FLOW, bytes(64))


def test_payload_limit(daemon_ring, ring_path):
    sock = tsn_socket_open(TEST_FLOW, 0, ring_path)
    with pytest.raises(PayloadTooLarge):
        sock.send_txtime(bytes(1473), 1)
    assert sock.seq_counter == 0


def test_negative_txtime_and_bad_class(daemon_ring, ring_path):
    sock = tsn_socket_open(TEST_FLOW, 0, ring_path)
    with pytest.raises(ValueError):
        sock.send_txtime(b"", -1)
    with pytest.raises(ValueError):
        TsnSocket(TEST_FLOW, 300, None)


def test_stalled_daemon_gives_would_block(ring_path):
    DescriptorRing.create(2, path=ring_path).close()
    sock = tsn_socket_open(TEST_FLOW, 0, ring_path, max_spin_ns=50_000)
    assert [sock.send_txtime(b"x", 10) for _ in range(3)] == [SendStatus.SENT, SendStatus.SENT, SendStatus.WOULD_BLOCK]
    assert sock.would_block == 1
    # the blocked message still consumed its seq, so the gap is visible
    assert sock.seq_counter == 3
    sock.close()


def _baseline(hub):
    overlay = VxlanParams(42, TEST_FLOW)
    return BaselinePath(overlay, hub.endpoint((TEST_FLOW.src_ip, TEST_FLOW.src_port)))


def test_plain_send_bypasses_ring(daemon_ring, ring_path):
    hub = LoopbackHub()
    sink = hub.endpoint((TEST_FLOW.dst_ip, TEST_FLOW.dst_port))
    sock = TsnSocket(TEST_FLOW, 0, DescriptorRing.attach(ring_path), baseline=_baseline(hub))
    assert sock.send_plain(b"plain bytes") is SendStatus.SENT
    assert len(daemon_ring) == 0
    data, _ = sink.inbox.popleft()
    assert ref_parse(data[8:]).payload == b"plain bytes"


def test_plain_without_baseline_and_txtime_without_ring():
    with pytest.raises(RuntimeError):
        TsnSocket(TEST_FLOW, 0, None).send_plain(b"")
    with pytest.raises(RuntimeError):
        TsnSocket(TEST_FLOW, 0, None).send_txtime(b"", 5)


@given(st.lists(st.one_of(st.none(), st.integers(1, 10**9)), max_size=30))
def test_routing_rule_per_send(txtimes):
    """txtime present <=> ring path; absent <=> baseline path."""
    ring = DescriptorRing.create(64)
    hub = LoopbackHub()
    sink = hub.endpoint((TEST_FLOW.dst_ip, TEST_FLOW.dst_port))
    sock = TsnSocket(TEST_FLOW, 0, ring, baseline=_baseline(hub))
    for i, tx in enumerate(txtimes):
        assert sock.send(i.to_bytes(2, "big"), tx) is SendStatus.SENT
    via_ring = ring.drain()
    via_plain = [ref_parse(d[8:]).payload for d, _ in sink.inbox]
    assert [d.payload for d in via_ring] == [i.to_bytes(2, "big") for i, tx in enumerate(txtimes) if tx is not None]
    assert via_plain == [i.to_bytes(2, "big") for i, tx in enumerate(txtimes) if tx is None]
    # seqs seen by the daemon are gapless when nothing blocked
    assert [d.seq for d in via_ring] == list(range(len(via_ring)))
    assert sock.plain_sent == len(via_plain)


def test_from_env(daemon_ring, ring_path):
    sock = tsn_socket_from_env(TEST_FLOW, {ENV_RING_PATH: ring_path, ENV_CLASS: "1"})
    assert sock.traffic_class == 1
    with pytest.raises(RuntimeError):
        tsn_socket_from_env(TEST_FLOW, {})
