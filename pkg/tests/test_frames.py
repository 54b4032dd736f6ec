import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktsn.frames import (
    MAX_INNER_FRAME,
    MAX_PAYLOAD,
    BadIpChecksum,
    BadUdpChecksum,
    BadVxlanFlags,
    FlowTuple,
    InnerTooLarge,
    MalformedFrame,
    NotUdp,
    NotVxlan,
    PayloadTooLarge,
    TruncatedFrame,
    VxlanParams,
    decode_udp_frame,
    encode_udp_frame,
    internet_checksum,
    mac_from_bytes,
    mac_to_bytes,
    outer_source_port,
    vxlan_decap,
    vxlan_encap,
    vxlan_header,
)
from oracles import ref_checksum, ref_parse, ref_parse_vxlan
from strategies import flows, payloads

FLOW = FlowTuple("02:00:00:00:00:01", "02:00:00:00:00:02", "192.168.0.1", "192.168.0.199", 40000, 50000)
OUTER = FlowTuple("02:00:00:00:ff:01", "02:00:00:00:ff:02", "127.0.0.1", "127.0.0.1", 4789, 4789)

# 20-byte IPv4 header with the checksum field (bytes 10-11) zeroed
HEADER_VECTOR = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")


def test_checksum_vector():
    assert internet_checksum(HEADER_VECTOR) == 0xB861
    # independent hand-style computation agrees
    assert ref_checksum(HEADER_VECTOR) == 0xB861
    filled = HEADER_VECTOR[:10] + b"\xb8\x61" + HEADER_VECTOR[12:]
    assert internet_checksum(filled) == 0


def test_checksum_of_empty_input():
    assert internet_checksum(b"") == 0xFFFF


@given(st.binary(max_size=200))
def test_checksum_matches_reference(data):
    assert internet_checksum(data) == ref_checksum(data)


def test_header_lengths():
    assert len(encode_udp_frame(FLOW, b"")) == 42
    frame = encode_udp_frame(FLOW, bytes(range(64)))
    assert len(frame) == 106
    assert decode_udp_frame(frame) == (FLOW, bytes(range(64)))


def test_payload_limit():
    encode_udp_frame(FLOW, bytes(MAX_PAYLOAD))
    with pytest.raises(PayloadTooLarge):
        encode_udp_frame(FLOW, bytes(1473))


def test_hand_laid_out_fixture():
    """Every field at its byte offset, big-endian."""
    frame = encode_udp_frame(FLOW, b"\xaa\xbb", ident=0x1234, udp_checksum=False)
    expected = (
        bytes.fromhex("020000000002")  # dst mac
        + bytes.fromhex("020000000001")  # src mac
        + b"\x08\x00"
        + bytes.fromhex("45 00 001e 1234 4000 40 11")
        + frame[24:26]  # header checksum, verified separately
        + bytes([192, 168, 0, 1, 192, 168, 0, 199])
        + struct.pack("!HHHH", 40000, 50000, 10, 0)
        + b"\xaa\xbb"
    )
    assert frame == expected
    assert internet_checksum(frame[14:34]) == 0


def test_zero_udp_checksum_is_sent_as_ffff():
    # find a payload whose UDP checksum computes to zero, then check the wire value
    for n in range(70000):
        payload = n.to_bytes(3, "big")
        frame = encode_udp_frame(FLOW, payload)
        seg = frame[34:]
        pseudo = frame[26:34] + b"\x00\x11" + struct.pack("!H", len(seg))
        if internet_checksum(pseudo + seg[:6] + b"\x00\x00" + seg[8:]) == 0:
            assert seg[6:8] == b"\xff\xff"
            assert decode_udp_frame(frame)[1] == payload
            return
    pytest.skip("no zero-checksum payload in search range")


def test_ip_fields():
    ref = ref_parse(encode_udp_frame(FLOW, b"x" * 10, ttl=7, ident=70000))
    assert (ref.ip_version, ref.ihl, ref.protocol, ref.ttl) == (4, 5, 17, 7)
    assert ref.flags == 0b010 and ref.frag_offset == 0  # DF
    assert ref.ident == 70000 % 65536


@given(flows, payloads, st.integers(0, 255), st.integers(0, 2**20), st.booleans())
def test_round_trip_and_reference_parse(flow, payload, ttl, ident, csum):
    frame = encode_udp_frame(flow, payload, ttl, ident=ident, udp_checksum=csum)
    assert decode_udp_frame(frame) == (flow, payload)
    ref = ref_parse(frame)
    assert ref.payload == payload
    assert mac_from_bytes(ref.src_mac) == flow.src_mac
    assert (ref.src_port, ref.dst_port) == (flow.src_port, flow.dst_port)
    assert (ref.udp_checksum != 0) == csum


@given(flows, payloads, st.integers(0, 20 * 8 - 1))
def test_any_ip_header_bit_flip_is_detected(flow, payload, bit):
    frame = bytearray(encode_udp_frame(flow, payload))
    frame[14 + bit // 8] ^= 1 << (bit % 8)
    with pytest.raises((BadIpChecksum, MalformedFrame, TruncatedFrame, NotUdp)):
        decode_udp_frame(bytes(frame))


def test_ip_checksum_bit_flip():
    frame = bytearray(encode_udp_frame(FLOW, b"hello"))
    frame[24] ^= 0x01
    with pytest.raises(BadIpChecksum):
        decode_udp_frame(bytes(frame))


def test_payload_corruption_breaks_udp_checksum():
    frame = bytearray(encode_udp_frame(FLOW, b"hello"))
    frame[-1] ^= 0x40
    with pytest.raises(BadUdpChecksum):
        decode_udp_frame(bytes(frame))


def test_truncation_and_foreign_frames():
    with pytest.raises(TruncatedFrame):
        decode_udp_frame(bytes(20))
    frame = encode_udp_frame(FLOW, b"abcdef")
    with pytest.raises(TruncatedFrame):
        decode_udp_frame(frame[:-2])
    arp = frame[:12] + b"\x08\x06" + frame[14:]
    with pytest.raises(NotUdp):
        decode_udp_frame(arp)


def test_mac_helpers():
    assert mac_to_bytes("02:AB:00:00:00:01") == bytes.fromhex("02ab00000001")
    assert mac_from_bytes(bytes.fromhex("02ab00000001")) == "02:ab:00:00:00:01"
    with pytest.raises(ValueError):
        mac_to_bytes("02:ab")


def test_flow_packing():
    assert len(FLOW.packed()) == 24
    assert FlowTuple.unpack(FLOW.packed()) == FLOW
    assert FLOW.reversed().reversed() == FLOW
    with pytest.raises(ValueError):
        FlowTuple("02:00:00:00:00:01", "02:00:00:00:00:02", "1.2.3.4", "1.2.3.5", 70000, 1)


# -- VXLAN ---------------------------------------------------------------------


def test_vxlan_header_bytes():
    assert vxlan_header(42) == bytes([0x08, 0, 0, 0, 0, 0, 0x2A, 0])
    with pytest.raises(ValueError):
        vxlan_header(1 << 24)
    with pytest.raises(ValueError):
        VxlanParams(1 << 24, OUTER)


def test_encap_length_and_round_trip():
    inner = encode_udp_frame(FLOW, b"")
    assert len(inner) == 42
    outer = vxlan_encap(inner, VxlanParams(42, OUTER))
    assert len(outer) == 92
    params, got = vxlan_decap(outer)
    assert got == inner
    assert params.vni == 42
    hdr, vni, ref_inner = ref_parse_vxlan(outer)
    assert (vni, ref_inner) == (42, inner)
    assert hdr.dst_port == 4789 and hdr.udp_checksum == 0
    assert 49152 <= hdr.src_port <= 65535


def test_outer_source_port_is_per_flow():
    a = encode_udp_frame(FLOW, b"one")
    b = encode_udp_frame(FLOW, b"two, longer")
    assert outer_source_port(a) == outer_source_port(b)


def test_vxlan_flags_required():
    outer = bytearray(vxlan_encap(encode_udp_frame(FLOW, b"x"), VxlanParams(7, OUTER)))
    outer[42] = 0x00
    # re-encode so only the VXLAN flags are wrong, not the checksums
    flow, body = decode_udp_frame(bytes(outer))
    with pytest.raises(BadVxlanFlags):
        vxlan_decap(encode_udp_frame(flow, body, udp_checksum=False))


def test_wrong_port_is_not_vxlan():
    outer = vxlan_encap(encode_udp_frame(FLOW, b"x"), VxlanParams(7, OUTER))
    with pytest.raises(NotVxlan):
        vxlan_decap(outer, vxlan_port=8472)


def test_inner_size_limits():
    with pytest.raises(InnerTooLarge):
        vxlan_encap(bytes(MAX_INNER_FRAME + 1), VxlanParams(1, OUTER))
    with pytest.raises(TruncatedFrame):
        vxlan_encap(bytes(10), VxlanParams(1, OUTER))


@given(flows, st.binary(max_size=MAX_INNER_FRAME - 42), st.integers(0, (1 << 24) - 1), flows)
def test_encap_decap_identity(inner_flow, payload, vni, outer_flow):
    inner = encode_udp_frame(inner_flow, payload)
    outer = vxlan_encap(inner, VxlanParams(vni, outer_flow))
    params, got = vxlan_decap(outer, vxlan_port=outer_flow.dst_port)
    assert got == inner and params.vni == vni
    _, ref_vni, ref_inner = ref_parse_vxlan(outer)
    assert (ref_vni, ref_inner) == (vni, inner)
    assert ref_parse(ref_inner).payload == payload
