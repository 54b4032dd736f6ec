"""Userspace Ethernet II / IPv4 / UDP frame builder and parser, plus VXLAN.

Frames are plain ``bytes`` in wire order. Only what the datapath needs is
supported: no IP options, no fragmentation (DF is always set), no IPv6.

Layout of an encoded frame::

    0      6      12   14                 34        42
    | dst  | src  |type| IPv4 header (20) | UDP (8) | payload ...
"""

from __future__ import annotations

import functools
import ipaddress
import socket
import struct
import zlib
from dataclasses import dataclass, replace

ETH_HEADER_LEN = 14
IPV4_HEADER_LEN = 20
UDP_HEADER_LEN = 8
VXLAN_HEADER_LEN = 8
HEADERS_LEN = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN

MTU = 1500
MAX_FRAME_LEN = MTU + ETH_HEADER_LEN
MAX_PAYLOAD = MTU - IPV4_HEADER_LEN - UDP_HEADER_LEN  # 1472
VXLAN_OVERHEAD = HEADERS_LEN + VXLAN_HEADER_LEN  # 50
MAX_INNER_FRAME = MAX_FRAME_LEN - VXLAN_OVERHEAD

ETHERTYPE_IPV4 = 0x0800
IPPROTO_UDP = 17
IP_FLAG_DF = 0x4000
DEFAULT_TTL = 64

VXLAN_PORT = 4789
VXLAN_FLAG_VNI = 0x08
VNI_LIMIT = 1 << 24
EPHEMERAL_LOW = 49152
EPHEMERAL_SPAN = 65536 - EPHEMERAL_LOW

_ETH = struct.Struct("!6s6sH")
_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_UDP = struct.Struct("!HHHH")
_VXLAN = struct.Struct("!B3s3sB")


class CodecError(ValueError):
    """Base class for frame encoding/decoding failures."""


class PayloadTooLarge(CodecError):
    pass


class TruncatedFrame(CodecError):
    pass


class MalformedFrame(CodecError):
    pass


class BadIpChecksum(CodecError):
    pass


class BadUdpChecksum(CodecError):
    pass


class NotUdp(CodecError):
    pass


class InnerTooLarge(CodecError):
    pass


class NotVxlan(CodecError):
    pass


class BadVxlanFlags(CodecError):
    pass


def mac_to_bytes(mac: str) -> bytes:
    octets = bytes(int(part, 16) for part in mac.replace("-", ":").split(":"))
    if len(octets) != 6:
        raise ValueError(f"bad MAC address {mac!r}")
    return octets


def mac_from_bytes(octets: bytes) -> str:
    if len(octets) != 6:
        raise ValueError("MAC address needs 6 octets")
    return ":".join(f"{b:02x}" for b in octets)


def _normalize_mac(mac: str | bytes) -> str:
    if isinstance(mac, (bytes, bytearray)):
        return mac_from_bytes(bytes(mac))
    return mac_from_bytes(mac_to_bytes(mac))


def _normalize_ip(ip: str | bytes) -> str:
    return str(ipaddress.IPv4Address(bytes(ip) if isinstance(ip, bytearray) else ip))


@dataclass(frozen=True)
class FlowTuple:
    """Addressing of one UDP flow. MACs and IPs are normalized strings."""

    src_mac: str
    dst_mac: str
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int

    def __post_init__(self):
        object.__setattr__(self, "src_mac", _normalize_mac(self.src_mac))
        object.__setattr__(self, "dst_mac", _normalize_mac(self.dst_mac))
        object.__setattr__(self, "src_ip", _normalize_ip(self.src_ip))
        object.__setattr__(self, "dst_ip", _normalize_ip(self.dst_ip))
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"{name} {port} out of range")

    def packed(self) -> bytes:
        """Fixed 24-byte big-endian form, used for hashing and descriptor slots."""
        return _pack_flow(self)

    @classmethod
    def unpack(cls, raw: bytes) -> "FlowTuple":
        if len(raw) != 24:
            raise ValueError("packed flow tuple is 24 bytes")
        return _unpack_flow(bytes(raw))

    def reversed(self) -> "FlowTuple":
        return FlowTuple(self.dst_mac, self.src_mac, self.dst_ip, self.src_ip, self.dst_port, self.src_port)


# A run carries a handful of flows but packs/unpacks one per descriptor.
@functools.lru_cache(maxsize=256)
def _pack_flow(flow: FlowTuple) -> bytes:
    return (
        mac_to_bytes(flow.src_mac)
        + mac_to_bytes(flow.dst_mac)
        + socket.inet_aton(flow.src_ip)
        + socket.inet_aton(flow.dst_ip)
        + struct.pack("!HH", flow.src_port, flow.dst_port)
    )


@functools.lru_cache(maxsize=256)
def _unpack_flow(raw: bytes) -> FlowTuple:
    sport, dport = struct.unpack("!HH", raw[20:24])
    return FlowTuple(raw[0:6], raw[6:12], raw[12:16], raw[16:20], sport, dport)


@dataclass(frozen=True)
class VxlanParams:
    """VNI plus the outer (underlay) addressing of a tunnel.

    ``outer.dst_ip``/``outer.dst_port`` name the remote tunnel endpoint.
    """

    vni: int
    outer: FlowTuple

    def __post_init__(self):
        if not 0 <= self.vni < VNI_LIMIT:
            raise ValueError(f"VNI {self.vni:#x} does not fit in 24 bits")


def internet_checksum(data: bytes) -> int:
    """RFC 1071 checksum: complement of the ones'-complement sum of 16-bit words."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _udp_checksum(src_ip: bytes, dst_ip: bytes, udp_segment: bytes) -> int:
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_UDP, len(udp_segment))
    csum = internet_checksum(pseudo + udp_segment)
    # zero means "no checksum" on the wire
    return csum or 0xFFFF


def encode_udp_frame(
    flow: FlowTuple,
    payload: bytes,
    ttl: int = DEFAULT_TTL,
    *,
    ident: int = 0,
    udp_checksum: bool = True,
) -> bytes:
    """Build Ethernet + IPv4 + UDP around ``payload``.

    ``ident`` is written (mod 2**16) into the IPv4 identification field.
    """
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= ttl <= 0xFF:
        raise ValueError(f"ttl {ttl} out of range")
    packed = flow.packed()
    src_ip, dst_ip = packed[12:16], packed[16:20]
    udp_len = UDP_HEADER_LEN + len(payload)

    udp = _UDP.pack(flow.src_port, flow.dst_port, udp_len, 0) + payload
    if udp_checksum:
        csum = _udp_checksum(src_ip, dst_ip, udp)
        udp = udp[:6] + struct.pack("!H", csum) + udp[8:]

    ip = _IPV4.pack(0x45, 0, IPV4_HEADER_LEN + udp_len, ident & 0xFFFF, IP_FLAG_DF, ttl, IPPROTO_UDP, 0, src_ip, dst_ip)
    ip = ip[:10] + struct.pack("!H", internet_checksum(ip)) + ip[12:]

    eth = _ETH.pack(packed[6:12], packed[0:6], ETHERTYPE_IPV4)
    return eth + ip + udp


def decode_udp_frame(frame: bytes) -> tuple[FlowTuple, bytes]:
    """Parse a frame produced by :func:`encode_udp_frame` (or any equivalent)."""
    frame = bytes(frame)
    if len(frame) < HEADERS_LEN:
        raise TruncatedFrame(f"{len(frame)} bytes cannot hold Ethernet + IPv4 + UDP headers")
    dst_mac, src_mac, ethertype = _ETH.unpack_from(frame)
    if ethertype != ETHERTYPE_IPV4:
        raise NotUdp(f"EtherType {ethertype:#06x} is not IPv4")
    if len(frame) > MAX_FRAME_LEN:
        raise MalformedFrame(f"{len(frame)} bytes exceeds {MAX_FRAME_LEN}")

    ip = frame[ETH_HEADER_LEN : ETH_HEADER_LEN + IPV4_HEADER_LEN]
    ver_ihl, _, total_len, _, frag, _, proto, _, src_ip, dst_ip = _IPV4.unpack(ip)
    if ver_ihl != 0x45:
        raise MalformedFrame(f"unsupported version/IHL byte {ver_ihl:#04x}")
    if internet_checksum(ip) != 0:
        raise BadIpChecksum("IPv4 header checksum does not verify")
    if total_len != len(frame) - ETH_HEADER_LEN:
        if total_len > len(frame) - ETH_HEADER_LEN:
            raise TruncatedFrame(f"IPv4 total length {total_len} exceeds captured bytes")
        raise MalformedFrame(f"IPv4 total length {total_len} disagrees with frame length")
    if frag & 0x3FFF:
        raise MalformedFrame("fragmented datagrams are not supported")
    if proto != IPPROTO_UDP:
        raise NotUdp(f"IP protocol {proto} is not UDP")

    udp = frame[ETH_HEADER_LEN + IPV4_HEADER_LEN :]
    sport, dport, udp_len, csum = _UDP.unpack_from(udp)
    if udp_len != len(udp):
        raise MalformedFrame(f"UDP length {udp_len} disagrees with IPv4 payload {len(udp)}")
    if csum:
        pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_UDP, udp_len)
        if internet_checksum(pseudo + udp) != 0:
            raise BadUdpChecksum("UDP checksum does not verify")

    flow = _unpack_flow(src_mac + dst_mac + src_ip + dst_ip + udp[0:4])
    return flow, udp[UDP_HEADER_LEN:]


def vxlan_header(vni: int) -> bytes:
    if not 0 <= vni < VNI_LIMIT:
        raise ValueError(f"VNI {vni:#x} does not fit in 24 bits")
    return _VXLAN.pack(VXLAN_FLAG_VNI, b"\x00\x00\x00", vni.to_bytes(3, "big"), 0)


def split_vxlan_payload(data: bytes) -> tuple[int, bytes]:
    """Split a VXLAN UDP payload into (vni, inner frame)."""
    if len(data) < VXLAN_HEADER_LEN + ETH_HEADER_LEN:
        raise TruncatedFrame(f"{len(data)} bytes cannot hold VXLAN header and inner Ethernet header")
    flags, _, vni, _ = _VXLAN.unpack_from(data)
    if not flags & VXLAN_FLAG_VNI:
        raise BadVxlanFlags(f"VXLAN flags {flags:#04x} lack the VNI-valid bit")
    return int.from_bytes(vni, "big"), bytes(data[VXLAN_HEADER_LEN:])


def outer_source_port(inner: bytes) -> int:
    """Per-flow entropy port in 49152-65535 derived from the inner headers.

    For IPv4/UDP inner frames the hash covers the packed flow tuple (MACs,
    IPs, ports) read straight from the header bytes; anything else hashes
    its Ethernet header.
    """
    inner = bytes(inner)
    if len(inner) >= HEADERS_LEN and inner[12:14] == b"\x08\x00" and inner[14] == 0x45 and inner[23] == IPPROTO_UDP:
        key = inner[6:12] + inner[0:6] + inner[26:38]
    else:
        key = inner[:ETH_HEADER_LEN]
    return EPHEMERAL_LOW + zlib.crc32(key) % EPHEMERAL_SPAN


@functools.lru_cache(maxsize=1024)
def _with_source_port(flow: FlowTuple, port: int) -> FlowTuple:
    return replace(flow, src_port=port)


def vxlan_encap(inner: bytes, params: VxlanParams, *, ident: int = 0, ttl: int = DEFAULT_TTL) -> bytes:
    """Wrap ``inner`` in outer Ethernet/IPv4/UDP/VXLAN headers.

    The outer UDP source port is replaced by :func:`outer_source_port`; the
    outer UDP checksum is left zero, as tunnels customarily do over IPv4.
    """
    if len(inner) < ETH_HEADER_LEN:
        raise TruncatedFrame("inner frame shorter than an Ethernet header")
    if len(inner) > MAX_INNER_FRAME:
        raise InnerTooLarge(f"inner frame of {len(inner)} bytes exceeds {MAX_INNER_FRAME}")
    outer = _with_source_port(params.outer, outer_source_port(inner))
    return encode_udp_frame(outer, vxlan_header(params.vni) + bytes(inner), ttl, ident=ident, udp_checksum=False)


def vxlan_decap(outer: bytes, vxlan_port: int = VXLAN_PORT) -> tuple[VxlanParams, bytes]:
    flow, payload = decode_udp_frame(outer)
    if flow.dst_port != vxlan_port:
        raise NotVxlan(f"UDP destination port {flow.dst_port} is not the VXLAN port {vxlan_port}")
    vni, inner = split_vxlan_payload(payload)
    return VxlanParams(vni, flow), inner
