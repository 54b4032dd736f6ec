"""Desk-scale time-aware datagram scheduling over a userspace overlay.

Applications hand datagrams with a transmission time to a scheduler daemon
through a shared-memory ring; the daemon releases them under an 802.1Qbv
gate control list and forwards them through a VXLAN learning switch.
"""

from .clock import ClockOverflow, RealClock, SimulatedClock
from .frames import FlowTuple, VxlanParams, decode_udp_frame, encode_udp_frame, vxlan_decap, vxlan_encap
from .gclfile import GclConfig, GclConfigError, load_gcl, parse_gcl
from .ring import DescriptorRing, PacketDescriptor
from .shim import SendStatus, TsnSocket, tsn_socket_from_env, tsn_socket_open
from .stats import RunRecord, compute_jitter, compute_percentiles
from .tas import GateControlList, GateSlot, PastTxtimePolicy, SchedulerConfig, TasScheduler, TxRecord
from .vswitch import VirtualSwitch

__version__ = "0.1.0"

__all__ = [
    "ClockOverflow",
    "DescriptorRing",
    "FlowTuple",
    "GateControlList",
    "GateSlot",
    "GclConfig",
    "GclConfigError",
    "PacketDescriptor",
    "PastTxtimePolicy",
    "RealClock",
    "RunRecord",
    "SchedulerConfig",
    "SendStatus",
    "SimulatedClock",
    "TasScheduler",
    "TsnSocket",
    "TxRecord",
    "VirtualSwitch",
    "VxlanParams",
    "compute_jitter",
    "compute_percentiles",
    "decode_udp_frame",
    "encode_udp_frame",
    "load_gcl",
    "parse_gcl",
    "tsn_socket_from_env",
    "tsn_socket_open",
    "vxlan_decap",
    "vxlan_encap",
]
