"""Packet primitives shared by every layer of the simulator.

Every datagram that crosses a simulated link is real bytes: a 20-byte IPv4
header followed by the transport payload.  Checksums are left zero; nothing
in the model depends on them.
"""

from __future__ import annotations

import enum
import struct
from collections import Counter
from dataclasses import dataclass, field
from ipaddress import IPv4Address

IPV4_HEADER_LEN = 20
TRANSPORT_HEADER_LEN = 8
INNER_HEADER_LEN = IPV4_HEADER_LEN + TRANSPORT_HEADER_LEN

PROTO_UDP = 17
PROTO_ESP = 50
PROTO_SCTP = 132

WG_PORT = 51000
GTPU_PORT = 2152
IKE_PORT = 500
NGAP_PORT = 38412
ECHO_PORT = 7
SINK_PORT = 5201

_IP = struct.Struct("!BBHHHBBH4s4s")
_L4 = struct.Struct("!HHHH")


def ip(addr) -> IPv4Address:
    return addr if isinstance(addr, IPv4Address) else IPv4Address(addr)


class Verdict(str, enum.Enum):
    """Outcome of handing one inbound message to a tunnel endpoint."""

    DELIVERED = "delivered"
    KEEPALIVE = "keepalive"
    HANDSHAKE = "handshake"
    AUTH_FAIL = "auth_fail"
    REPLAY = "replay"
    SOURCE_INVALID = "source_invalid"
    UNKNOWN_INDEX = "unknown_index"
    UNKNOWN_SPI = "unknown_spi"
    NO_ROUTE = "no_route"
    UNKNOWN_PEER = "unknown_peer"
    STALE = "stale_timestamp"
    MALFORMED = "malformed"

    @property
    def is_drop(self) -> bool:
        return self not in (Verdict.DELIVERED, Verdict.KEEPALIVE, Verdict.HANDSHAKE)


@dataclass
class CryptoCounters:
    bytes_encrypted: int = 0
    bytes_decrypted: int = 0
    handshake_messages: int = 0
    aead_ops: int = 0
    drops: Counter = field(default_factory=Counter)

    def drop(self, verdict: Verdict, n: int = 1) -> None:
        self.drops[verdict.value] += n

    def merge(self, other: "CryptoCounters") -> "CryptoCounters":
        out = CryptoCounters(
            self.bytes_encrypted + other.bytes_encrypted,
            self.bytes_decrypted + other.bytes_decrypted,
            self.handshake_messages + other.handshake_messages,
            self.aead_ops + other.aead_ops,
        )
        out.drops = self.drops + other.drops
        return out

    def as_dict(self) -> dict:
        d = {
            "bytes_encrypted": self.bytes_encrypted,
            "bytes_decrypted": self.bytes_decrypted,
            "handshake_messages": self.handshake_messages,
            "aead_ops": self.aead_ops,
        }
        for k in sorted(self.drops):
            d[f"drop_{k}"] = self.drops[k]
        return d


def ipv4_header(src, dst, proto: int, payload_len: int, ident: int = 0,
                frag_offset: int = 0, more_fragments: bool = False) -> bytes:
    flags_frag = (0x2000 if more_fragments else 0) | (frag_offset >> 3)
    return _IP.pack(0x45, 0, IPV4_HEADER_LEN + payload_len, ident & 0xFFFF,
                    flags_frag, 64, proto, 0, ip(src).packed, ip(dst).packed)


@dataclass(frozen=True)
class IpHeader:
    src: IPv4Address
    dst: IPv4Address
    proto: int
    total_length: int
    ident: int
    frag_offset: int
    more_fragments: bool


def parse_ipv4_header(data: bytes) -> IpHeader:
    if len(data) < IPV4_HEADER_LEN:
        raise ValueError("short IPv4 header")
    (_, _, total, ident, flags_frag, _, proto, _, src, dst) = _IP.unpack_from(data)
    return IpHeader(IPv4Address(src), IPv4Address(dst), proto, total, ident,
                    (flags_frag & 0x1FFF) << 3, bool(flags_frag & 0x2000))


def udp_datagram(src, sport: int, dst, dport: int, payload: bytes,
                 proto: int = PROTO_UDP) -> bytes:
    """IPv4 + 8-byte transport header + payload.

    SCTP is modelled with the same 8-byte header layout as UDP.
    """
    l4 = _L4.pack(sport, dport, TRANSPORT_HEADER_LEN + len(payload), 0)
    return ipv4_header(src, dst, proto, len(l4) + len(payload)) + l4 + payload


@dataclass(frozen=True)
class InnerPacket:
    """A user (or signalling) IP packet before any tunnel encapsulation."""

    src: IPv4Address
    dst: IPv4Address
    sport: int
    dport: int
    payload: bytes
    proto: int = PROTO_UDP

    def __post_init__(self):
        object.__setattr__(self, "src", ip(self.src))
        object.__setattr__(self, "dst", ip(self.dst))

    def encode(self) -> bytes:
        return udp_datagram(self.src, self.sport, self.dst, self.dport,
                            self.payload, self.proto)

    def __len__(self) -> int:
        return INNER_HEADER_LEN + len(self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "InnerPacket":
        hdr = parse_ipv4_header(data)
        if hdr.total_length != len(data) or len(data) < INNER_HEADER_LEN:
            raise ValueError("inner packet length mismatch")
        sport, dport, _, _ = _L4.unpack_from(data, IPV4_HEADER_LEN)
        return cls(hdr.src, hdr.dst, sport, dport, bytes(data[INNER_HEADER_LEN:]),
                   hdr.proto)
