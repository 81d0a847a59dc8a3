"""Authentication gateway in front of the AMF.

N2 signalling is only handed to the NGAP layer when it emerges from a
WireGuard tunnel whose peer key is on the gNB whitelist.  Everything else,
raw SCTP included, is dropped before any NGAP parsing and counted as
``pre_ngap_reject``.

Whitelist file format: one base64 public key per line, optionally followed by
``# name``.  Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Iterable, Optional, Union

from .core import (
    INNER_HEADER_LEN, NGAP_PORT, PROTO_SCTP, PROTO_UDP, WG_PORT, InnerPacket, Verdict,
    parse_ipv4_header,
)
from .crypto_tunnel import (
    HandshakeInit, StaticKeypair, TunnelEngine, TunnelTimers, UnknownInitiatorKey,
    StaleTimestamp, AuthFailure,
)
from .wire_codec import Endpoint, MalformedValue, PeerStanza, decode_key, encode_key

log = logging.getLogger(__name__)


class KeyNotFound(KeyError):
    pass


@dataclass(frozen=True)
class Whitelist:
    entries: frozenset
    version: int = 0

    def __contains__(self, key: bytes) -> bool:
        return key in self.entries


def parse_whitelist(text: str) -> list[tuple[bytes, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, name = line.partition("#")
        out.append((decode_key(key.strip(), lineno), name.strip()))
    seen = set()
    for key, _ in out:
        if key in seen:
            raise MalformedValue(f"duplicate whitelist key {encode_key(key)}")
        seen.add(key)
    return out


def serialize_whitelist(entries: Iterable[tuple[bytes, str]]) -> str:
    lines = []
    for key, name in entries:
        lines.append(f"{encode_key(key)}  # {name}" if name else encode_key(key))
    return "\n".join(lines) + "\n"


@dataclass
class Admission:
    accepted: bool
    reply: Optional[bytes] = None
    peer: Optional[bytes] = None


@dataclass
class Filtered:
    """What the gate did with one N2-bound datagram."""

    action: str  # "forward" | "drop" | "handshake" | "ignore"
    packet: Optional[InnerPacket] = None
    peer: Optional[bytes] = None
    via_tunnel: bool = False
    replies: list = field(default_factory=list)
    verdict: Optional[Verdict] = None


class N2Gate:
    """WireGuard front door for the AMF with a hot-reloadable whitelist.

    ``gnbs`` maps each authorised gNB public key to the peer stanza used for
    it (AllowedIPs = the gNB's tunnel address, endpoint = its N2 address).
    """

    def __init__(self, keypair: StaticKeypair, gnbs: Iterable[PeerStanza], rng,
                 enforce: bool = True, timers: TunnelTimers = TunnelTimers()):
        self.enforce = enforce
        self._stanzas = {s.public_key: s for s in gnbs}
        self.engine = TunnelEngine(keypair, self._stanzas.values(), rng, timers, name="n2gate")
        self.whitelist = Whitelist(frozenset(self._stanzas))
        self.pre_ngap_reject = 0
        self.forwarded = 0
        self.ignored = 0
        self.forward_log: list[tuple[bytes, int]] = []  # (peer key, whitelist version)

    def _reload(self) -> Whitelist:
        self.engine.reload_peers(self._stanzas.values())
        self.whitelist = Whitelist(frozenset(self._stanzas), self.whitelist.version + 1)
        return self.whitelist

    def revoke(self, public_key: bytes) -> Whitelist:
        if public_key not in self._stanzas:
            raise KeyNotFound(encode_key(public_key))
        del self._stanzas[public_key]
        log.info("revoked gNB key %s", encode_key(public_key))
        return self._reload()

    def add(self, stanza: PeerStanza) -> Whitelist:
        self._stanzas[stanza.public_key] = stanza
        return self._reload()

    def admit(self, init: Union[HandshakeInit, bytes], now: float) -> Admission:
        if isinstance(init, (bytes, bytearray)):
            try:
                init = HandshakeInit.from_bytes(bytes(init))
            except ValueError:
                self.ignored += 1
                return Admission(False)
        try:
            resp, keys = self.engine.respond_handshake(init, now)
        except (UnknownInitiatorKey, StaleTimestamp, AuthFailure):
            self.ignored += 1
            return Admission(False)
        peer = self.engine.peer_for_index(keys.local_index)
        return Admission(True, resp.to_bytes(), peer)

    def filter_n2(self, datagram: bytes, now: float) -> Filtered:
        hdr = parse_ipv4_header(datagram)
        if hdr.proto == PROTO_UDP and len(datagram) >= INNER_HEADER_LEN and \
                int.from_bytes(datagram[22:24], "big") == WG_PORT:
            src_port = int.from_bytes(datagram[20:22], "big")
            payload = datagram[INNER_HEADER_LEN:]
            if payload[:1] == b"\x01":
                adm = self.admit(payload, now)
                if not adm.accepted:
                    return Filtered("ignore")
                return Filtered("handshake", peer=adm.peer, replies=[adm.reply])
            res = self.engine.receive(payload, Endpoint(hdr.src, src_port), now)
            if res.verdict is Verdict.DELIVERED and res.packet.proto == PROTO_SCTP \
                    and res.packet.dport == NGAP_PORT:
                self.forwarded += 1
                self.forward_log.append((res.peer, self.whitelist.version))
                return Filtered("forward", res.packet, res.peer, True, verdict=res.verdict)
            if res.verdict is Verdict.KEEPALIVE:
                return Filtered("ignore", verdict=res.verdict)
            self.pre_ngap_reject += 1
            return Filtered("drop", peer=res.peer, verdict=res.verdict)
        if hdr.proto == PROTO_SCTP:
            if self.enforce:
                self.pre_ngap_reject += 1
                return Filtered("drop")
            self.forwarded += 1
            return Filtered("forward", InnerPacket.decode(datagram), None, False)
        self.pre_ngap_reject += 1
        return Filtered("drop")

    def tunnel_address(self, key: bytes) -> Optional[IPv4Address]:
        s = self._stanzas.get(key)
        return s.allowed_ips[0].address if s else None
