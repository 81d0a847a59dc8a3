"""5G RAN/core node behaviours on top of :mod:`wgran.netsim`.

Radio ciphering is treated as terminated at the gNB, so whatever IP packet a
UE hands to the radio is exactly what the gNB can read.  N3 carries those
packets inside a GTP-U style header keyed by TEID.  NGAP is a small binary
codec, not ASN.1.

Address plan used by :func:`build_deployment`:

====================  =================================
UE PDU pool           12.1.1.0/24, first UE gets .2
user tunnel subnet    10.10.11.0/24 (.1 server, .254 UPF)
N2 tunnel subnet      10.20.0.0/24 (.1 gate, gNBs .10+)
====================  =================================
"""

from __future__ import annotations

import itertools
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from pathlib import Path
from typing import Callable, Optional

from .core import (
    GTPU_PORT, IKE_PORT, INNER_HEADER_LEN, IPV4_HEADER_LEN, NGAP_PORT, PROTO_ESP, PROTO_SCTP,
    PROTO_UDP, ECHO_PORT, SINK_PORT, WG_PORT, CryptoCounters, InnerPacket, Verdict, ip,
    ipv4_header, parse_ipv4_header, udp_datagram,
)
from .crypto_tunnel import NoRoute, StaticKeypair, TunnelEngine, keygen, random_bytes
from .esp_tunnel import AuthMismatch, EspEndpoint, EspPeer
from .n2gate import N2Gate
from .netsim import Frame, Link, Node, Simulator, to_ns
from .wire_codec import (
    CidrBlock, Endpoint, InterfaceStanza, NodeSpec, PeerStanza, TopologyConfig, TopologyError,
    TunnelConfig, parse_topology, parse_wg_config, serialize_wg_config,
)

log = logging.getLogger(__name__)

MODES = ("baseline", "wireguard", "ipsec")

UE_POOL = CidrBlock(IPv4Address("12.1.1.0"), 24)
TUNNEL_NET = CidrBlock(IPv4Address("10.10.11.0"), 24)
SERVER_TUNNEL_ADDR = IPv4Address("10.10.11.1")
UPF_TUNNEL_ADDR = IPv4Address("10.10.11.254")
N2_GATE_ADDR = IPv4Address("10.20.0.1")
N2_GNB_BASE = IPv4Address("10.20.0.10")
KEEPALIVE = 25
TICK_INTERVAL = 1.0

GTP_HEADER = struct.Struct("!BBHI")
GTP_HEADER_LEN = GTP_HEADER.size


class N2Unavailable(RuntimeError):
    pass


class AddressPoolExhausted(RuntimeError):
    pass


class UnknownTeid(KeyError):
    pass


# ------------------------------------------------------------------ codecs

def gtp_encap(teid: int, datagram: bytes) -> bytes:
    return GTP_HEADER.pack(0x30, 0xFF, len(datagram), teid) + datagram


def gtp_decap(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < GTP_HEADER_LEN:
        raise ValueError("short GTP-U header")
    flags, mtype, length, teid = GTP_HEADER.unpack_from(payload)
    if flags != 0x30 or mtype != 0xFF or length != len(payload) - GTP_HEADER_LEN:
        raise ValueError("bad GTP-U header")
    return teid, payload[GTP_HEADER_LEN:]


NG_SETUP_REQUEST = 1
NG_SETUP_RESPONSE = 2
INITIAL_UE_MESSAGE = 3
REGISTRATION_ACCEPT = 4
NGAP_REJECT = 5
NGAP_KINDS = {
    NG_SETUP_REQUEST: "NGSetupRequest", NG_SETUP_RESPONSE: "NGSetupResponse",
    INITIAL_UE_MESSAGE: "InitialUEMessage", REGISTRATION_ACCEPT: "RegistrationAccept",
    NGAP_REJECT: "Reject",
}


@dataclass(frozen=True)
class NgapMessage:
    kind: int
    gnb_id: str
    txn: int
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        gid = self.gnb_id.encode()
        return (struct.pack("!BB", self.kind, len(gid)) + gid
                + struct.pack("!IH", self.txn, len(self.payload)) + self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "NgapMessage":
        try:
            kind, glen = struct.unpack_from("!BB", data)
            gid = data[2:2 + glen].decode()
            txn, plen = struct.unpack_from("!IH", data, 2 + glen)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed NGAP: {exc}") from None
        body = data[8 + glen:]
        if kind not in NGAP_KINDS or len(body) != plen:
            raise ValueError("malformed NGAP")
        return cls(kind, gid, txn, bytes(body))

    def reply(self, kind: int, payload: bytes = b"") -> "NgapMessage":
        return NgapMessage(kind, self.gnb_id, self.txn, payload)

    @property
    def name(self) -> str:
        return NGAP_KINDS[self.kind]


@dataclass
class UeSession:
    ue_id: str
    address: IPv4Address
    teid: int
    gnb_id: str
    gnb_address: IPv4Address
    state: str = "registered"

    def encode(self) -> bytes:
        return f"{self.ue_id}|{self.address}|{self.teid}|{self.gnb_id}|{self.gnb_address}".encode()

    @classmethod
    def decode(cls, data: bytes) -> "UeSession":
        ue, addr, teid, gnb, gaddr = data.decode().split("|")
        return cls(ue, IPv4Address(addr), int(teid), gnb, IPv4Address(gaddr))


@dataclass(frozen=True)
class InspectionRecord:
    time: int
    gnb: str
    direction: str
    ue: str
    data: bytes


class AddressPool:
    """Lowest-free allocation from a /24; .1 is reserved."""

    def __init__(self, block: CidrBlock = UE_POOL):
        net = int(block.network)
        self._free = [IPv4Address(net + i) for i in range(2, 2 ** (32 - block.prefix_len) - 1)]
        self.assigned: dict[str, IPv4Address] = {}

    def allocate(self, owner: str) -> IPv4Address:
        if owner in self.assigned:
            return self.assigned[owner]
        if not self._free:
            raise AddressPoolExhausted("UE address pool exhausted")
        addr = min(self._free)
        self._free.remove(addr)
        self.assigned[owner] = addr
        return addr

    def release(self, owner: str) -> None:
        addr = self.assigned.pop(owner, None)
        if addr is not None:
            self._free.append(addr)


# ----------------------------------------------------------- processing

@dataclass
class ProcessingModel:
    """Per-packet crypto latency, charged once per encrypt and once per decrypt.

    ``rekey_pause`` > 0 holds every crypto operation that falls inside the
    first ``rekey_pause`` seconds of each ``rekey_interval``.
    """

    wg_crypto_delay: float = 0.558e-3
    esp_crypto_delay: float = 0.7225e-3
    handshake_delay: float = 0.0
    rekey_pause: float = 0.0
    rekey_interval: float = 120.0

    def crypto_delay(self, kind: str, now: float) -> float:
        d = {"wireguard": self.wg_crypto_delay, "ipsec": self.esp_crypto_delay}.get(kind, 0.0)
        if self.rekey_pause > 0:
            phase = now % self.rekey_interval
            if phase < self.rekey_pause:
                d += self.rekey_pause - phase
        return d


class TunnelPort:
    """Binds a WireGuard engine or ESP endpoint to a node."""

    def __init__(self, node: "RanNode", impl, kind: str, model: ProcessingModel):
        if kind not in ("wireguard", "ipsec"):
            raise ValueError(kind)
        self.node = node
        self.impl = impl
        self.kind = kind
        self.model = model
        self.learned: dict[bytes, object] = {}
        self.ike_failures = 0
        self.unreachable = 0

    @property
    def counters(self) -> CryptoCounters:
        return self.impl.counters

    def routes(self, dst) -> bool:
        return self.impl.routes.lookup(dst) is not None

    def claims(self, data: bytes) -> bool:
        proto = data[9]
        if proto == PROTO_UDP and len(data) >= INNER_HEADER_LEN:
            dport = int.from_bytes(data[22:24], "big")
            return dport == (WG_PORT if self.kind == "wireguard" else IKE_PORT)
        return proto == PROTO_ESP and self.kind == "ipsec"

    def send_inner(self, inner: InnerPacket) -> bool:
        try:
            txs = self.impl.encrypt_outbound(inner, self.node.sim.t)
        except NoRoute:
            self.node.no_route += 1
            return False
        self.emit(txs)
        return True

    def emit(self, txs) -> None:
        sim = self.node.sim
        for tx in txs:
            if tx.kind == "data":
                delay = self.model.crypto_delay(self.kind, sim.t)
            else:
                delay = self.model.handshake_delay
            dg = self._wrap(tx)
            if dg is not None:
                self.node.send(dg, at=sim.now + to_ns(delay))

    def _wrap(self, tx) -> Optional[bytes]:
        src = self.node.outer_address
        if self.kind == "wireguard":
            ep = tx.endpoint or self.learned.get(tx.peer)
            if ep is None:
                self.unreachable += 1
                return None
            return udp_datagram(src, WG_PORT, ep.host, ep.port, tx.message)
        if tx.kind == "ike":
            return udp_datagram(src, IKE_PORT, tx.endpoint, IKE_PORT, tx.message)
        return ipv4_header(src, tx.endpoint, PROTO_ESP, len(tx.message)) + tx.message

    def on_datagram(self, data: bytes) -> None:
        node = self.node
        hdr = parse_ipv4_header(data)
        now = node.sim.t
        if self.kind == "wireguard":
            ep = Endpoint(hdr.src, int.from_bytes(data[20:22], "big"))
            res = self.impl.receive(data[INNER_HEADER_LEN:], ep, now)
            if res.peer is not None and not res.verdict.is_drop:
                self.learned[res.peer] = ep
        elif hdr.proto == PROTO_UDP:
            try:
                res = self.impl.receive(data[INNER_HEADER_LEN:], hdr.src, now, ike=True)
            except AuthMismatch as exc:
                log.warning("%s: %s", node.id, exc)
                self.ike_failures += 1
                return
        else:
            res = self.impl.receive(data[IPV4_HEADER_LEN:], hdr.src, now)
        node.verdicts[res.verdict.value] += 1
        if res.replies:
            self.emit(res.replies)
        if res.packet is not None:
            at = node.sim.now + to_ns(self.model.crypto_delay(self.kind, now))
            node.sim.schedule(at, node.deliver_inner, res.packet)

    def tick(self) -> None:
        self.emit(self.impl.tick(self.node.sim.t))
        self.node.sim.call_in(TICK_INTERVAL, self.tick)


# ----------------------------------------------------------------- nodes

Service = Callable[["RanNode", InnerPacket], None]


class RanNode(Node):
    role = "node"
    tunnel_all = True

    def __init__(self, spec: NodeSpec):
        super().__init__(spec.id, [spec.address] if spec.address else [])
        self.spec = spec
        self.tunnel: Optional[TunnelPort] = None
        self.inner_addresses: set[IPv4Address] = set()
        self.services: dict[int, Service] = {}
        self.verdicts: Counter = Counter()
        self.no_route = 0
        self.not_local = 0
        self.malformed = 0
        self.unhandled = 0

    @property
    def outer_address(self) -> IPv4Address:
        return self.addresses[0]

    def is_local(self, addr: IPv4Address) -> bool:
        return addr in self.inner_addresses or addr in self.addresses

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        if self.tunnel is not None and self.tunnel.claims(data):
            self.tunnel.on_datagram(data)
            return
        try:
            inner = InnerPacket.decode(data)
        except ValueError:
            self.malformed += 1
            return
        self.deliver_inner(inner)

    def deliver_inner(self, inner: InnerPacket) -> None:
        if self.is_local(inner.dst):
            handler = self.services.get(inner.dport)
            if handler is None:
                self.unhandled += 1
            else:
                handler(self, inner)
        else:
            self.route_inner(inner)

    def route_inner(self, inner: InnerPacket) -> None:
        self.not_local += 1

    def send_inner(self, inner: InnerPacket) -> bool:
        if self.tunnel is not None and (self.tunnel_all or self.tunnel.routes(inner.dst)):
            return self.tunnel.send_inner(inner)
        self.send(inner.encode())
        return True


class ServerNode(RanNode):
    role = "server"


class UeNode(RanNode):
    role = "ue"

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.session: Optional[UeSession] = None
        self.state = "idle"
        self.serving: Optional[str] = None
        self.reject_reason: Optional[str] = None

    def send(self, data: bytes, at: Optional[int] = None) -> None:
        if at is not None and at > self.sim.now:
            self.sim.schedule(at, self.send, data)
            return
        link = self.links.get(self.serving)
        if link is None:
            self.sim.unroutable += 1
            return
        link.transmit(data, self.id)

    def forward(self, data: bytes, link: Optional[Link]) -> None:
        self.not_local += 1

    def on_registered(self, session: UeSession) -> None:
        self.session = session
        self.state = "registered"
        if session.address not in self.addresses:
            self.add_address(session.address)

    def on_rejected(self, reason: str) -> None:
        self.state = "idle"
        self.reject_reason = reason


def gnb_forward(gnb: "GnbNode", direction: str, data: bytes, ue_id: Optional[str] = None):
    """One gNB relay step; returns (bytes to send, ue id, InspectionRecord or None).

    Uplink takes the UE's IP packet and returns a GTP-U datagram for the UPF.
    Downlink takes a GTP-U datagram and returns the UE's IP packet.
    """
    if direction == "ul":
        session = gnb.contexts.get(ue_id)
        if session is None:
            raise UnknownTeid(f"no context for {ue_id}")
        out = udp_datagram(gnb.outer_address, GTPU_PORT, gnb.upf_address, GTPU_PORT,
                           gtp_encap(session.teid, data))
        inner = data
    elif direction == "dl":
        teid, inner = gtp_decap(data[INNER_HEADER_LEN:])
        session = gnb.by_teid.get(teid)
        if session is None:
            raise UnknownTeid(teid)
        ue_id = session.ue_id
        out = inner
    else:
        raise ValueError(direction)
    record = None
    if gnb.trust != "trusted" and gnb.inspect:
        record = InspectionRecord(gnb.sim.now, gnb.id, direction, ue_id, bytes(inner))
    return out, ue_id, record


class GnbNode(RanNode):
    role = "gnb"

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.trust = spec.trust
        self.inspect = True
        self.records: list[InspectionRecord] = []
        self.contexts: dict[str, UeSession] = {}
        self.by_teid: dict[int, UeSession] = {}
        self.upf_address: Optional[IPv4Address] = None
        self.n2_local: Optional[IPv4Address] = None   # tunnel address, or None for raw SCTP
        self.n2_peer: Optional[IPv4Address] = None
        self.setup = "none"
        self.pending_ues: list[str] = []
        self._txn = itertools.count(1)
        self.unknown_teid = 0
        self.unattached = 0
        self.n2_rx_bytes = 0
        self.ngap_sent = 0
        self.ngap_received: Counter = Counter()
        self.services[NGAP_PORT] = GnbNode._on_ngap

    def receive(self, frame: Frame, link: Link) -> None:
        peer = link.other(self.id)
        if not isinstance(peer, UeNode):
            super().receive(frame, link)
            return
        data = frame.data
        if frame.frag is not None:
            data = self._reassemble(frame, link)
            if data is None:
                return
        try:
            out, _, rec = gnb_forward(self, "ul", data, peer.id)
        except UnknownTeid:
            self.unattached += 1
            return
        if rec is not None:
            self.records.append(rec)
        self.send(out)

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        if data[9] == PROTO_UDP and int.from_bytes(data[22:24], "big") == GTPU_PORT:
            try:
                out, ue_id, rec = gnb_forward(self, "dl", data)
            except (UnknownTeid, ValueError):
                self.unknown_teid += 1
                return
            if rec is not None:
                self.records.append(rec)
            link_to_ue = self.links.get(ue_id)
            if link_to_ue is not None:
                link_to_ue.transmit(out, self.id)
            return
        self.n2_rx_bytes += len(data)
        super().deliver(data, link)

    # -- N2

    def send_ngap(self, kind: int, payload: bytes = b"") -> NgapMessage:
        msg = NgapMessage(kind, self.id, next(self._txn), payload)
        self.ngap_sent += 1
        src = self.n2_local or self.outer_address
        self.send_inner(InnerPacket(src, self.n2_peer, NGAP_PORT, NGAP_PORT, msg.to_bytes(),
                                    PROTO_SCTP))
        return msg

    def start_attach(self, ue_id: str) -> None:
        ue = self.sim.nodes[ue_id]
        ue.serving = self.id
        ue.state = "registering"
        if self.setup == "done":
            self._initial_ue(ue_id)
            return
        self.pending_ues.append(ue_id)
        if self.setup == "none":
            self.setup = "pending"
            self.send_ngap(NG_SETUP_REQUEST)

    def _initial_ue(self, ue_id: str) -> None:
        self.send_ngap(INITIAL_UE_MESSAGE, f"{ue_id}|{self.outer_address}".encode())

    def _on_ngap(self, inner: InnerPacket) -> None:
        try:
            msg = NgapMessage.from_bytes(inner.payload)
        except ValueError:
            self.malformed += 1
            return
        if msg.gnb_id != self.id:
            self.malformed += 1
            return
        self.ngap_received[msg.name] += 1
        if msg.kind == NG_SETUP_RESPONSE:
            self.setup = "done"
            pending, self.pending_ues = self.pending_ues, []
            for ue_id in pending:
                self._initial_ue(ue_id)
        elif msg.kind == REGISTRATION_ACCEPT:
            session = UeSession.decode(msg.payload)
            self.contexts[session.ue_id] = session
            self.by_teid[session.teid] = session
            ue = self.sim.nodes.get(session.ue_id)
            if isinstance(ue, UeNode):
                ue.on_registered(session)
        elif msg.kind == NGAP_REJECT:
            reason, _, ue_id = msg.payload.decode().partition("|")
            ue = self.sim.nodes.get(ue_id)
            if isinstance(ue, UeNode):
                ue.on_rejected(reason)


class UpfNode(RanNode):
    role = "upf"
    tunnel_all = False

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.add_address(UE_POOL.address, UE_POOL.prefix_len)
        self.by_teid: dict[int, UeSession] = {}
        self.by_address: dict[IPv4Address, UeSession] = {}
        self.unknown_teid = 0
        self.no_session = 0

    def install(self, session: UeSession) -> None:
        old = self.by_address.get(session.address)
        if old is not None:
            self.by_teid.pop(old.teid, None)
        self.by_teid[session.teid] = session
        self.by_address[session.address] = session

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        if data[9] == PROTO_UDP and int.from_bytes(data[22:24], "big") == GTPU_PORT:
            self.upf_route(data)
            return
        super().deliver(data, link)

    def upf_route(self, data: bytes) -> None:
        try:
            teid, inner = gtp_decap(data[INNER_HEADER_LEN:])
        except ValueError:
            self.malformed += 1
            return
        if teid not in self.by_teid:
            self.unknown_teid += 1
            return
        if self.owns(IPv4Address(inner[16:20])):
            RanNode.deliver(self, inner, None)
        else:
            self.send(inner)

    def route_inner(self, inner: InnerPacket) -> None:
        self.send(inner.encode())

    def send(self, data: bytes, at: Optional[int] = None) -> None:
        if at is not None and at > self.sim.now:
            self.sim.schedule(at, self.send, data)
            return
        dst = IPv4Address(data[16:20])
        if UE_POOL.contains(dst):
            session = self.by_address.get(dst)
            if session is None:
                self.no_session += 1
                return
            Node.send(self, udp_datagram(self.outer_address, GTPU_PORT, session.gnb_address,
                                         GTPU_PORT, gtp_encap(session.teid, data)))
            return
        if self.tunnel is not None and not self.is_local(dst) and self.tunnel.routes(dst):
            try:
                inner = InnerPacket.decode(data)
            except ValueError:
                self.malformed += 1
                return
            self.tunnel.send_inner(inner)
            return
        Node.send(self, data)


class _GateHost(RanNode):
    """Node that terminates gNB N2 tunnels through an :class:`N2Gate`."""

    gate: Optional[N2Gate] = None
    n2port: Optional[TunnelPort] = None

    def install_gate(self, gate: N2Gate, model: ProcessingModel) -> None:
        self.gate = gate
        self.n2port = TunnelPort(self, gate.engine, "wireguard", model)
        self.inner_addresses.add(N2_GATE_ADDR)

    def _gate_input(self, data: bytes):
        hdr = parse_ipv4_header(data)
        f = self.gate.filter_n2(data, self.sim.t)
        for reply in f.replies:
            sport = int.from_bytes(data[20:22], "big")
            self.send(udp_datagram(self.outer_address, WG_PORT, hdr.src, sport, reply))
        if f.action == "handshake" and f.peer is not None:
            self.n2port.learned[f.peer] = Endpoint(hdr.src, int.from_bytes(data[20:22], "big"))
        return hdr, f


class AmfNode(_GateHost):
    role = "amf"

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.pool = AddressPool()
        self._teids = itertools.count(0x1001)
        self.upf: Optional[UpfNode] = None
        self.enforce = False
        self.relays: set[IPv4Address] = set()
        self.setup_gnbs: set[tuple[str, str]] = set()
        self.sessions: dict[str, UeSession] = {}
        self.pre_ngap_reject = 0
        self.processed = 0
        self.processed_by_src: Counter = Counter()
        self.nas_by_src: Counter = Counter()
        self.ngap_log: list[tuple[int, str, str, str]] = []  # (ns, source, kind, gnb id)

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        if self.gate is not None:
            hdr, f = self._gate_input(data)
            if f.action == "forward":
                self._ngap(f.packet, f.via_tunnel, hdr.src)
            return
        if data[9] != PROTO_SCTP:
            super().deliver(data, link)
            return
        try:
            inner = InnerPacket.decode(data)
        except ValueError:
            self.malformed += 1
            return
        self._ngap(inner, inner.src in self.relays, inner.src)

    def _ngap(self, inner: InnerPacket, via_tunnel: bool, source: IPv4Address) -> None:
        reply = amf_handle_ngap(self, inner.payload, via_tunnel, str(source))
        if reply is None:
            return
        out = InnerPacket(inner.dst, inner.src, NGAP_PORT, NGAP_PORT, reply.to_bytes(),
                          PROTO_SCTP)
        if self.gate is not None and via_tunnel:
            self.n2port.send_inner(out)
        else:
            self.send(out.encode())

    def allocate(self, ue_id: str, gnb_id: str, gnb_address: IPv4Address) -> UeSession:
        addr = self.pool.allocate(ue_id)
        session = UeSession(ue_id, addr, next(self._teids), gnb_id, gnb_address)
        self.sessions[ue_id] = session
        if self.upf is not None:
            self.upf.install(session)
        return session


def amf_handle_ngap(amf: AmfNode, msg, arrived_via_tunnel: bool,
                    source: str = "") -> Optional[NgapMessage]:
    """NGAP state machine; returns the reply to send, or None for a drop."""
    if amf.enforce and not arrived_via_tunnel:
        amf.pre_ngap_reject += 1
        return None
    if not isinstance(msg, NgapMessage):
        try:
            msg = NgapMessage.from_bytes(msg)
        except ValueError:
            amf.malformed += 1
            return None
    amf.processed += 1
    amf.processed_by_src[source] += 1
    amf.ngap_log.append((amf.sim.now if amf.sim else 0, source, msg.name, msg.gnb_id))
    if msg.kind == NG_SETUP_REQUEST:
        amf.setup_gnbs.add((source, msg.gnb_id))
        return msg.reply(NG_SETUP_RESPONSE)
    if msg.kind == INITIAL_UE_MESSAGE:
        try:
            ue_id, gnb_addr = msg.payload.decode().split("|")
            gnb_addr = IPv4Address(gnb_addr)
        except ValueError:
            amf.malformed += 1
            return None
        if (source, msg.gnb_id) not in amf.setup_gnbs:
            return msg.reply(NGAP_REJECT, f"no-setup|{ue_id}".encode())
        amf.nas_by_src[source] += 1
        try:
            session = amf.allocate(ue_id, msg.gnb_id, gnb_addr)
        except AddressPoolExhausted:
            return msg.reply(NGAP_REJECT, f"pool-exhausted|{ue_id}".encode())
        return msg.reply(REGISTRATION_ACCEPT, session.encode())
    return None


class GatewayNode(_GateHost):
    """Stand-alone N2 gate that relays authenticated NGAP to the AMF."""

    role = "gateway"

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.amf_address: Optional[IPv4Address] = None
        self.gnb_tunnels: dict[str, IPv4Address] = {}
        self.relayed = 0

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        if self.gate is None:
            super().deliver(data, link)
            return
        if data[9] == PROTO_SCTP and IPv4Address(data[12:16]) == self.amf_address:
            inner = InnerPacket.decode(data)
            try:
                msg = NgapMessage.from_bytes(inner.payload)
            except ValueError:
                self.malformed += 1
                return
            target = self.gnb_tunnels.get(msg.gnb_id)
            if target is not None:
                self.n2port.send_inner(InnerPacket(N2_GATE_ADDR, target, NGAP_PORT, NGAP_PORT,
                                                   inner.payload, PROTO_SCTP))
            return
        _, f = self._gate_input(data)
        if f.action != "forward":
            return
        try:
            msg = NgapMessage.from_bytes(f.packet.payload)
        except ValueError:
            self.malformed += 1
            return
        self.gnb_tunnels[msg.gnb_id] = f.packet.src
        self.relayed += 1
        self.send(udp_datagram(self.outer_address, NGAP_PORT, self.amf_address, NGAP_PORT,
                               f.packet.payload, PROTO_SCTP))

    def forward(self, data: bytes, link: Optional[Link]) -> None:
        if self.gate is not None and data[9] == PROTO_SCTP:
            self.gate.pre_ngap_reject += 1
            return
        super().forward(data, link)


# ---------------------------------------------------------------- services

def echo_service(node: RanNode, inner: InnerPacket) -> None:
    node.send_inner(InnerPacket(inner.dst, inner.src, inner.dport, inner.sport, inner.payload))


class Sink:
    """Counts (and optionally keeps) everything arriving on a port."""

    def __init__(self, keep: bool = False, track: bool = False):
        self.keep = keep
        self.track = track
        self.arrivals: list[tuple[int, int]] = []  # (sequence number, arrival ns)
        self.count = 0
        self.bytes = 0
        self.first_ns: Optional[int] = None
        self.last_ns: Optional[int] = None
        self.payloads: list[bytes] = []
        self.sources: Counter = Counter()

    def __call__(self, node: RanNode, inner: InnerPacket) -> None:
        now = node.sim.now
        self.count += 1
        self.bytes += len(inner.payload)
        self.sources[str(inner.src)] += 1
        if self.first_ns is None or now < self.first_ns:
            self.first_ns = now
        if self.last_ns is None or now > self.last_ns:
            self.last_ns = now
        if self.keep:
            self.payloads.append(inner.payload)
        if self.track and len(inner.payload) >= 8:
            self.arrivals.append((struct.unpack_from("!Q", inner.payload)[0], now))

    def reset(self) -> None:
        self.__init__(self.keep, self.track)


class PingClient:
    """ICMP-echo stand-in: sequence-numbered UDP probes to an echo port."""

    def __init__(self, node: RanNode, src, dst, size: int = 56, port: int = 40000):
        self.node, self.src, self.dst = node, ip(src), ip(dst)
        self.size = max(size, 8)
        self.port = port
        self.sent: dict[int, int] = {}
        self.rtts: dict[int, int] = {}
        node.services[port] = self._on_reply

    def ping(self, seq: int) -> None:
        payload = struct.pack("!Q", seq) + bytes(self.size - 8)
        self.sent[seq] = self.node.sim.now
        self.node.send_inner(InnerPacket(self.src, self.dst, self.port, ECHO_PORT, payload))

    def schedule(self, count: int, interval: float, start: float, first_seq: int = 0) -> None:
        for i in range(count):
            self.node.sim.schedule(to_ns(start + i * interval), self.ping, first_seq + i)

    def _on_reply(self, node: RanNode, inner: InnerPacket) -> None:
        seq = struct.unpack_from("!Q", inner.payload)[0]
        if seq in self.sent and seq not in self.rtts:
            self.rtts[seq] = node.sim.now - self.sent[seq]


class BulkSender:
    """Paced constant-size flow; payload starts with an 8-byte sequence number."""

    def __init__(self, node: RanNode, src, dst, payload_size: int, count: int,
                 interval: float, dport: int = SINK_PORT, sport: int = 40001,
                 body: Optional[Callable[[int], bytes]] = None):
        self.node, self.src, self.dst = node, ip(src), ip(dst)
        self.size = max(payload_size, 8)
        self.count = count
        self.interval_ns = max(1, to_ns(interval))
        self.dport, self.sport = dport, sport
        self.body = body
        self._filler = bytes((i * 37 + 11) & 0xFF for i in range(self.size))
        self.sent = 0

    def payload(self, seq: int) -> bytes:
        if self.body is not None:
            return self.body(seq)
        return struct.pack("!Q", seq) + self._filler[8:]

    def start(self, at: float) -> None:
        self.node.sim.schedule(to_ns(at), self._next)

    def _next(self) -> None:
        if self.sent >= self.count:
            return
        self.node.send_inner(InnerPacket(self.src, self.dst, self.sport, self.dport,
                                         self.payload(self.sent)))
        self.sent += 1
        if self.sent < self.count:
            self.node.sim.schedule(self.node.sim.now + self.interval_ns, self._next)


# -------------------------------------------------------------- deployment

DEFAULT_TOPOLOGY = """\
# Factory private 5G: one UE behind an untrusted gNB, a trusted gNB,
# a rogue gNB with its own victim UE, the core, a partner server on N6
# and an internal factory host.
[Node]
Id = ue1
Role = ue

[Node]
Id = ue2
Role = ue

[Node]
Id = gnb1
Role = gnb
Trust = untrusted
Address = 192.168.70.150

[Node]
Id = gnb2
Role = gnb
Trust = trusted
Address = 192.168.70.151

[Node]
Id = rogue
Role = gnb
Trust = rogue
Address = 192.168.70.199

[Node]
Id = upf
Role = upf
Address = 192.168.70.134

[Node]
Id = amf
Role = amf
Address = 192.168.70.132

[Node]
Id = server
Role = server
Trust = untrusted
Address = 10.1.1.3

[Node]
Id = factory
Role = server
Address = 192.168.70.5

[Link]
Name = radio1
A = ue1
B = gnb1
RateAB = 60M
RateBA = 600M
Delay = 3.5ms
Jitter = 0.3ms
Mtu = 1440

[Link]
Name = radio2
A = ue2
B = rogue
RateAB = 60M
RateBA = 600M
Delay = 3.5ms
Jitter = 0.3ms
Mtu = 1440

[Link]
Name = n3-gnb1
A = gnb1
B = upf
Delay = 0.2ms

[Link]
Name = n3-gnb2
A = gnb2
B = upf
Delay = 0.2ms

[Link]
Name = n2-gnb1
A = gnb1
B = amf
Delay = 0.2ms

[Link]
Name = n2-gnb2
A = gnb2
B = amf
Delay = 0.2ms

[Link]
Name = n2-rogue
A = rogue
B = amf
Delay = 0.2ms

[Link]
Name = n6
A = upf
B = server
Delay = 0.205ms

[Link]
Name = n6-factory
A = upf
B = factory
Delay = 0.05ms
"""


def default_topology() -> TopologyConfig:
    return parse_topology(DEFAULT_TOPOLOGY)


_NODE_CLASSES = {"ue": UeNode, "gnb": GnbNode, "upf": UpfNode, "amf": AmfNode,
                 "server": ServerNode, "gateway": GatewayNode}


@dataclass
class Deployment:
    sim: Simulator
    topology: TopologyConfig
    mode: str
    scenario: int
    n2gate: bool
    model: ProcessingModel
    nodes: dict
    n2_keys: dict = field(default_factory=dict)
    data_keys: dict = field(default_factory=dict)
    tunnel_configs: dict = field(default_factory=dict)
    gate: Optional[N2Gate] = None

    def _role(self, role: str) -> list:
        return [n for n in self.nodes.values() if n.role == role]

    @property
    def ues(self) -> list[UeNode]:
        return self._role("ue")

    @property
    def gnbs(self) -> list[GnbNode]:
        return self._role("gnb")

    @property
    def upf(self) -> UpfNode:
        return self._role("upf")[0]

    @property
    def amf(self) -> AmfNode:
        return self._role("amf")[0]

    @property
    def server(self) -> ServerNode:
        """The application server (first server node in the topology)."""
        return self._role("server")[0]

    @property
    def internal_hosts(self) -> list[ServerNode]:
        return self._role("server")[1:]

    @property
    def gate_host(self) -> _GateHost:
        gws = self._role("gateway")
        return gws[0] if gws else self.amf

    @property
    def hub(self) -> RanNode:
        """Far tunnel end for UEs: the server (scenario 1) or the UPF (scenario 2)."""
        return self.server if self.scenario == 1 else self.upf

    def node(self, node_id: str) -> RanNode:
        return self.nodes[node_id]

    def app_address(self, node: RanNode) -> IPv4Address:
        if isinstance(node, UeNode) and node.inner_addresses:
            return min(node.inner_addresses)
        if node is self.server and self.scenario == 1 and node.inner_addresses:
            return min(node.inner_addresses)
        return node.outer_address

    def run_for(self, dt: float):
        return self.sim.run_until(self.sim.t + dt)

    def tunnel_ports(self) -> list[TunnelPort]:
        return [n.tunnel for n in self.nodes.values()
                if n.tunnel is not None and n.role in ("ue", "server", "upf")]

    def crypto_counters(self) -> CryptoCounters:
        total = CryptoCounters()
        for port in self.tunnel_ports():
            total = total.merge(port.counters)
        return total

    def records(self) -> list[InspectionRecord]:
        return [r for g in self.gnbs for r in g.records]

    def attach(self, ue_id: str, gnb_id: Optional[str] = None, timeout: float = 2.0) -> UeSession:
        ue = self.nodes[ue_id]
        if gnb_id is None:
            gnb_id = next(i for i in ue.links if self.nodes[i].role == "gnb")
        return ue_attach(ue, self.nodes[gnb_id], self.amf, timeout)


def ue_attach(ue: UeNode, gnb: GnbNode, amf: AmfNode, timeout: float = 2.0) -> UeSession:
    """Run the simulator until ``ue`` registers through ``gnb`` (or fails)."""
    sim = ue.sim
    gnb.start_attach(ue.id)
    deadline = sim.t + timeout
    while sim.t < deadline and ue.state == "registering":
        sim.run_until(min(deadline, sim.t + 0.005))
    if ue.state == "registered":
        return ue.session
    if ue.reject_reason == "pool-exhausted":
        raise AddressPoolExhausted(f"{ue.id}: UE address pool exhausted")
    ue.state = "idle"
    raise N2Unavailable(f"{ue.id}: no registration via {gnb.id}"
                        + (f" ({ue.reject_reason})" if ue.reject_reason else ""))


def _serving_gnb(topo: TopologyConfig, ue_id: str) -> Optional[str]:
    for link in topo.links:
        for a, b in ((link.a, link.b), (link.b, link.a)):
            if a == ue_id and topo.node(b).role == "gnb":
                return b
    return None


def _config_roundtrip(cfg: TunnelConfig) -> TunnelConfig:
    return parse_wg_config(serialize_wg_config(cfg))


def build_deployment(topology: Optional[TopologyConfig] = None, mode: str = "wireguard",
                     seed: int = 0, scenario: int = 1, n2gate: Optional[bool] = None,
                     model: Optional[ProcessingModel] = None, inspect: bool = True,
                     record_trace: bool = False, base_dir: Optional[Path] = None) -> Deployment:
    """Instantiate nodes and links, bring up N2, attach UEs, install tunnels.

    ``n2gate`` defaults to on for the tunnel modes and off for baseline.
    UEs served by a rogue gNB are left idle.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    topo = topology or default_topology()
    model = model or ProcessingModel()
    if n2gate is None:
        n2gate = mode != "baseline"
    for role in ("ue", "gnb", "upf", "amf", "server"):
        if not topo.by_role(role):
            raise TopologyError(f"topology has no {role} node")
    for role in ("upf", "amf"):
        if len(topo.by_role(role)) > 1:
            raise TopologyError(f"topology has more than one {role}")

    sim = Simulator(seed, record_trace)
    key_rng = sim.spawn_rng()
    nodes: dict[str, RanNode] = {}
    for spec in topo.nodes:
        if spec.role != "ue" and spec.address is None:
            raise TopologyError(f"node {spec.id} needs an Address")
        nodes[spec.id] = sim.add_node(_NODE_CLASSES[spec.role](spec))
    for link in topo.links:
        sim.connect(link)
    dep = Deployment(sim, topo, mode, scenario, n2gate, model, nodes)

    upf, amf = dep.upf, dep.amf
    amf.upf = upf
    for n in nodes.values():
        if n.role in ("server", "upf", "ue"):
            n.services[ECHO_PORT] = echo_service
            n.services[SINK_PORT] = Sink()
        if isinstance(n, GnbNode):
            n.inspect = inspect
            n.upf_address = upf.outer_address

    # -- N2
    host = dep.gate_host
    if isinstance(host, GatewayNode):
        host.amf_address = amf.outer_address
    if n2gate:
        gate_kp = keygen(key_rng)
        stanzas = []
        for i, g in enumerate(dep.gnbs):
            kp = keygen(key_rng)
            dep.n2_keys[g.id] = kp
            g.n2_local = IPv4Address(int(N2_GNB_BASE) + i)
            g.n2_peer = N2_GATE_ADDR
            g.inner_addresses.add(g.n2_local)
            if g.trust != "rogue":
                stanzas.append(PeerStanza(kp.public, (CidrBlock(g.n2_local, 32),),
                                          Endpoint(g.outer_address, WG_PORT)))
            peer = PeerStanza(gate_kp.public, (CidrBlock(N2_GATE_ADDR, 32),),
                              Endpoint(host.outer_address, WG_PORT))
            g.tunnel = TunnelPort(g, TunnelEngine(kp, [peer], sim.spawn_rng(), name=g.id),
                                  "wireguard", model)
        dep.n2_keys[host.id] = gate_kp
        dep.gate = N2Gate(gate_kp, stanzas, sim.spawn_rng())
        host.install_gate(dep.gate, model)
        if isinstance(host, GatewayNode):
            amf.enforce = True
            amf.relays = {host.outer_address}
    else:
        for g in dep.gnbs:
            g.n2_peer = amf.outer_address

    # -- registration
    for ue in dep.ues:
        gnb_id = _serving_gnb(topo, ue.id)
        if gnb_id is None or nodes[gnb_id].trust == "rogue":
            continue
        ue_attach(ue, nodes[gnb_id], amf)

    # -- user-plane tunnels
    if mode != "baseline":
        _install_user_plane(dep, key_rng, base_dir)
    for port in [n.tunnel for n in nodes.values() if n.tunnel is not None]:
        sim.call_in(TICK_INTERVAL, port.tick)
    if dep.gate is not None:
        sim.call_in(TICK_INTERVAL, host.n2port.tick)
    return dep


def _install_user_plane(dep: Deployment, key_rng, base_dir: Optional[Path]) -> None:
    hub = dep.hub
    hub_inner = SERVER_TUNNEL_ADDR if dep.scenario == 1 else UPF_TUNNEL_ADDR
    if dep.scenario == 2:
        hub.add_address(TUNNEL_NET.address, TUNNEL_NET.prefix_len)
    hub.inner_addresses.add(hub_inner)
    ues = [u for u in dep.ues if u.state == "registered"]
    ue_tun = {u.id: IPv4Address(int(TUNNEL_NET.network) + 2 + i) for i, u in enumerate(ues)}
    ue_allowed = ((CidrBlock(hub_inner, 32),) if dep.scenario == 1
                  else (CidrBlock(IPv4Address("0.0.0.0"), 0),))
    model = dep.model

    if dep.mode == "wireguard":
        hub_kp = keygen(key_rng)
        ue_kps = {u.id: keygen(key_rng) for u in ues}
        hub_cfg = TunnelConfig(
            InterfaceStanza(hub_kp.private, CidrBlock(hub_inner, 24), WG_PORT),
            tuple(PeerStanza(ue_kps[u.id].public, (CidrBlock(ue_tun[u.id], 32),),
                             Endpoint(u.session.address, WG_PORT)) for u in ues))
        cfgs = {hub.id: hub_cfg}
        for u in ues:
            cfgs[u.id] = TunnelConfig(
                InterfaceStanza(ue_kps[u.id].private, CidrBlock(ue_tun[u.id], 24), WG_PORT),
                (PeerStanza(hub_kp.public, ue_allowed, Endpoint(hub.outer_address, WG_PORT),
                            KEEPALIVE),))
        for node_id, cfg in cfgs.items():
            spec = dep.nodes[node_id].spec
            if spec.config:
                path = Path(spec.config)
                if not path.is_absolute() and base_dir is not None:
                    path = base_dir / path
                cfg = parse_wg_config(path.read_text())
            cfg = _config_roundtrip(cfg)
            dep.tunnel_configs[node_id] = cfg
            node = dep.nodes[node_id]
            engine = TunnelEngine.from_config(cfg, dep.sim.spawn_rng(), name=node_id)
            node.tunnel = TunnelPort(node, engine, "wireguard", model)
            dep.data_keys[node_id] = StaticKeypair.from_private(cfg.interface.private_key)
            if node is not hub:
                node.inner_addresses.add(cfg.interface.address.address)
    else:
        psks = {u.id: random_bytes(key_rng, 32) for u in ues}
        hub_peers = [EspPeer(u.id, u.session.address, psks[u.id], (CidrBlock(ue_tun[u.id], 32),))
                     for u in ues]
        hub.tunnel = TunnelPort(hub, EspEndpoint(hub.id, hub_peers, dep.sim.spawn_rng()),
                                "ipsec", model)
        for u in ues:
            peer = EspPeer(hub.id, hub.outer_address, psks[u.id], ue_allowed)
            u.tunnel = TunnelPort(u, EspEndpoint(u.id, [peer], dep.sim.spawn_rng()), "ipsec", model)
            u.inner_addresses.add(ue_tun[u.id])
