"""ESP tunnel-mode comparator with AES-256-GCM and a mock IKE exchange.

ESP packet (outer IPv4 header excluded)::

    spi:4 seq:4 iv:8 | ciphertext(inner, pad, pad_len:1, next_header:1) | icv:16

The GCM nonce is ``salt(4) || iv(8)`` with the IV taken from the 64-bit send
sequence; the AAD is ``spi || seq``.

IKE is modelled only as far as its cost matters: two request/response
exchanges (INIT, then AUTH) that agree on X25519 keys and authenticate with a
pre-shared secret.  A responder that fails to verify the initiator still
answers the fourth message, carrying an AUTHENTICATION_FAILED notify.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .core import IPV4_HEADER_LEN, CryptoCounters, InnerPacket, Verdict
from .crypto_tunnel import (
    QUEUE_LIMIT, NoRoute, Received, ReplayWindow, RoutingTable, Transmission, clamp,
    random_bytes, x25519, x25519_public,
)
from .wire_codec import CidrBlock

ESP_HEADER_LEN = 16  # spi + seq + iv
ESP_TRAILER_LEN = 2
ICV_LEN = 16
NEXT_HEADER_IPV4 = 4

IKE_SA_INIT_REQ = 1
IKE_SA_INIT_RESP = 2
IKE_AUTH_REQ = 3
IKE_AUTH_RESP = 4
NOTIFY_OK = 0
NOTIFY_AUTHENTICATION_FAILED = 24


class EspError(Exception):
    pass


class AuthMismatch(EspError):
    pass


def pad_length(inner_len: int) -> int:
    return -(inner_len + ESP_TRAILER_LEN) % 4


def esp_overhead(inner_len: int) -> int:
    """Bytes added on the wire around an inner packet, outer IPv4 included."""
    return (IPV4_HEADER_LEN + ESP_HEADER_LEN + pad_length(inner_len)
            + ESP_TRAILER_LEN + ICV_LEN)


@dataclass
class SecurityAssociation:
    spi: int
    key: bytes
    salt: bytes
    peer: str
    send_seq: int = 0
    replay: ReplayWindow = field(default_factory=ReplayWindow)

    def __post_init__(self):
        if self.spi == 0:
            raise ValueError("SPI 0 is reserved")
        self._aead = AESGCM(self.key)


@dataclass(frozen=True)
class EspPacket:
    spi: int
    seq: int
    iv: bytes
    ciphertext: bytes  # includes the trailing ICV

    def to_bytes(self) -> bytes:
        return struct.pack("!II", self.spi, self.seq) + self.iv + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "EspPacket":
        if len(data) < ESP_HEADER_LEN + ESP_TRAILER_LEN + ICV_LEN:
            raise ValueError("short ESP packet")
        spi, seq = struct.unpack_from("!II", data)
        return cls(spi, seq, bytes(data[8:16]), bytes(data[16:]))


def esp_encrypt(sa: SecurityAssociation, inner: InnerPacket,
                counters: Optional[CryptoCounters] = None) -> EspPacket:
    payload = inner.encode()
    pad = pad_length(len(payload))
    plaintext = payload + bytes(range(1, pad + 1)) + bytes([pad, NEXT_HEADER_IPV4])
    seq = sa.send_seq
    sa.send_seq += 1
    seq32 = seq & 0xFFFFFFFF
    iv = seq.to_bytes(8, "big")
    aad = struct.pack("!II", sa.spi, seq32)
    ct = sa._aead.encrypt(sa.salt + iv, plaintext, aad)
    if counters is not None:
        counters.aead_ops += 1
        counters.bytes_encrypted += len(payload) + pad
    return EspPacket(sa.spi, seq32, iv, ct)


def esp_decrypt(sas: Union[SecurityAssociation, dict], pkt: Union[EspPacket, bytes],
                outer_src=None, counters: Optional[CryptoCounters] = None
                ) -> Union[InnerPacket, Verdict]:
    """Inbound processing; ``sas`` is one SA or a ``{spi: SA}`` table."""
    counters = counters if counters is not None else CryptoCounters()
    if not isinstance(pkt, EspPacket):
        try:
            pkt = EspPacket.from_bytes(pkt)
        except ValueError:
            counters.drop(Verdict.MALFORMED)
            return Verdict.MALFORMED
    if isinstance(sas, SecurityAssociation):
        sa = sas if sas.spi == pkt.spi else None
    else:
        sa = sas.get(pkt.spi)
    if sa is None:
        counters.drop(Verdict.UNKNOWN_SPI)
        return Verdict.UNKNOWN_SPI
    seq = int.from_bytes(pkt.iv, "big")
    if seq & 0xFFFFFFFF != pkt.seq or not sa.replay.check(seq):
        counters.drop(Verdict.REPLAY)
        return Verdict.REPLAY
    try:
        plaintext = sa._aead.decrypt(sa.salt + pkt.iv, pkt.ciphertext,
                                     struct.pack("!II", pkt.spi, pkt.seq))
    except InvalidTag:
        counters.drop(Verdict.AUTH_FAIL)
        return Verdict.AUTH_FAIL
    counters.aead_ops += 1
    sa.replay.accept(seq)
    pad = plaintext[-2]
    body = plaintext[: len(plaintext) - ESP_TRAILER_LEN - pad]
    counters.bytes_decrypted += len(body) + pad
    try:
        return InnerPacket.decode(body)
    except ValueError:
        counters.drop(Verdict.MALFORMED)
        return Verdict.MALFORMED


# ---------------------------------------------------------------- mock IKE

def _prf(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def _prf_plus(key: bytes, seed: bytes, n: int) -> bytes:
    out, t, i = b"", b"", 1
    while len(out) < n:
        t = _prf(key, t + seed + bytes([i]))
        out += t
        i += 1
    return out[:n]


def _child_keys(dh: bytes, ni: bytes, nr: bytes, spi_i: int, spi_r: int):
    skeyseed = _prf(ni + nr, dh)
    km = _prf_plus(skeyseed, ni + nr + struct.pack("!II", spi_i, spi_r), 32 + 36 + 36)
    sk_a = km[:32]
    i2r = km[32:68]
    r2i = km[68:104]
    return sk_a, (i2r[:32], i2r[32:]), (r2i[:32], r2i[32:])


def _auth(psk: bytes, sk_a: bytes, role: bytes, transcript: bytes) -> bytes:
    return _prf(_prf(psk, b"Key Pad for IKEv2"), role + sk_a + transcript)


@dataclass
class EspPeer:
    name: str
    address: object  # IPv4Address of the peer's tunnel endpoint
    psk: bytes
    selectors: tuple[CidrBlock, ...]
    sa_out: Optional[SecurityAssociation] = None
    sa_in: Optional[SecurityAssociation] = None
    queue: deque = field(default_factory=lambda: deque(maxlen=QUEUE_LIMIT))
    established_at: Optional[float] = None


@dataclass
class _IkeState:
    peer: str
    eph: bytes
    nonce: bytes
    spi_ike: int
    transcript: bytes = b""
    auth_req: bytes = b""
    sk_a: bytes = b""
    keys: tuple = ()
    spi_child: int = 0


class EspEndpoint:
    """One ESP tunnel endpoint with any number of peers."""

    def __init__(self, name: str, peers: Iterable[EspPeer], rng,
                 replay_window: int = 1024):
        self.name = name
        self.rng = rng
        self.replay_window = replay_window
        self.counters = CryptoCounters()
        self.peers = {p.name: p for p in peers}
        self.routes = RoutingTable(
            (blk, p.name.encode()) for p in self.peers.values() for blk in p.selectors)
        self.sas_in: dict[int, SecurityAssociation] = {}
        self._ike: dict[int, _IkeState] = {}
        self.last_auth_failure: Optional[str] = None

    def _spi(self) -> int:
        while True:
            spi = int.from_bytes(random_bytes(self.rng, 4), "big")
            if spi and spi not in self.sas_in:
                return spi

    # -- IKE

    def start_ike(self, peer_name: str, now: float) -> Transmission:
        eph = clamp(random_bytes(self.rng, 32))
        nonce = random_bytes(self.rng, 32)
        spi = int.from_bytes(random_bytes(self.rng, 8), "big") or 1
        st = _IkeState(peer_name, eph, nonce, spi)
        body = struct.pack("!BQQ", IKE_SA_INIT_REQ, spi, 0) + x25519_public(eph) + nonce
        st.transcript = body
        self._ike[spi] = st
        self.counters.handshake_messages += 1
        return Transmission(peer_name.encode(), self.peers[peer_name].address, body, "ike")

    def _install(self, peer: EspPeer, spi_out: int, out_keys, spi_in: int, in_keys,
                 now: float) -> None:
        if peer.sa_in is not None:
            self.sas_in.pop(peer.sa_in.spi, None)
        peer.sa_out = SecurityAssociation(spi_out, out_keys[0], out_keys[1], peer.name,
                                          replay=ReplayWindow(self.replay_window))
        peer.sa_in = SecurityAssociation(spi_in, in_keys[0], in_keys[1], peer.name,
                                         replay=ReplayWindow(self.replay_window))
        self.sas_in[spi_in] = peer.sa_in
        peer.established_at = now

    def _ike_receive(self, data: bytes, outer_src, now: float) -> Received:
        kind, spi_i, spi_r = struct.unpack_from("!BQQ", data)
        body = data[17:]
        if kind == IKE_SA_INIT_REQ:
            eph = clamp(random_bytes(self.rng, 32))
            nonce = random_bytes(self.rng, 32)
            my_spi = int.from_bytes(random_bytes(self.rng, 8), "big") or 1
            dh = x25519(eph, body[:32])
            st = _IkeState("", eph, nonce, my_spi)
            resp = struct.pack("!BQQ", IKE_SA_INIT_RESP, spi_i, my_spi) + x25519_public(eph) + nonce
            st.transcript = data + resp
            sk_a, i2r, r2i = _child_keys(dh, body[32:64], nonce, 0, 0)
            st.sk_a, st.keys = sk_a, (i2r, r2i)
            self._ike[my_spi] = st
            self.counters.handshake_messages += 1
            return Received(Verdict.HANDSHAKE, replies=[
                Transmission(b"", outer_src, resp, "ike")])
        if kind == IKE_SA_INIT_RESP:
            st = self._ike.get(spi_i)
            if st is None:
                return Received(Verdict.UNKNOWN_INDEX)
            dh = x25519(st.eph, body[:32])
            sk_a, i2r, r2i = _child_keys(dh, st.nonce, body[32:64], 0, 0)
            st.sk_a, st.keys = sk_a, (i2r, r2i)
            st.transcript += data
            st.spi_child = self._spi()
            peer = self.peers[st.peer]
            auth = _auth(peer.psk, sk_a, b"I", st.transcript)
            name = self.name.encode()
            req = (struct.pack("!BQQ", IKE_AUTH_REQ, spi_i, spi_r)
                   + struct.pack("!IB", st.spi_child, len(name)) + name + auth)
            st.auth_req = req
            self.counters.handshake_messages += 1
            return Received(Verdict.HANDSHAKE, replies=[
                Transmission(st.peer.encode(), peer.address, req, "ike")])
        if kind == IKE_AUTH_REQ:
            st = self._ike.pop(spi_r, None)
            if st is None:
                return Received(Verdict.UNKNOWN_INDEX)
            spi_child_i, nlen = struct.unpack_from("!IB", body)
            claimed = body[5:5 + nlen].decode()
            auth = body[5 + nlen:]
            peer = self.peers.get(claimed)
            ok = peer is not None and hmac.compare_digest(
                auth, _auth(peer.psk, st.sk_a, b"I", st.transcript))
            head = struct.pack("!BQQ", IKE_AUTH_RESP, spi_i, spi_r)
            self.counters.handshake_messages += 1
            if not ok:
                self.last_auth_failure = claimed
                self.counters.drop(Verdict.AUTH_FAIL)
                resp = head + struct.pack("!BI", NOTIFY_AUTHENTICATION_FAILED, 0)
                return Received(Verdict.AUTH_FAIL, replies=[
                    Transmission(b"", outer_src, resp, "ike")])
            my_child = self._spi()
            i2r, r2i = st.keys
            self._install(peer, spi_child_i, r2i, my_child, i2r, now)
            resp = (head + struct.pack("!BI", NOTIFY_OK, my_child)
                    + _auth(peer.psk, st.sk_a, b"R", st.transcript + data))
            replies = [Transmission(peer.name.encode(), peer.address, resp, "ike")]
            replies += self._flush(peer, now)
            return Received(Verdict.HANDSHAKE, replies=replies, peer=peer.name.encode())
        if kind == IKE_AUTH_RESP:
            st = self._ike.pop(spi_i, None)
            if st is None:
                return Received(Verdict.UNKNOWN_INDEX)
            status, spi_child_r = struct.unpack_from("!BI", body)
            peer = self.peers[st.peer]
            if status != NOTIFY_OK:
                self.last_auth_failure = st.peer
                self.counters.drop(Verdict.AUTH_FAIL)
                raise AuthMismatch(f"{self.name}: peer {st.peer} rejected our AUTH")
            expected = _auth(peer.psk, st.sk_a, b"R", st.transcript + st.auth_req)
            if not hmac.compare_digest(body[5:], expected):
                self.last_auth_failure = st.peer
                self.counters.drop(Verdict.AUTH_FAIL)
                raise AuthMismatch(f"{self.name}: responder AUTH did not verify")
            i2r, r2i = st.keys
            self._install(peer, spi_child_r, i2r, st.spi_child, r2i, now)
            return Received(Verdict.HANDSHAKE, replies=self._flush(peer, now),
                            peer=peer.name.encode())
        return Received(Verdict.MALFORMED)

    # -- data

    def _seal(self, peer: EspPeer, inner: InnerPacket) -> Transmission:
        pkt = esp_encrypt(peer.sa_out, inner, self.counters)
        return Transmission(peer.name.encode(), peer.address, pkt.to_bytes(), "data")

    def _flush(self, peer: EspPeer, now: float) -> list[Transmission]:
        out = []
        while peer.queue:
            out.append(self._seal(peer, peer.queue.popleft()))
        return out

    def encrypt_outbound(self, inner: InnerPacket, now: float) -> list[Transmission]:
        name = self.routes.lookup(inner.dst)
        if name is None:
            self.counters.drop(Verdict.NO_ROUTE)
            raise NoRoute(str(inner.dst))
        peer = self.peers[name.decode()]
        if peer.sa_out is None:
            fresh = not peer.queue and not any(s.peer == peer.name for s in self._ike.values())
            peer.queue.append(inner)
            return [self.start_ike(peer.name, now)] if fresh else []
        return [self._seal(peer, inner)]

    def decrypt_inbound(self, data, outer_src=None, now: float = 0.0):
        return esp_decrypt(self.sas_in, data, outer_src, self.counters)

    def receive(self, data: bytes, outer_src=None, now: float = 0.0,
                ike: bool = False) -> Received:
        if ike:
            return self._ike_receive(data, outer_src, now)
        result = self.decrypt_inbound(data, outer_src, now)
        spi = int.from_bytes(data[:4], "big") if len(data) >= 4 else 0
        sa = self.sas_in.get(spi)
        peer = sa.peer.encode() if sa else None
        if isinstance(result, InnerPacket):
            return Received(Verdict.DELIVERED, result, peer=peer)
        return Received(result, peer=peer)

    def tick(self, now: float) -> list[Transmission]:
        return []


@dataclass
class IkeResult:
    initiator_sa: tuple[SecurityAssociation, SecurityAssociation]
    responder_sa: tuple[SecurityAssociation, SecurityAssociation]
    messages: int
    established_at: float


def ike_mock_establish(initiator: EspEndpoint, responder: EspEndpoint, peer_name: str,
                       initiator_address, delay: float = 0.0,
                       compute_delay: float = 0.0) -> IkeResult:
    """Run the four IKE messages in-process over a link of one-way ``delay``.

    ``peer_name`` names the responder in the initiator's peer table.  The
    returned ``established_at`` is when the initiator may send its first
    protected packet.
    """
    now = 0.0
    messages = 0
    pending = [(initiator.start_ike(peer_name, now), responder, initiator_address)]
    while pending:
        tx, receiver, src = pending.pop(0)
        messages += 1
        now += delay + compute_delay
        res = receiver._ike_receive(tx.message, src, now)
        other = initiator if receiver is responder else responder
        other_src = (initiator.peers[peer_name].address if receiver is initiator
                     else initiator_address)
        for reply in res.replies:
            if reply.kind == "ike":
                pending.append((reply, other, other_src))
    peer = initiator.peers[peer_name]
    rpeer = next(p for p in responder.peers.values()
                 if p.sa_in is not None and p.sa_in.spi == peer.sa_out.spi)
    return IkeResult((peer.sa_out, peer.sa_in), (rpeer.sa_out, rpeer.sa_in), messages, now)
