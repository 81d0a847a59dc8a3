"""WireGuard-style tunnel engine.

Curve25519 / ChaCha20-Poly1305 / BLAKE2s with the Noise IKpsk2 handshake
(pre-shared key fixed at zero).  Message layouts follow upstream WireGuard;
the mac1/mac2 cookie fields are present but always zero and never checked.

Handshake initiation (type 1, 148 bytes)::

    type:1 reserved:3 sender:4 ephemeral:32 static:32+16 timestamp:12+16 mac1:16 mac2:16

Handshake response (type 2, 92 bytes)::

    type:1 reserved:3 sender:4 receiver:4 ephemeral:32 empty:0+16 mac1:16 mac2:16

Transport data (type 4, 16 + len(inner) + 16 bytes)::

    type:1 reserved:3 receiver:4 counter:8 (LE) ciphertext+tag

Integers are little-endian, as upstream.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .core import CryptoCounters, InnerPacket, Verdict
from .wire_codec import (
    CidrBlock, ConfigError, Endpoint, PeerStanza, TunnelConfig, check_unique_peers,
    encode_key,
)

log = logging.getLogger(__name__)

CONSTRUCTION = b"Noise_IKpsk2_25519_ChaChaPoly_BLAKE2s"
IDENTIFIER = b"WireGuard v1 zx2c4 Jason@zx2c4.com"

MSG_INIT = 1
MSG_RESP = 2
MSG_DATA = 4

INIT_LEN = 148
RESP_LEN = 92
DATA_HEADER_LEN = 16
TAG_LEN = 16
DATA_OVERHEAD = DATA_HEADER_LEN + TAG_LEN
OUTER_UDP_IP_LEN = 28

QUEUE_LIMIT = 16

_ZERO32 = bytes(32)
_ZERO16 = bytes(16)


class TunnelError(Exception):
    pass


class UnknownInitiatorKey(TunnelError):
    pass


class StaleTimestamp(TunnelError):
    pass


class AuthFailure(TunnelError):
    pass


class NoPendingInitiation(TunnelError):
    pass


class NoRoute(TunnelError):
    pass


class DuplicateRoute(ConfigError):
    pass


# ------------------------------------------------------------- primitives

def blake2s(data: bytes) -> bytes:
    return hashlib.blake2s(data).digest()


def _hmac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.blake2s).digest()


def kdf(key: bytes, data: bytes, n: int) -> tuple[bytes, ...]:
    """HKDF with HMAC-BLAKE2s, returning ``n`` 32-byte outputs."""
    prk = _hmac(key, data)
    out, t = [], b""
    for i in range(1, n + 1):
        t = _hmac(prk, t + bytes([i]))
        out.append(t)
    return tuple(out)


def _nonce(counter: int) -> bytes:
    return b"\x00\x00\x00\x00" + counter.to_bytes(8, "little")


def aead_seal(key: bytes, counter: int, plaintext: bytes, aad: bytes = b"") -> bytes:
    return ChaCha20Poly1305(key).encrypt(_nonce(counter), plaintext, aad)


def aead_open(key: bytes, counter: int, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(_nonce(counter), ciphertext, aad)
    except InvalidTag:
        raise AuthFailure("AEAD verification failed") from None


def clamp(scalar: bytes) -> bytes:
    b = bytearray(scalar)
    b[0] &= 248
    b[31] &= 127
    b[31] |= 64
    return bytes(b)


def x25519_public(private: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(private).public_key().public_bytes_raw()


def x25519(private: bytes, public: bytes) -> bytes:
    try:
        return X25519PrivateKey.from_private_bytes(private).exchange(
            X25519PublicKey.from_public_bytes(public))
    except ValueError:
        # low-order point: shared secret would be all zero
        raise AuthFailure("degenerate Diffie-Hellman result") from None


def random_bytes(rng, n: int) -> bytes:
    """Draw ``n`` bytes from a numpy Generator or a ``random.Random``."""
    if hasattr(rng, "bytes"):
        return rng.bytes(n)
    return rng.randbytes(n)


@dataclass(frozen=True)
class StaticKeypair:
    private: bytes
    public: bytes

    @classmethod
    def from_private(cls, private: bytes) -> "StaticKeypair":
        return cls(private, x25519_public(private))


def keygen(rng) -> StaticKeypair:
    return StaticKeypair.from_private(clamp(random_bytes(rng, 32)))


def tai64n(now: float) -> bytes:
    ns = round(now * 1e9)
    secs, frac = divmod(ns, 1_000_000_000)
    return struct.pack(">QI", (1 << 62) + 10 + secs, frac)


# --------------------------------------------------------------- messages

@dataclass(frozen=True)
class HandshakeInit:
    sender_index: int
    ephemeral: bytes
    encrypted_static: bytes
    encrypted_timestamp: bytes

    def to_bytes(self) -> bytes:
        return (struct.pack("<B3xI", MSG_INIT, self.sender_index) + self.ephemeral
                + self.encrypted_static + self.encrypted_timestamp + _ZERO16 + _ZERO16)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HandshakeInit":
        if len(data) != INIT_LEN or data[0] != MSG_INIT:
            raise ValueError("not a handshake initiation")
        (idx,) = struct.unpack_from("<I", data, 4)
        return cls(idx, data[8:40], data[40:88], data[88:116])


@dataclass(frozen=True)
class HandshakeResp:
    sender_index: int
    receiver_index: int
    ephemeral: bytes
    encrypted_nothing: bytes

    def to_bytes(self) -> bytes:
        return (struct.pack("<B3xII", MSG_RESP, self.sender_index, self.receiver_index)
                + self.ephemeral + self.encrypted_nothing + _ZERO16 + _ZERO16)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HandshakeResp":
        if len(data) != RESP_LEN or data[0] != MSG_RESP:
            raise ValueError("not a handshake response")
        s, r = struct.unpack_from("<II", data, 4)
        return cls(s, r, data[12:44], data[44:60])


@dataclass(frozen=True)
class DataMessage:
    receiver_index: int
    counter: int
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<B3xIQ", MSG_DATA, self.receiver_index, self.counter) + self.ciphertext

    def __len__(self) -> int:
        return DATA_HEADER_LEN + len(self.ciphertext)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DataMessage":
        if len(data) < DATA_OVERHEAD or data[0] != MSG_DATA:
            raise ValueError("not a transport data message")
        idx, ctr = struct.unpack_from("<IQ", data, 4)
        return cls(idx, ctr, bytes(data[DATA_HEADER_LEN:]))


def data_message_size(inner_len: int) -> int:
    return inner_len + DATA_OVERHEAD


# ------------------------------------------------------------ replay window

class ReplayWindow:
    """Sliding bitmap over the last ``size`` counters.

    Bit ``i`` of the bitmap records whether ``highest - i`` was accepted.
    """

    def __init__(self, size: int = 1024):
        self.size = size
        self.highest: Optional[int] = None
        self.bitmap = 0
        self._mask = (1 << size) - 1

    def check(self, counter: int) -> bool:
        if self.highest is None or counter > self.highest:
            return True
        offset = self.highest - counter
        if offset >= self.size:
            return False
        return not (self.bitmap >> offset) & 1

    def accept(self, counter: int) -> bool:
        if not self.check(counter):
            return False
        if self.highest is None:
            self.highest, self.bitmap = counter, 1
        elif counter > self.highest:
            shift = counter - self.highest
            self.bitmap = ((self.bitmap << shift) | 1) & self._mask if shift < self.size else 1
            self.highest = counter
        else:
            self.bitmap |= 1 << (self.highest - counter)
        return True


# ------------------------------------------------------------------ routing

class RoutingTable:
    """Longest-prefix match from inner address to peer public key."""

    def __init__(self, entries: Iterable[tuple[CidrBlock, bytes]] = ()):
        self._by_len: dict[int, dict[int, bytes]] = {}
        self._lens: list[int] = []
        for block, peer in entries:
            self.insert(block, peer)

    def insert(self, block: CidrBlock, peer: bytes) -> None:
        block = block.normalized()
        table = self._by_len.setdefault(block.prefix_len, {})
        owner = table.get(block.network)
        if owner is not None and owner != peer:
            raise DuplicateRoute(f"{block} is claimed by two peers")
        table[block.network] = peer
        self._lens = sorted(self._by_len, reverse=True)

    def lookup(self, addr) -> Optional[bytes]:
        a = int(addr)
        for plen in self._lens:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            peer = self._by_len[plen].get(a & mask)
            if peer is not None:
                return peer
        return None

    @property
    def entries(self) -> list[tuple[CidrBlock, bytes]]:
        from ipaddress import IPv4Address
        return [(CidrBlock(IPv4Address(net), plen), peer)
                for plen in self._lens for net, peer in sorted(self._by_len[plen].items())]


# ------------------------------------------------------------------- state

@dataclass(frozen=True)
class TunnelTimers:
    rekey_after: float = 120.0
    reject_after: float = 180.0
    rekey_timeout: float = 5.0
    rekey_attempt_time: float = 90.0
    replay_window: int = 1024


@dataclass
class SessionKeys:
    send_key: bytes
    recv_key: bytes
    local_index: int
    remote_index: int
    established_at: float
    initiator: bool
    send_counter: int = 0


@dataclass
class _Pending:
    local_index: int
    ephemeral_private: bytes
    chaining_key: bytes
    hash: bytes
    sent_at: float
    first_attempt: float


@dataclass
class PeerState:
    stanza: PeerStanza
    session: Optional[SessionKeys] = None
    replay: ReplayWindow = field(default_factory=ReplayWindow)
    last_handshake_timestamp: bytes = bytes(12)
    last_tx: float = 0.0
    last_rx: float = 0.0
    pending: Optional[_Pending] = None
    queue: deque = field(default_factory=lambda: deque(maxlen=QUEUE_LIMIT))

    @property
    def public_key(self) -> bytes:
        return self.stanza.public_key


@dataclass
class Transmission:
    peer: bytes
    endpoint: Optional[Endpoint]
    message: bytes
    kind: str


@dataclass
class Received:
    verdict: Verdict
    packet: Optional[InnerPacket] = None
    replies: list = field(default_factory=list)
    peer: Optional[bytes] = None


@dataclass
class ReloadDiff:
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    changed: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.changed)


def _initial_state(responder_public: bytes) -> tuple[bytes, bytes]:
    ck = blake2s(CONSTRUCTION)
    h = blake2s(blake2s(ck + IDENTIFIER) + responder_public)
    return ck, h


class TunnelEngine:
    """One WireGuard interface: static identity, peers, sessions, routes."""

    def __init__(self, keypair: StaticKeypair, peers: Iterable[PeerStanza], rng,
                 timers: TunnelTimers = TunnelTimers(), name: str = ""):
        self.keypair = keypair
        self.rng = rng
        self.timers = timers
        self.name = name
        self.counters = CryptoCounters()
        self.peers: dict[bytes, PeerState] = {}
        self._sessions: dict[int, bytes] = {}   # local index -> peer key
        self._pending: dict[int, bytes] = {}    # local index of outstanding init
        self._last_timestamp = bytes(12)
        self.routes = RoutingTable()
        self._install_peers(list(peers))

    @classmethod
    def from_config(cls, cfg: TunnelConfig, rng, **kw) -> "TunnelEngine":
        return cls(StaticKeypair.from_private(cfg.interface.private_key), cfg.peers, rng, **kw)

    # -- peers

    def _build_routes(self, stanzas: list[PeerStanza]) -> RoutingTable:
        table = RoutingTable()
        for s in stanzas:
            for block in s.allowed_ips:
                table.insert(block, s.public_key)
        return table

    def _install_peers(self, stanzas: list[PeerStanza]) -> None:
        check_unique_peers(stanzas)
        self.routes = self._build_routes(stanzas)
        for s in stanzas:
            self.peers[s.public_key] = PeerState(
                s, replay=ReplayWindow(self.timers.replay_window))

    def _teardown(self, peer: PeerState) -> None:
        if peer.session is not None:
            self._sessions.pop(peer.session.local_index, None)
            peer.session = None
        if peer.pending is not None:
            self._pending.pop(peer.pending.local_index, None)
            peer.pending = None

    def reload_peers(self, stanzas: Iterable[PeerStanza]) -> ReloadDiff:
        stanzas = list(stanzas)
        check_unique_peers(stanzas)
        routes = self._build_routes(stanzas)
        new = {s.public_key: s for s in stanzas}
        diff = ReloadDiff()
        for key in list(self.peers):
            if key not in new:
                self._teardown(self.peers.pop(key))
                diff.removed.append(key)
        for key, stanza in new.items():
            if key not in self.peers:
                self.peers[key] = PeerState(stanza, replay=ReplayWindow(self.timers.replay_window))
                diff.added.append(key)
            elif self.peers[key].stanza != stanza:
                self.peers[key].stanza = stanza
                diff.changed.append(key)
        self.routes = routes
        if not diff.empty:
            log.debug("%s reload: +%d -%d ~%d", self.name, len(diff.added),
                      len(diff.removed), len(diff.changed))
        return diff

    def _new_index(self) -> int:
        while True:
            idx = int.from_bytes(random_bytes(self.rng, 4), "little")
            if idx not in self._sessions and idx not in self._pending:
                return idx

    def _timestamp(self, now: float) -> bytes:
        ts = tai64n(now)
        if ts <= self._last_timestamp:
            # same virtual instant twice: keep the timestamp strictly increasing
            secs, frac = struct.unpack(">QI", self._last_timestamp)
            frac += 1
            if frac == 1_000_000_000:
                secs, frac = secs + 1, 0
            ts = struct.pack(">QI", secs, frac)
        self._last_timestamp = ts
        return ts

    # -- handshake

    def initiate_handshake(self, peer_key: bytes, now: float) -> HandshakeInit:
        peer = self.peers[peer_key]
        if peer.pending is not None:
            self._pending.pop(peer.pending.local_index, None)
        ck, h = _initial_state(peer_key)
        eph = clamp(random_bytes(self.rng, 32))
        eph_pub = x25519_public(eph)
        ck = kdf(ck, eph_pub, 1)[0]
        h = blake2s(h + eph_pub)
        ck, k = kdf(ck, x25519(eph, peer_key), 2)
        enc_static = aead_seal(k, 0, self.keypair.public, h)
        h = blake2s(h + enc_static)
        ck, k = kdf(ck, x25519(self.keypair.private, peer_key), 2)
        enc_ts = aead_seal(k, 0, self._timestamp(now), h)
        h = blake2s(h + enc_ts)
        idx = self._new_index()
        first = peer.pending.first_attempt if peer.pending else now
        peer.pending = _Pending(idx, eph, ck, h, now, first)
        self._pending[idx] = peer_key
        self.counters.handshake_messages += 1
        self.counters.aead_ops += 2
        return HandshakeInit(idx, eph_pub, enc_static, enc_ts)

    def _consume_init(self, init: HandshakeInit):
        """Run the responder side of the first message; return (peer, ck, h, ts)."""
        ck, h = _initial_state(self.keypair.public)
        ck = kdf(ck, init.ephemeral, 1)[0]
        h = blake2s(h + init.ephemeral)
        ck, k = kdf(ck, x25519(self.keypair.private, init.ephemeral), 2)
        static = aead_open(k, 0, init.encrypted_static, h)
        h = blake2s(h + init.encrypted_static)
        peer = self.peers.get(static)
        if peer is None:
            raise UnknownInitiatorKey(encode_key(static))
        ck, k = kdf(ck, x25519(self.keypair.private, static), 2)
        ts = aead_open(k, 0, init.encrypted_timestamp, h)
        h = blake2s(h + init.encrypted_timestamp)
        self.counters.aead_ops += 2
        return peer, ck, h, ts

    def respond_handshake(self, init: HandshakeInit, now: float):
        peer, ck, h, ts = self._consume_init(init)
        if ts <= peer.last_handshake_timestamp:
            raise StaleTimestamp(encode_key(peer.public_key))
        peer.last_handshake_timestamp = ts
        eph = clamp(random_bytes(self.rng, 32))
        eph_pub = x25519_public(eph)
        ck = kdf(ck, eph_pub, 1)[0]
        h = blake2s(h + eph_pub)
        ck = kdf(ck, x25519(eph, init.ephemeral), 1)[0]
        ck = kdf(ck, x25519(eph, peer.public_key), 1)[0]
        ck, tau, k = kdf(ck, _ZERO32, 3)
        h = blake2s(h + tau)
        enc_nothing = aead_seal(k, 0, b"", h)
        h = blake2s(h + enc_nothing)
        recv_key, send_key = kdf(ck, b"", 2)
        idx = self._new_index()
        keys = SessionKeys(send_key, recv_key, idx, init.sender_index, now, initiator=False)
        self._install_session(peer, keys)
        self.counters.handshake_messages += 1
        self.counters.aead_ops += 1
        return HandshakeResp(idx, init.sender_index, eph_pub, enc_nothing), keys

    def finalize_handshake(self, resp: HandshakeResp, now: float) -> SessionKeys:
        peer_key = self._pending.get(resp.receiver_index)
        if peer_key is None:
            raise NoPendingInitiation(resp.receiver_index)
        peer = self.peers[peer_key]
        p = peer.pending
        ck, h = p.chaining_key, p.hash
        ck = kdf(ck, resp.ephemeral, 1)[0]
        h = blake2s(h + resp.ephemeral)
        ck = kdf(ck, x25519(p.ephemeral_private, resp.ephemeral), 1)[0]
        ck = kdf(ck, x25519(self.keypair.private, resp.ephemeral), 1)[0]
        ck, tau, k = kdf(ck, _ZERO32, 3)
        h = blake2s(h + tau)
        aead_open(k, 0, resp.encrypted_nothing, h)
        self.counters.aead_ops += 1
        send_key, recv_key = kdf(ck, b"", 2)
        del self._pending[p.local_index]
        peer.pending = None
        keys = SessionKeys(send_key, recv_key, p.local_index, resp.sender_index, now,
                           initiator=True)
        self._install_session(peer, keys)
        return keys

    def _install_session(self, peer: PeerState, keys: SessionKeys) -> None:
        if peer.session is not None:
            self._sessions.pop(peer.session.local_index, None)
        peer.session = keys
        peer.replay = ReplayWindow(self.timers.replay_window)
        self._sessions[keys.local_index] = peer.public_key

    # -- transport

    def _seal(self, peer: PeerState, plaintext: bytes, now: float) -> bytes:
        s = peer.session
        counter = s.send_counter
        s.send_counter += 1
        ct = aead_seal(s.send_key, counter, plaintext)
        self.counters.aead_ops += 1
        self.counters.bytes_encrypted += len(plaintext)
        peer.last_tx = now
        return DataMessage(s.remote_index, counter, ct).to_bytes()

    def _usable(self, peer: PeerState, now: float) -> bool:
        s = peer.session
        return s is not None and now - s.established_at < self.timers.reject_after

    def encrypt_outbound(self, inner: InnerPacket, now: float) -> list[Transmission]:
        peer_key = self.routes.lookup(inner.dst)
        if peer_key is None:
            self.counters.drop(Verdict.NO_ROUTE)
            raise NoRoute(str(inner.dst))
        peer = self.peers[peer_key]
        out: list[Transmission] = []
        if not self._usable(peer, now):
            peer.queue.append(inner)
            if peer.pending is None:
                out.append(self._init_tx(peer, now))
            return out
        s = peer.session
        if (s.initiator and peer.pending is None
                and now - s.established_at >= self.timers.rekey_after):
            out.append(self._init_tx(peer, now))
        out.append(Transmission(peer_key, peer.stanza.endpoint,
                                self._seal(peer, inner.encode(), now), "data"))
        return out

    def _init_tx(self, peer: PeerState, now: float) -> Transmission:
        init = self.initiate_handshake(peer.public_key, now)
        return Transmission(peer.public_key, peer.stanza.endpoint, init.to_bytes(), "init")

    def _flush(self, peer: PeerState, now: float) -> list[Transmission]:
        out = []
        while peer.queue:
            inner = peer.queue.popleft()
            out.append(Transmission(peer.public_key, peer.stanza.endpoint,
                                    self._seal(peer, inner.encode(), now), "data"))
        return out

    def decrypt_inbound(self, msg: Union[DataMessage, bytes], outer_src=None,
                        now: float = 0.0) -> Union[InnerPacket, Verdict]:
        if not isinstance(msg, DataMessage):
            try:
                msg = DataMessage.from_bytes(msg)
            except ValueError:
                self.counters.drop(Verdict.MALFORMED)
                return Verdict.MALFORMED
        peer_key = self._sessions.get(msg.receiver_index)
        peer = self.peers.get(peer_key) if peer_key is not None else None
        if peer is None or not self._usable(peer, now):
            self.counters.drop(Verdict.UNKNOWN_INDEX)
            return Verdict.UNKNOWN_INDEX
        if not peer.replay.check(msg.counter):
            self.counters.drop(Verdict.REPLAY)
            return Verdict.REPLAY
        try:
            plaintext = aead_open(peer.session.recv_key, msg.counter, msg.ciphertext)
        except AuthFailure:
            self.counters.drop(Verdict.AUTH_FAIL)
            return Verdict.AUTH_FAIL
        self.counters.aead_ops += 1
        peer.replay.accept(msg.counter)
        peer.last_rx = now
        self.counters.bytes_decrypted += len(plaintext)
        if not plaintext:
            return Verdict.KEEPALIVE
        try:
            inner = InnerPacket.decode(plaintext)
        except ValueError:
            self.counters.drop(Verdict.MALFORMED)
            return Verdict.MALFORMED
        if not any(b.contains(inner.src) for b in peer.stanza.allowed_ips):
            self.counters.drop(Verdict.SOURCE_INVALID)
            return Verdict.SOURCE_INVALID
        return inner

    def peer_for_index(self, index: int) -> Optional[bytes]:
        return self._sessions.get(index)

    def receive(self, data: bytes, outer_src=None, now: float = 0.0) -> Received:
        """Dispatch any inbound datagram; handshake failures are silent."""
        kind = data[0] if data else 0
        if kind == MSG_DATA:
            msg = None
            try:
                msg = DataMessage.from_bytes(data)
            except ValueError:
                pass
            result = self.decrypt_inbound(msg if msg else data, outer_src, now)
            peer = self._sessions.get(msg.receiver_index) if msg else None
            if isinstance(result, InnerPacket):
                return Received(Verdict.DELIVERED, result, peer=peer)
            return Received(result, peer=peer)
        if kind == MSG_INIT:
            try:
                init = HandshakeInit.from_bytes(data)
                resp, _ = self.respond_handshake(init, now)
            except UnknownInitiatorKey:
                self.counters.drop(Verdict.UNKNOWN_PEER)
                return Received(Verdict.UNKNOWN_PEER)
            except StaleTimestamp:
                self.counters.drop(Verdict.STALE)
                return Received(Verdict.STALE)
            except (AuthFailure, ValueError):
                self.counters.drop(Verdict.AUTH_FAIL)
                return Received(Verdict.AUTH_FAIL)
            peer = self._sessions[resp.sender_index]
            state = self.peers[peer]
            replies = [Transmission(peer, state.stanza.endpoint, resp.to_bytes(), "resp")]
            replies += self._flush(state, now)
            return Received(Verdict.HANDSHAKE, replies=replies, peer=peer)
        if kind == MSG_RESP:
            try:
                keys = self.finalize_handshake(HandshakeResp.from_bytes(data), now)
            except NoPendingInitiation:
                self.counters.drop(Verdict.UNKNOWN_INDEX)
                return Received(Verdict.UNKNOWN_INDEX)
            except (AuthFailure, ValueError):
                self.counters.drop(Verdict.AUTH_FAIL)
                return Received(Verdict.AUTH_FAIL)
            peer = self._sessions[keys.local_index]
            return Received(Verdict.HANDSHAKE, replies=self._flush(self.peers[peer], now),
                            peer=peer)
        self.counters.drop(Verdict.MALFORMED)
        return Received(Verdict.MALFORMED)

    # -- timers

    def tick(self, now: float) -> list[Transmission]:
        out: list[Transmission] = []
        t = self.timers
        for peer in self.peers.values():
            s = peer.session
            if s is not None and now - s.established_at >= t.reject_after:
                self._sessions.pop(s.local_index, None)
                peer.session = s = None
            p = peer.pending
            if p is not None and now - p.sent_at >= t.rekey_timeout:
                if now - p.first_attempt < t.rekey_attempt_time:
                    out.append(self._init_tx(peer, now))
                else:
                    self._pending.pop(p.local_index, None)
                    peer.pending = None
                    peer.queue.clear()
            if s is None:
                continue
            if (s.initiator and peer.pending is None
                    and now - s.established_at >= t.rekey_after):
                out.append(self._init_tx(peer, now))
            ka = peer.stanza.persistent_keepalive
            if ka is not None and now - peer.last_tx >= ka:
                out.append(Transmission(peer.public_key, peer.stanza.endpoint,
                                        self._seal(peer, b"", now), "keepalive"))
        return out
