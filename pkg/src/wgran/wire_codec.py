"""Text codecs: WireGuard INI configs, topology files, CIDR math, key encoding.

Both file formats share one lexer.  Sections are ``[Name]`` lines (anything
after the closing bracket is treated as a comment), entries are
``Key = value`` and ``#`` starts a comment anywhere on a line.
"""

from __future__ import annotations

import base64
import binascii
import re
from dataclasses import dataclass, field
from ipaddress import AddressValueError, IPv4Address
from typing import Iterable, Optional

KEY_LEN = 32


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class MissingField(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class MalformedValue(ConfigError):
    pass


class DuplicatePeerKey(ConfigError):
    pass


class TopologyError(ConfigError):
    pass


class UnknownRole(TopologyError):
    pass


class DanglingLink(TopologyError):
    pass


class DuplicateNodeId(TopologyError):
    pass


# --------------------------------------------------------------------- CIDR

@dataclass(frozen=True, order=True)
class CidrBlock:
    address: IPv4Address
    prefix_len: int

    def __post_init__(self):
        if not 0 <= self.prefix_len <= 32:
            raise MalformedValue(f"prefix length {self.prefix_len} out of range")

    @classmethod
    def parse(cls, text: str) -> "CidrBlock":
        addr, sep, plen = text.strip().partition("/")
        try:
            address = IPv4Address(addr.strip())
        except AddressValueError as exc:
            raise MalformedValue(f"bad address {addr!r}") from exc
        if not sep:
            return cls(address, 32)
        if not plen.strip().isdigit():
            raise MalformedValue(f"bad prefix length {plen!r}")
        return cls(address, int(plen))

    @property
    def mask(self) -> int:
        return (0xFFFFFFFF << (32 - self.prefix_len)) & 0xFFFFFFFF

    @property
    def network(self) -> int:
        return int(self.address) & self.mask

    def normalized(self) -> "CidrBlock":
        return CidrBlock(IPv4Address(self.network), self.prefix_len)

    def contains(self, addr) -> bool:
        return cidr_contains(self, addr)

    def __str__(self) -> str:
        return f"{self.address}/{self.prefix_len}"


def cidr_contains(block: CidrBlock, addr) -> bool:
    """True iff the top ``prefix_len`` bits of ``addr`` match the block."""
    return (int(IPv4Address(addr)) & block.mask) == block.network


# --------------------------------------------------------------------- keys

def encode_key(raw: bytes) -> str:
    if len(raw) != KEY_LEN:
        raise MalformedValue(f"key must be {KEY_LEN} bytes, got {len(raw)}")
    return base64.b64encode(raw).decode("ascii")


def decode_key(text: str, line: Optional[int] = None) -> bytes:
    text = text.strip()
    # 32 bytes is always 44 chars with exactly one '=' of padding
    if len(text) != 44 or not text.endswith("=") or text.endswith("=="):
        raise MalformedValue(f"key {text!r} is not base64 of {KEY_LEN} bytes", line)
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedValue(f"key {text!r} is not valid base64", line) from exc
    if base64.b64encode(raw).decode("ascii") != text:
        # non-canonical trailing bits would alias another key
        raise MalformedValue(f"key {text!r} is not canonical base64", line)
    return raw


# -------------------------------------------------------------------- lexer

@dataclass
class Section:
    name: str
    line: int
    entries: list = field(default_factory=list)  # (key, value, line)


_SECTION_RE = re.compile(r"^\[([A-Za-z]+)\](.*)$")


def lex_ini(text: str) -> list[Section]:
    sections: list[Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(raw.strip())
        if m:
            sections.append(Section(m.group(1), lineno))
            continue
        if "=" not in line:
            raise MalformedValue(f"expected 'Key = value', got {line!r}", lineno)
        if not sections:
            raise MalformedValue("entry outside of any section", lineno)
        key, value = line.split("=", 1)
        sections[-1].entries.append((key.strip(), value.strip(), lineno))
    return sections


def _take(section: Section, allowed: set[str]) -> dict:
    out = {}
    for key, value, lineno in section.entries:
        if key not in allowed:
            raise UnknownKey(f"unknown key {key!r} in [{section.name}]", lineno)
        if key in out:
            raise MalformedValue(f"duplicate key {key!r} in [{section.name}]", lineno)
        out[key] = (value, lineno)
    return out


def _require(entries: dict, key: str, section: Section):
    if key not in entries:
        raise MissingField(f"[{section.name}] lacks {key}", section.line)
    return entries[key]


def _port(value: str, lineno: int) -> int:
    if not value.isdigit() or not 1 <= int(value) <= 65535:
        raise MalformedValue(f"port {value!r} out of range", lineno)
    return int(value)


# ----------------------------------------------------------- tunnel config

@dataclass(frozen=True)
class Endpoint:
    host: IPv4Address
    port: int

    @classmethod
    def parse(cls, text: str, lineno: Optional[int] = None) -> "Endpoint":
        host, sep, port = text.strip().rpartition(":")
        if not sep:
            raise MalformedValue(f"endpoint {text!r} lacks a port", lineno)
        try:
            addr = IPv4Address(host)
        except AddressValueError as exc:
            raise MalformedValue(f"bad endpoint host {host!r}", lineno) from exc
        return cls(addr, _port(port, lineno))

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class InterfaceStanza:
    private_key: bytes
    address: CidrBlock
    listen_port: int


@dataclass(frozen=True)
class PeerStanza:
    public_key: bytes
    allowed_ips: tuple[CidrBlock, ...]
    endpoint: Optional[Endpoint] = None
    persistent_keepalive: Optional[int] = None

    def __post_init__(self):
        if not self.allowed_ips:
            raise MissingField("peer has no AllowedIPs")
        if self.persistent_keepalive is not None and self.persistent_keepalive <= 0:
            raise MalformedValue("PersistentKeepalive must be > 0")


@dataclass(frozen=True)
class TunnelConfig:
    interface: InterfaceStanza
    peers: tuple[PeerStanza, ...]

    def __post_init__(self):
        if not self.peers:
            raise MissingField("config has no [Peer] section")
        check_unique_peers(self.peers)


def check_unique_peers(peers: Iterable[PeerStanza]) -> None:
    seen = set()
    for p in peers:
        if p.public_key in seen:
            raise DuplicatePeerKey(f"duplicate peer key {encode_key(p.public_key)}")
        seen.add(p.public_key)


_IFACE_KEYS = {"PrivateKey", "Address", "ListenPort"}
_PEER_KEYS = {"PublicKey", "Endpoint", "AllowedIPs", "PersistentKeepalive"}


def _cidr(value: str, lineno: int) -> CidrBlock:
    try:
        return CidrBlock.parse(value)
    except MalformedValue as exc:
        raise MalformedValue(str(exc), lineno) from None


def parse_wg_config(text: str) -> TunnelConfig:
    interface = None
    peers: list[PeerStanza] = []
    seen_keys: dict[bytes, int] = {}
    for sec in lex_ini(text):
        if sec.name == "Interface":
            if interface is not None:
                raise MalformedValue("second [Interface] section", sec.line)
            e = _take(sec, _IFACE_KEYS)
            key, kl = _require(e, "PrivateKey", sec)
            addr, al = _require(e, "Address", sec)
            port, pl = _require(e, "ListenPort", sec)
            interface = InterfaceStanza(decode_key(key, kl), _cidr(addr, al), _port(port, pl))
        elif sec.name == "Peer":
            e = _take(sec, _PEER_KEYS)
            key, kl = _require(e, "PublicKey", sec)
            allowed, al = _require(e, "AllowedIPs", sec)
            pub = decode_key(key, kl)
            if pub in seen_keys:
                raise DuplicatePeerKey(
                    f"peer key already used at line {seen_keys[pub]}", kl)
            seen_keys[pub] = kl
            blocks = tuple(_cidr(c, al).normalized() for c in allowed.split(",") if c.strip())
            if not blocks:
                raise MalformedValue("AllowedIPs is empty", al)
            endpoint = None
            if "Endpoint" in e:
                endpoint = Endpoint.parse(*e["Endpoint"])
            keepalive = None
            if "PersistentKeepalive" in e:
                v, vl = e["PersistentKeepalive"]
                if not v.isdigit() or int(v) <= 0:
                    raise MalformedValue(f"PersistentKeepalive {v!r} must be > 0", vl)
                keepalive = int(v)
            peers.append(PeerStanza(pub, blocks, endpoint, keepalive))
        else:
            raise UnknownKey(f"unknown section [{sec.name}]", sec.line)
    if interface is None:
        raise MissingField("no [Interface] section")
    if not peers:
        raise MissingField("no [Peer] section")
    return TunnelConfig(interface, tuple(peers))


def serialize_wg_config(cfg: TunnelConfig) -> str:
    lines = [
        "[Interface]",
        f"PrivateKey = {encode_key(cfg.interface.private_key)}",
        f"Address = {cfg.interface.address}",
        f"ListenPort = {cfg.interface.listen_port}",
    ]
    for peer in cfg.peers:
        lines += ["", "[Peer]", f"PublicKey = {encode_key(peer.public_key)}"]
        if peer.endpoint is not None:
            lines.append(f"Endpoint = {peer.endpoint}")
        lines.append("AllowedIPs = " + ", ".join(str(c) for c in peer.allowed_ips))
        if peer.persistent_keepalive is not None:
            lines.append(f"PersistentKeepalive = {peer.persistent_keepalive}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- topology

ROLES = ("ue", "gnb", "upf", "amf", "server", "gateway")
TRUST = ("trusted", "untrusted", "rogue")

_UNITS = {"": 1.0, "k": 1e3, "K": 1e3, "M": 1e6, "G": 1e9}
_TIME_UNITS = {"": 1.0, "s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}
_NUM_RE = re.compile(r"^([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)$")


def parse_rate(text: str, lineno: Optional[int] = None) -> float:
    """``600M``, ``600Mbps``, ``6e8`` -> bits per second."""
    m = _NUM_RE.match(text.strip())
    unit = m.group(2).removesuffix("bps") if m else None
    if not m or unit not in _UNITS:
        raise MalformedValue(f"bad rate {text!r}", lineno)
    value = float(m.group(1)) * _UNITS[unit]
    if value <= 0:
        raise MalformedValue(f"rate must be > 0, got {text!r}", lineno)
    return value


def parse_duration(text: str, lineno: Optional[int] = None) -> float:
    """``3.9ms`` -> seconds."""
    m = _NUM_RE.match(text.strip())
    if not m or m.group(2) not in _TIME_UNITS:
        raise MalformedValue(f"bad duration {text!r}", lineno)
    return float(m.group(1)) * _TIME_UNITS[m.group(2)]


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: str
    trust: str = "trusted"
    address: Optional[IPv4Address] = None
    config: Optional[str] = None


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    rate_ab: float = 10e9
    rate_ba: float = 10e9
    delay: float = 0.0
    jitter: float = 0.0
    mtu: int = 1500
    loss: float = 0.0
    name: Optional[str] = None
    fragment_cost: str = "slot"

    @property
    def key(self) -> str:
        return self.name or f"{self.a}-{self.b}"


@dataclass(frozen=True)
class TopologyConfig:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def by_role(self, role: str) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role == role]

    def link_between(self, a: str, b: str) -> LinkSpec:
        for link in self.links:
            if {link.a, link.b} == {a, b}:
                return link
        raise KeyError((a, b))


_NODE_KEYS = {"Id", "Role", "Trust", "Address", "Config"}
_LINK_KEYS = {"Name", "A", "B", "RateAB", "RateBA", "Delay", "Jitter", "Mtu", "Loss",
              "FragmentCost"}
FRAGMENT_COSTS = ("slot", "bytes")


def parse_topology(text: str) -> TopologyConfig:
    nodes: dict[str, NodeSpec] = {}
    links: list[tuple[LinkSpec, int]] = []
    for sec in lex_ini(text):
        if sec.name == "Node":
            e = _take(sec, _NODE_KEYS)
            node_id, il = _require(e, "Id", sec)
            role, rl = _require(e, "Role", sec)
            if role not in ROLES:
                raise UnknownRole(f"unknown role {role!r}", rl)
            trust = e.get("Trust", ("trusted", None))
            if trust[0] not in TRUST:
                raise MalformedValue(f"unknown trust level {trust[0]!r}", trust[1])
            if node_id in nodes:
                raise DuplicateNodeId(f"duplicate node id {node_id!r}", il)
            addr = None
            if "Address" in e:
                a, al = e["Address"]
                try:
                    addr = IPv4Address(a)
                except AddressValueError:
                    raise MalformedValue(f"bad address {a!r}", al) from None
            cfg = e["Config"][0] if "Config" in e else None
            nodes[node_id] = NodeSpec(node_id, role, trust[0], addr, cfg)
        elif sec.name == "Link":
            e = _take(sec, _LINK_KEYS)
            a, _ = _require(e, "A", sec)
            b, _ = _require(e, "B", sec)
            kw = {}
            for key, attr, conv in (
                ("RateAB", "rate_ab", parse_rate), ("RateBA", "rate_ba", parse_rate),
                ("Delay", "delay", parse_duration), ("Jitter", "jitter", parse_duration),
            ):
                if key in e:
                    kw[attr] = conv(*e[key])
            if "Mtu" in e:
                v, vl = e["Mtu"]
                if not v.isdigit() or int(v) < 68:
                    raise MalformedValue(f"mtu {v!r} must be an integer >= 68", vl)
                kw["mtu"] = int(v)
            if "Loss" in e:
                v, vl = e["Loss"]
                try:
                    loss = float(v)
                except ValueError:
                    loss = -1.0
                if not 0.0 <= loss <= 1.0:
                    raise MalformedValue(f"loss {v!r} not a probability", vl)
                kw["loss"] = loss
            if "Name" in e:
                kw["name"] = e["Name"][0]
            if "FragmentCost" in e:
                v, vl = e["FragmentCost"]
                if v not in FRAGMENT_COSTS:
                    raise MalformedValue(f"FragmentCost must be one of {FRAGMENT_COSTS}", vl)
                kw["fragment_cost"] = v
            links.append((LinkSpec(a, b, **kw), sec.line))
        else:
            raise UnknownKey(f"unknown section [{sec.name}]", sec.line)
    for link, line in links:
        for end in (link.a, link.b):
            if end not in nodes:
                raise DanglingLink(f"link references unknown node {end!r}", line)
    return TopologyConfig(tuple(nodes.values()), tuple(link for link, _ in links))


def serialize_topology(topo: TopologyConfig) -> str:
    out = []
    for n in topo.nodes:
        out += ["[Node]", f"Id = {n.id}", f"Role = {n.role}", f"Trust = {n.trust}"]
        if n.address is not None:
            out.append(f"Address = {n.address}")
        if n.config is not None:
            out.append(f"Config = {n.config}")
        out.append("")
    for link in topo.links:
        out += ["[Link]"]
        if link.name:
            out.append(f"Name = {link.name}")
        out += [f"A = {link.a}", f"B = {link.b}",
                f"RateAB = {link.rate_ab!r}", f"RateBA = {link.rate_ba!r}",
                f"Delay = {link.delay!r}", f"Jitter = {link.jitter!r}",
                f"Mtu = {link.mtu}", f"Loss = {link.loss!r}",
                f"FragmentCost = {link.fragment_cost}", ""]
    return "\n".join(out)
