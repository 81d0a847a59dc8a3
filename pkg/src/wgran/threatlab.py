"""Executable threat scenarios T1..T6.

Each scenario builds a fresh deployment from the seed, drives an attack and
returns a :class:`ScenarioVerdict` whose evidence is plain counters plus a
digest of any captured bytes, so two runs with one seed compare equal.

====  ===========================================  =====================
id    attack                                       requirement
====  ===========================================  =====================
T1    untrusted gNB reads user traffic             UP confidentiality
T2    on-path bit flips on N3                      UP integrity
T3    rogue gNB signals the AMF                    N2 authentication
T4    captured N3 frame re-injected 100 times      replay protection
T5    whitelisted gNB revoked mid-run              rapid revocation
T6    compromised partner probes the factory       tenant isolation
====  ===========================================  =====================
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

from .core import PROTO_SCTP, NGAP_PORT, SINK_PORT, InnerPacket, ip
from .crypto_tunnel import Transmission
from .ran import (
    MODES, NG_SETUP_REQUEST, BulkSender, Deployment, GnbNode, N2Unavailable, NgapMessage,
    PingClient, Sink, UeNode, build_deployment,
)
from .wire_codec import TopologyConfig, TopologyError

SCENARIOS = ("T1", "T2", "T3", "T4", "T5", "T6")
ENTROPY_THRESHOLD = 7.5


class TopologyMismatch(TopologyError):
    pass


@dataclass
class ScenarioVerdict:
    scenario: str
    mode: str
    seed: int
    n2gate: bool
    passed: bool
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def expected(self) -> bool:
        return expected_pass(self.scenario, self.mode, self.n2gate)


REQUIREMENTS = {
    "user-plane confidentiality": ("T1",),
    "user-plane integrity": ("T2",),
    "replay protection": ("T4",),
    "gNB authentication on N2": ("T3",),
    "rapid gNB revocation": ("T5",),
    "least-privilege tunnel reachability": ("T6",),
}

TRACEABILITY = [
    ("T1", "user-plane confidentiality",
     "no marker in any untrusted-gNB record and record entropy > 7.5 bits/byte"),
    ("T2", "user-plane integrity",
     "corrupted deliveries = 0 and auth_fail = tampered frames"),
    ("T3", "gNB authentication on N2",
     "rogue signalling rejected before NGAP, zero NAS handling, zero reply bytes"),
    ("T4", "replay protection", "replay verdicts = 100 and the captured payload delivered once"),
    ("T5", "rapid gNB revocation", "NGAP from the revoked gNB after revocation = 0"),
    ("T6", "least-privilege tunnel reachability",
     "every probe ends in no_route or source_invalid; nothing reaches internal hosts"),
]


def expected_pass(scenario: str, mode: str, n2gate: Optional[bool] = None) -> bool:
    """Outcome the design predicts for one cell of the matrix."""
    if n2gate is None:
        n2gate = mode != "baseline"
    if mode == "baseline":
        return False
    if scenario in ("T3", "T5"):
        return n2gate
    if mode == "ipsec" and scenario == "T6":
        return False  # ESP selectors do not validate inner sources
    return True


def byte_entropy(data: bytes) -> float:
    if not data:
        return 0.0
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in Counter(data).values())


def _digest(chunks: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(struct.pack("!I", len(c)))
        h.update(c)
    return h.hexdigest()


def _served_ue(dep: Deployment, trust: Optional[str] = None) -> tuple[UeNode, GnbNode]:
    for ue in dep.ues:
        if ue.state != "registered":
            continue
        gnb = dep.node(ue.serving)
        if trust is None or gnb.trust == trust:
            return ue, gnb
    raise TopologyMismatch(f"no registered UE behind a {trust or 'any'} gNB")


def _remote(dep: Deployment) -> object:
    """Where UE traffic goes: the server's app address."""
    return dep.app_address(dep.server)


def _warm(dep: Deployment, ue: UeNode) -> None:
    """Bring the user-plane tunnel up so no test packet waits in a handshake queue."""
    PingClient(ue, dep.app_address(ue), _remote(dep), port=40999).ping(0)
    dep.run_for(0.2)


# ----------------------------------------------------------------- T1

def _t1(dep: Deployment, seed: int) -> tuple[bool, dict]:
    ue, gnb = _served_ue(dep, "untrusted")
    gnb.records.clear()
    _warm(dep, ue)
    gnb.records.clear()
    markers = [f"MARKER-{seed}-{i:04d}".encode() for i in range(64)]

    def body(i: int) -> bytes:
        m = struct.pack("!Q", i) + markers[i]
        return m + bytes((j * 131 + i) & 0xFF for j in range(1000 - len(m)))

    sender = BulkSender(ue, dep.app_address(ue), _remote(dep), 1000, len(markers), 2e-3, body=body)
    sender.start(dep.sim.t)
    dep.run_for(0.5)
    blob = b"".join(r.data for r in gnb.records)
    seen = sorted({m.decode() for m in markers if m in blob})
    entropy = byte_entropy(blob)
    ev = {
        "records": len(gnb.records),
        "markers_sent": len(markers),
        "markers_seen": len(seen),
        "entropy_bits_per_byte": round(entropy, 4),
        "record_digest": _digest(r.data for r in gnb.records),
    }
    return (len(gnb.records) > 0 and not seen and entropy > ENTROPY_THRESHOLD), ev


# ----------------------------------------------------------------- T2

def _n3_link(dep: Deployment, gnb: GnbNode):
    return gnb.links[dep.upf.id]


def _upf_side_counters(dep: Deployment):
    hub = dep.hub
    return hub.tunnel.counters.drops if hub.tunnel is not None else Counter()


def _t2(dep: Deployment, seed: int) -> tuple[bool, dict]:
    ue, gnb = _served_ue(dep)
    link = _n3_link(dep, gnb)
    uplink = link.direction_from(gnb.id)
    rng = dep.sim.spawn_rng()
    state = {"active": False, "tampered": 0}

    def flip(data: bytes, direction: int, now: int) -> list[bytes]:
        if not state["active"] or direction != uplink or rng.random() >= 0.01:
            return [data]
        tail = min(48, len(data) - 28)
        pos = len(data) - 1 - int(rng.integers(tail))
        out = bytearray(data)
        out[pos] ^= 1 << int(rng.integers(8))
        state["tampered"] += 1
        return [bytes(out)]

    link.attach_interposer(flip)
    _warm(dep, ue)
    sink = Sink(keep=True)
    dep.server.services[SINK_PORT] = sink
    sender = BulkSender(ue, dep.app_address(ue), _remote(dep), 200, 2000, 1e-3)
    expected = {sender.payload(i) for i in range(sender.count)}
    state["active"] = True
    sender.start(dep.sim.t)
    dep.run_for(2.5)
    state["active"] = False
    corrupted = sum(1 for p in sink.payloads if p not in expected)
    auth_fail = _upf_side_counters(dep).get("auth_fail", 0)
    ev = {
        "sent": sender.count,
        "delivered": sink.count,
        "tampered": state["tampered"],
        "corrupted_deliveries": corrupted,
        "auth_fail": auth_fail,
    }
    return (state["tampered"] > 0 and corrupted == 0 and auth_fail == state["tampered"]), ev


# ----------------------------------------------------------------- T3

def _t3(dep: Deployment, seed: int) -> tuple[bool, dict]:
    rogues = [g for g in dep.gnbs if g.trust == "rogue"]
    if not rogues:
        raise TopologyMismatch("T3 needs a rogue gNB")
    rogue = rogues[0]
    amf = dep.amf
    victim_id = next((g.id for g in dep.gnbs if g.trust != "rogue"), rogue.id)
    forged = NgapMessage(NG_SETUP_REQUEST, victim_id, 1)
    rogue.send(InnerPacket(rogue.outer_address, amf.outer_address, NGAP_PORT, NGAP_PORT,
                           forged.to_bytes(), PROTO_SCTP).encode())
    dep.run_for(0.05)
    ue = next((u for u in dep.ues if rogue.id in u.links), None)
    attach = "no-ue"
    if ue is not None:
        try:
            dep.attach(ue.id, rogue.id, timeout=1.0)
            attach = "registered"
        except N2Unavailable:
            attach = "n2-unavailable"
    dep.run_for(0.1)
    src = str(rogue.outer_address)
    gate = dep.gate
    rejects = amf.pre_ngap_reject + (gate.pre_ngap_reject if gate else 0)
    ev = {
        "pre_ngap_reject": rejects,
        "ngap_processed_from_rogue": amf.processed_by_src.get(src, 0),
        "nas_processed_from_rogue": amf.nas_by_src.get(src, 0),
        "rogue_rx_bytes": rogue.n2_rx_bytes,
        "handshakes_ignored": gate.ignored if gate else 0,
        "rogue_attach": attach,
    }
    ok = (rejects >= 1 and ev["ngap_processed_from_rogue"] == 0
          and ev["nas_processed_from_rogue"] == 0 and rogue.n2_rx_bytes == 0
          and attach != "registered")
    return ok, ev


# ----------------------------------------------------------------- T4

def _t4(dep: Deployment, seed: int) -> tuple[bool, dict]:
    ue, gnb = _served_ue(dep)
    link = _n3_link(dep, gnb)
    uplink = link.direction_from(gnb.id)
    _warm(dep, ue)
    captured: list[bytes] = []

    def tap(obs) -> None:
        if not captured and obs.direction == uplink and len(obs.data) > 500:
            captured.append(obs.data)

    handle = link.attach_tap(tap)
    sink = Sink(keep=True)
    dep.server.services[SINK_PORT] = sink
    sender = BulkSender(ue, dep.app_address(ue), _remote(dep), 500, 20, 1e-3)
    sender.start(dep.sim.t)
    dep.run_for(0.1)
    handle.detach()
    if not captured:
        raise TopologyMismatch("no uplink data frame observed on N3")
    replay_before = _upf_side_counters(dep).get("replay", 0)
    for i in range(100):
        link.inject(captured[0], gnb.id, at=dep.sim.t + 1e-3 * (i + 1))
    dep.run_for(0.3)
    replays = _upf_side_counters(dep).get("replay", 0) - replay_before
    counts = Counter(sink.payloads)
    deliveries = max(counts.values()) if counts else 0
    ev = {
        "injected": 100,
        "replay_verdicts": replays,
        "max_deliveries_per_payload": deliveries,
        "delivered": sink.count,
        "captured_digest": hashlib.sha256(captured[0]).hexdigest(),
    }
    return (replays == 100 and deliveries == 1), ev


# ----------------------------------------------------------------- T5

def _t5(dep: Deployment, seed: int) -> tuple[bool, dict]:
    candidates = [g for g in dep.gnbs if g.trust == "trusted"] or \
                 [g for g in dep.gnbs if g.trust != "rogue"]
    if not candidates:
        raise TopologyMismatch("T5 needs a whitelisted gNB")
    target = candidates[-1]
    amf = dep.amf
    start_ns = dep.sim.now
    for i in range(20):
        dep.sim.call_in(0.05 * (i + 1), target.send_ngap, NG_SETUP_REQUEST)
    revoked = {"at": None, "supported": dep.gate is not None}

    def revoke() -> None:
        revoked["at"] = dep.sim.now
        if dep.gate is not None:
            dep.gate.revoke(dep.n2_keys[target.id].public)

    dep.sim.call_in(0.5 + 0.025, revoke)
    dep.run_for(1.5)
    t_r = revoked["at"]
    mine = [t for t, _, _, gid in amf.ngap_log if gid == target.id and t >= start_ns]
    before = sum(1 for t in mine if t < t_r)
    after = sum(1 for t in mine if t > t_r)
    ev = {
        "ngap_before_revocation": before,
        "ngap_after_revocation": after,
        "messages_sent": target.ngap_sent,
        "pre_ngap_reject": (dep.gate.pre_ngap_reject if dep.gate else 0) + amf.pre_ngap_reject,
        "whitelist_version": dep.gate.whitelist.version if dep.gate else None,
        "revocation_supported": revoked["supported"],
    }
    return (before > 0 and after == 0), ev


# ----------------------------------------------------------------- T6

def _t6(dep: Deployment, seed: int) -> tuple[bool, dict]:
    if not dep.internal_hosts:
        raise TopologyMismatch("T6 needs an internal host behind N6")
    ue, _ = _served_ue(dep)
    partner = dep.server
    _warm(dep, ue)
    sinks = {}
    for host in dep.internal_hosts + [dep.upf]:
        sinks[host.id] = host.services[SINK_PORT] = Sink()
    ue_sink = ue.services[SINK_PORT] = Sink()
    src = dep.app_address(partner)
    targets = [h.outer_address for h in dep.internal_hosts]
    targets += [dep.upf.outer_address, dep.amf.outer_address, ip("10.10.11.200")]
    for dst in targets:
        partner.send_inner(InnerPacket(src, dst, 40100, SINK_PORT, b"probe"))
    spoof = InnerPacket(dep.internal_hosts[0].outer_address, dep.app_address(ue), 40100,
                        SINK_PORT, b"spoofed")
    _send_spoofed(dep, partner, ue, spoof)
    dep.run_for(0.3)
    reached = sum(s.count for s in sinks.values()) + dep.amf.unhandled
    ue_spoofed = ue_sink.count
    source_invalid = ue.verdicts.get("source_invalid", 0)
    ev = {
        "probes": len(targets) + 1,
        "no_route": partner.no_route,
        "source_invalid": source_invalid,
        "internal_reached": reached,
        "spoofed_delivered_to_ue": ue_spoofed,
    }
    ok = reached == 0 and ue_spoofed == 0 and partner.no_route + source_invalid == len(targets) + 1
    return ok, ev


def _send_spoofed(dep: Deployment, partner, ue: UeNode, inner: InnerPacket) -> None:
    """A compromised partner forges an inner source inside its own valid session."""
    port = partner.tunnel
    if port is None:
        partner.send(inner.encode())
        return
    impl = port.impl
    now = dep.sim.t
    if port.kind == "wireguard":
        key = impl.routes.lookup(inner.dst)
        state = impl.peers[key]
        msg = impl._seal(state, inner.encode(), now)
        port.emit([Transmission(key, state.stanza.endpoint, msg, "data")])
    else:
        peer = impl.peers[ue.id]
        port.emit([impl._seal(peer, inner)])


_RUNNERS: dict[str, Callable] = {"T1": _t1, "T2": _t2, "T3": _t3, "T4": _t4, "T5": _t5, "T6": _t6}
_SCENARIO_PLANE = {"T1": 2, "T2": 2, "T3": 2, "T4": 2, "T5": 2, "T6": 1}


def run_scenario(scenario: str, mode: str, seed: int, topology: Optional[TopologyConfig] = None,
                 n2gate: Optional[bool] = None, plane: Optional[int] = None) -> ScenarioVerdict:
    """Run one threat scenario; ``plane`` overrides the user-plane layout (1 or 2)."""
    if scenario not in _RUNNERS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if n2gate is None:
        n2gate = mode != "baseline"
    try:
        dep = build_deployment(topology, mode, seed, scenario=plane or _SCENARIO_PLANE[scenario],
                               n2gate=n2gate)
    except N2Unavailable as exc:
        raise TopologyMismatch(str(exc)) from exc
    passed, evidence = _RUNNERS[scenario](dep, seed)
    evidence["trace_events"] = dep.sim._events
    return ScenarioVerdict(scenario, mode, seed, n2gate, bool(passed), evidence)


def parse_scenarios(text: str) -> list[str]:
    """Accepts ``T3``, ``T1,T4`` and ranges such as ``T1..T6``."""
    out: list[str] = []
    for part in text.split(","):
        part = part.strip().upper()
        if ".." in part:
            lo, hi = part.split("..")
            if lo not in SCENARIOS or hi not in SCENARIOS:
                raise ValueError(f"unknown scenario range {part!r}")
            out += list(SCENARIOS[SCENARIOS.index(lo):SCENARIOS.index(hi) + 1])
        elif part in SCENARIOS:
            out.append(part)
        else:
            raise ValueError(f"unknown scenario {part!r}")
    return out


def summary_table(verdicts: list[ScenarioVerdict]) -> str:
    rows = [("scenario", "mode", "n2gate", "seed", "result", "expected")]
    for v in verdicts:
        rows.append((v.scenario, v.mode, "on" if v.n2gate else "off", str(v.seed),
                     "pass" if v.passed else "fail", "pass" if v.expected else "fail"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def traceability_markdown() -> str:
    lines = ["| scenario | requirement | pass condition |", "|---|---|---|"]
    lines += [f"| {s} | {r} | {c} |" for s, r, c in TRACEABILITY]
    return "\n".join(lines) + "\n"
