from ipaddress import IPv4Address

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wgran.core import NGAP_PORT, PROTO_SCTP, WG_PORT, InnerPacket, udp_datagram
from wgran.crypto_tunnel import INIT_LEN, RESP_LEN, TunnelEngine, keygen
from wgran.n2gate import KeyNotFound, N2Gate, parse_whitelist, serialize_whitelist
from wgran.ran import NG_SETUP_REQUEST, N2Unavailable, NgapMessage, build_deployment
from wgran.wire_codec import CidrBlock, Endpoint, MalformedValue, PeerStanza

GATE_OUTER, GNB_OUTER, ROGUE_OUTER = (IPv4Address("192.168.70.132"),
                                      IPv4Address("192.168.70.150"),
                                      IPv4Address("192.168.70.199"))
GATE_TUN, GNB_TUN = IPv4Address("10.20.0.1"), IPv4Address("10.20.0.10")


class Lab:
    """A gate plus one whitelisted gNB engine and one rogue engine."""

    def __init__(self, seed=0, enforce=True):
        rng = np.random.default_rng(seed)
        self.gate_kp, self.gnb_kp, self.rogue_kp = keygen(rng), keygen(rng), keygen(rng)
        self.stanza = PeerStanza(self.gnb_kp.public, (CidrBlock(GNB_TUN, 32),),
                                 Endpoint(GNB_OUTER, WG_PORT))
        self.gate = N2Gate(self.gate_kp, [self.stanza], np.random.default_rng(seed + 1),
                           enforce=enforce)
        gate_peer = PeerStanza(self.gate_kp.public, (CidrBlock(GATE_TUN, 32),),
                               Endpoint(GATE_OUTER, WG_PORT))
        self.gnb = TunnelEngine(self.gnb_kp, [gate_peer], np.random.default_rng(seed + 2))
        self.rogue = TunnelEngine(self.rogue_kp, [gate_peer], np.random.default_rng(seed + 3))
        self.now = 0.0
        self.reply_bytes = {GNB_OUTER: 0, ROGUE_OUTER: 0}
        self.results = []

    def ngap(self, src=GNB_TUN, txn=1):
        return InnerPacket(src, GATE_TUN, NGAP_PORT, NGAP_PORT,
                           NgapMessage(NG_SETUP_REQUEST, "g", txn).to_bytes(), PROTO_SCTP)

    def push(self, engine, outer, inner):
        """Send ``inner`` through ``engine`` and pump the exchange to quiescence."""
        pending = engine.encrypt_outbound(inner, self.now)
        while pending:
            tx = pending.pop(0)
            f = self.gate.filter_n2(udp_datagram(outer, WG_PORT, GATE_OUTER, WG_PORT, tx.message),
                                    self.now)
            self.results.append(f)
            for reply in f.replies:
                self.reply_bytes[outer] += len(reply)
                pending += engine.receive(reply, Endpoint(GATE_OUTER, WG_PORT), self.now).replies
        return self.results


def test_admit_whitelisted_and_ignore_rogue():
    lab = Lab()
    init = lab.gnb.initiate_handshake(lab.gate_kp.public, 0.0)
    adm = lab.gate.admit(init, 0.0)
    assert adm.accepted and adm.peer == lab.gnb_kp.public and len(adm.reply) == RESP_LEN
    rogue_init = lab.rogue.initiate_handshake(lab.gate_kp.public, 0.0).to_bytes()
    assert len(rogue_init) == INIT_LEN
    adm = lab.gate.admit(rogue_init, 0.0)
    assert not adm.accepted and adm.reply is None and lab.gate.ignored == 1
    assert not lab.gate.admit(b"\x01short", 0.0).accepted


def test_forward_only_tunnelled_ngap():
    lab = Lab()
    lab.push(lab.gnb, GNB_OUTER, lab.ngap())
    actions = [f.action for f in lab.results]
    assert actions == ["handshake", "forward"]
    fwd = lab.results[-1]
    assert fwd.via_tunnel and fwd.peer == lab.gnb_kp.public and fwd.packet.dport == NGAP_PORT
    assert lab.gate.forwarded == 1 and lab.gate.pre_ngap_reject == 0


def test_rogue_gets_zero_reply_bytes():
    lab = Lab()
    for i in range(5):
        lab.now += 6.0  # step past the handshake retry spacing
        lab.push(lab.rogue, ROGUE_OUTER, lab.ngap(txn=i))
    assert {f.action for f in lab.results} == {"ignore"}
    assert lab.reply_bytes[ROGUE_OUTER] == 0 and lab.gate.forwarded == 0


def test_raw_sctp_dropped_before_ngap():
    lab = Lab()
    raw = udp_datagram(ROGUE_OUTER, NGAP_PORT, GATE_OUTER, NGAP_PORT,
                       NgapMessage(NG_SETUP_REQUEST, "x", 1).to_bytes(), PROTO_SCTP)
    f = lab.gate.filter_n2(raw, 0.0)
    assert f.action == "drop" and f.packet is None and lab.gate.pre_ngap_reject == 1
    open_gate = Lab(enforce=False).gate
    f = open_gate.filter_n2(raw, 0.0)
    assert f.action == "forward" and not f.via_tunnel


def test_tunnelled_non_ngap_dropped():
    lab = Lab()
    lab.push(lab.gnb, GNB_OUTER, InnerPacket(GNB_TUN, GATE_TUN, 1, 7, b"not n2"))
    assert lab.results[-1].action == "drop" and lab.gate.pre_ngap_reject == 1


def test_other_ports_and_garbage_dropped():
    lab = Lab()
    f = lab.gate.filter_n2(udp_datagram(GNB_OUTER, 1, GATE_OUTER, 9, b"x"), 0.0)
    assert f.action == "drop"
    f = lab.gate.filter_n2(udp_datagram(GNB_OUTER, WG_PORT, GATE_OUTER, WG_PORT, b"\x04junk"),
                           0.0)
    assert f.action == "drop"


def test_revoke_then_readd():
    lab = Lab()
    lab.push(lab.gnb, GNB_OUTER, lab.ngap())
    wl = lab.gate.revoke(lab.gnb_kp.public)
    assert wl.version == 1 and lab.gnb_kp.public not in wl
    lab.push(lab.gnb, GNB_OUTER, lab.ngap(txn=2))
    assert lab.results[-1].action == "drop"
    with pytest.raises(KeyNotFound):
        lab.gate.revoke(lab.gnb_kp.public)
    wl = lab.gate.add(lab.stanza)
    assert wl.version == 2 and lab.gnb_kp.public in wl
    # the gNB still holds its old session; a fresh handshake is needed
    lab.now += 181.0
    lab.push(lab.gnb, GNB_OUTER, lab.ngap(txn=3))
    assert [f.action for f in lab.results[-2:]] == ["handshake", "forward"]
    assert lab.gate.forward_log[-1] == (lab.gnb_kp.public, 2)


def test_whitelist_roundtrip_and_duplicates():
    rng = np.random.default_rng(5)
    entries = [(keygen(rng).public, f"gnb{i}") for i in range(4)] + [(keygen(rng).public, "")]
    text = "# gNB whitelist\n\n" + serialize_whitelist(entries)
    assert parse_whitelist(text) == entries
    assert parse_whitelist(serialize_whitelist(entries)) == entries
    with pytest.raises(MalformedValue):
        parse_whitelist(serialize_whitelist(entries + [(entries[0][0], "again")]))
    with pytest.raises(MalformedValue) as exc:
        parse_whitelist("# header\nnot-a-key\n")
    assert exc.value.line == 2


ops = st.lists(st.sampled_from(["gnb", "rogue", "raw", "revoke", "add", "wait"]), max_size=25)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_soundness_forward_log(seq):
    lab = Lab(seed=9)
    history = {0: lab.gate.whitelist}
    for i, op in enumerate(seq):
        lab.now += 1.0
        if op == "gnb":
            lab.push(lab.gnb, GNB_OUTER, lab.ngap(txn=i))
        elif op == "rogue":
            lab.push(lab.rogue, ROGUE_OUTER, lab.ngap(txn=i))
        elif op == "raw":
            lab.gate.filter_n2(udp_datagram(ROGUE_OUTER, NGAP_PORT, GATE_OUTER, NGAP_PORT,
                                            lab.ngap(txn=i).payload, PROTO_SCTP), lab.now)
        elif op == "revoke" and lab.gnb_kp.public in lab.gate.whitelist:
            wl = lab.gate.revoke(lab.gnb_kp.public)
            history[wl.version] = wl
        elif op == "add":
            wl = lab.gate.add(lab.stanza)
            history[wl.version] = wl
        elif op == "wait":
            lab.now += 200.0
    for key, version in lab.gate.forward_log:
        assert key in history[version]
    assert lab.reply_bytes[ROGUE_OUTER] == 0
    assert all(k != lab.rogue_kp.public for k, _ in lab.gate.forward_log)


@pytest.mark.parametrize("seed", range(3))
def test_completeness_in_deployment(seed):
    dep = build_deployment(mode="wireguard", seed=seed)
    with pytest.raises(N2Unavailable):
        dep.attach("ue2")
    dep.run_for(1.0)
    assert dep.amf.processed == dep.gate.forwarded > 0
    rogue_key = dep.n2_keys["rogue"].public
    assert all(k != rogue_key for k, _ in dep.gate.forward_log)
