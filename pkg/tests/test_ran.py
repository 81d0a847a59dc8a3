from collections import Counter
from ipaddress import IPv4Address

import pytest
from hypothesis import given, settings, strategies as st

from wgran.core import ECHO_PORT, SINK_PORT, InnerPacket
from wgran.ran import (
    DEFAULT_TOPOLOGY, INITIAL_UE_MESSAGE, NG_SETUP_REQUEST, NG_SETUP_RESPONSE, NGAP_REJECT,
    REGISTRATION_ACCEPT, TUNNEL_NET, UE_POOL, AddressPool, AddressPoolExhausted, BulkSender,
    N2Unavailable, NgapMessage, PingClient, Sink, UnknownTeid, amf_handle_ngap,
    build_deployment, gnb_forward, gtp_decap, gtp_encap,
)
from wgran.wire_codec import parse_topology


def crowded(n_extra: int) -> str:
    extra = []
    for i in range(n_extra):
        extra.append(f"[Node]\nId = ux{i}\nRole = ue\n\n[Link]\nA = ux{i}\nB = gnb1\n"
                     f"RateAB = 60M\nRateBA = 600M\nDelay = 3.5ms\nMtu = 1440\n")
    return DEFAULT_TOPOLOGY + "\n" + "\n".join(extra)


def test_first_ue_gets_pool_start():
    dep = build_deployment(mode="wireguard", seed=0)
    ue1, ue2 = dep.node("ue1"), dep.node("ue2")
    assert ue1.session.address == IPv4Address("12.1.1.2")
    assert ue2.state == "idle"  # served only by the rogue gNB


def test_rogue_attach_blocked_by_gate():
    dep = build_deployment(mode="wireguard", seed=0)
    before = dep.amf.processed
    with pytest.raises(N2Unavailable):
        dep.attach("ue2")
    assert dep.amf.processed == before
    rogue = dep.node("rogue")
    assert rogue.n2_rx_bytes == 0


def test_rogue_attach_succeeds_without_gate():
    dep = build_deployment(mode="baseline", seed=0)
    session = dep.attach("ue2")
    assert session.address == IPv4Address("12.1.1.3")


def test_pool_exhaustion_end_to_end():
    dep = build_deployment(mode="baseline", seed=0)
    dep.amf.pool._free.clear()
    with pytest.raises(AddressPoolExhausted):
        dep.attach("ue2")


def test_pool_253_then_exhausted():
    pool = AddressPool()
    got = [pool.allocate(f"u{i}") for i in range(253)]
    assert got[0] == IPv4Address("12.1.1.2") and got[-1] == IPv4Address("12.1.1.254")
    assert len(set(got)) == 253
    with pytest.raises(AddressPoolExhausted):
        pool.allocate("u253")
    assert pool.allocate("u7") == got[7]  # re-attach keeps the address
    pool.release("u7")
    assert pool.allocate("late") == got[7]


@given(st.integers(0, 2**32 - 1), st.binary(max_size=1500))
def test_gtp_roundtrip(teid, data):
    assert gtp_decap(gtp_encap(teid, data)) == (teid, data)


@pytest.mark.parametrize("raw", [b"", b"\x30\xff\x00", bytes(8), gtp_encap(1, b"ab")[:-1]])
def test_gtp_bad_header(raw):
    with pytest.raises(ValueError):
        gtp_decap(raw)


def test_gnb_forward_unknown_teid():
    dep = build_deployment(mode="baseline", seed=0)
    gnb = dep.node("gnb1")
    from wgran.core import GTPU_PORT, udp_datagram
    dl = udp_datagram(dep.upf.outer_address, GTPU_PORT, gnb.outer_address, GTPU_PORT,
                      gtp_encap(0xDEAD, bytes(28)))
    with pytest.raises(UnknownTeid):
        gnb_forward(gnb, "dl", dl)
    with pytest.raises(UnknownTeid):
        gnb_forward(gnb, "ul", bytes(28), "nobody")


def test_gnb_forward_roundtrip_and_record():
    dep = build_deployment(mode="baseline", seed=0)
    gnb, ue = dep.node("gnb1"), dep.node("ue1")
    pkt = InnerPacket(ue.session.address, "10.1.1.3", 1, 2, b"hello").encode()
    out, ue_id, rec = gnb_forward(gnb, "ul", pkt, "ue1")
    assert ue_id == "ue1" and rec.data == pkt and rec.direction == "ul"
    back, ue_id, _ = gnb_forward(gnb, "dl", out)
    assert back == pkt and ue_id == "ue1"


kinds = st.sampled_from([NG_SETUP_REQUEST, NG_SETUP_RESPONSE, INITIAL_UE_MESSAGE,
                         REGISTRATION_ACCEPT, NGAP_REJECT])


@given(kinds, st.text(max_size=20), st.integers(0, 2**32 - 1), st.binary(max_size=200))
def test_ngap_codec_roundtrip(kind, gid, txn, payload):
    if len(gid.encode()) > 255:
        return
    msg = NgapMessage(kind, gid, txn, payload)
    assert NgapMessage.from_bytes(msg.to_bytes()) == msg


def test_amf_reply_echoes_txn_and_state():
    dep = build_deployment(mode="baseline", seed=0)
    amf = dep.amf
    src = "192.168.70.160"
    early = NgapMessage(INITIAL_UE_MESSAGE, "g9", 41, b"u9|192.168.70.160")
    assert amf_handle_ngap(amf, early, False, src).name == "Reject"
    setup = amf_handle_ngap(amf, NgapMessage(NG_SETUP_REQUEST, "g9", 42), False, src)
    assert (setup.kind, setup.txn, setup.gnb_id) == (NG_SETUP_RESPONSE, 42, "g9")
    accept = amf_handle_ngap(amf, NgapMessage(INITIAL_UE_MESSAGE, "g9", 43,
                                              b"u9|192.168.70.160"), False, src)
    assert accept.kind == REGISTRATION_ACCEPT and accept.txn == 43
    assert dep.upf.by_address[amf.sessions["u9"].address].teid == amf.sessions["u9"].teid
    # same gNB id from a different source was never set up
    other = amf_handle_ngap(amf, NgapMessage(INITIAL_UE_MESSAGE, "g9", 44,
                                             b"u10|192.168.70.161"), False, "192.168.70.161")
    assert other.kind == NGAP_REJECT


def test_amf_enforcement_and_malformed():
    dep = build_deployment(mode="baseline", seed=0)
    amf = dep.amf
    assert amf_handle_ngap(amf, b"\x99junk", False, "x") is None
    assert amf.malformed == 1
    amf.enforce = True
    assert amf_handle_ngap(amf, NgapMessage(NG_SETUP_REQUEST, "g", 1), False, "x") is None
    assert amf.pre_ngap_reject == 1
    assert amf_handle_ngap(amf, NgapMessage(NG_SETUP_REQUEST, "g", 2), True, "x").txn == 2


def _ping(dep, ue_id="ue1", target=None, count=5):
    ue = dep.node(ue_id)
    target = target or dep.server
    client = PingClient(ue, dep.app_address(ue), dep.app_address(target))
    client.schedule(count, 0.01, dep.sim.t + 0.001)
    dep.run_for(1.0)
    return client


@pytest.mark.parametrize("mode", ["baseline", "wireguard", "ipsec"])
def test_scenario1_delivery(mode):
    dep = build_deployment(mode=mode, seed=1, scenario=1)
    client = _ping(dep)
    assert len(client.rtts) == 5
    if mode != "baseline":
        assert dep.app_address(dep.server) == IPv4Address("10.10.11.1")
        assert TUNNEL_NET.contains(dep.app_address(dep.node("ue1")))


@pytest.mark.parametrize("mode", ["wireguard", "ipsec"])
def test_scenario2_reaches_internal_host(mode):
    dep = build_deployment(mode=mode, seed=1, scenario=2)
    factory = dep.internal_hosts[0]
    client = _ping(dep, target=factory)
    assert len(client.rtts) == 5
    assert dep.hub is dep.upf


@pytest.mark.parametrize("mode", ["wireguard", "ipsec"])
def test_tampered_uplink_is_auth_fail_at_upf(mode):
    dep = build_deployment(mode=mode, seed=2, scenario=2)
    _ping(dep, target=dep.internal_hosts[0], count=1)
    link = dep.sim.links["n3-gnb1"]

    def flip(data, d, now):
        if d == 0 and len(data) > 100:
            data = data[:-1] + bytes([data[-1] ^ 0x80])
        return [data]

    link.attach_interposer(flip)
    factory = dep.internal_hosts[0]
    ue = dep.node("ue1")
    for i in range(5):
        ue.send_inner(InnerPacket(dep.app_address(ue), dep.app_address(factory), 1, SINK_PORT,
                                  bytes(200 + i)))
    dep.run_for(0.5)
    assert dep.upf.verdicts["auth_fail"] == 5
    assert factory.services[SINK_PORT].count == 0


def test_inner_addresses_unique():
    topo = parse_topology(crowded(6))
    for mode in ("wireguard", "ipsec"):
        dep = build_deployment(topo, mode=mode, seed=3)
        ues = [u for u in dep.ues if u.state == "registered"]
        assert len(ues) == 7
        pdu = [u.session.address for u in ues]
        tun = [min(u.inner_addresses) for u in ues]
        assert len(set(pdu)) == len(pdu) and len(set(tun)) == len(tun)
        assert all(UE_POOL.contains(a) for a in pdu)
        assert all(TUNNEL_NET.contains(a) for a in tun)
        assert dep.app_address(dep.server) not in tun


@pytest.mark.parametrize("mode", ["baseline", "wireguard", "ipsec"])
def test_exact_multiset_delivery(mode):
    dep = build_deployment(mode=mode, seed=4, topology=parse_topology(
        DEFAULT_TOPOLOGY.replace("Jitter = 0.3ms", "Jitter = 0")))
    ue, srv = dep.node("ue1"), dep.server
    _ping(dep, count=1)  # establish first; the pre-handshake queue holds only 16
    sink = Sink(keep=True)
    srv.services[SINK_PORT] = sink
    payloads = [bytes([i % 251]) * (i % 50 + 1) for i in range(120)]
    sender = BulkSender(ue, dep.app_address(ue), dep.app_address(srv), 8, len(payloads), 1e-4,
                        body=lambda s: payloads[s])
    sender.start(dep.sim.t)
    dep.run_for(2.0)
    assert Counter(sink.payloads) == Counter(payloads)


@pytest.mark.parametrize("mode,visible", [("baseline", True), ("wireguard", False),
                                          ("ipsec", False)])
def test_marker_visibility_at_untrusted_gnb(mode, visible):
    dep = build_deployment(mode=mode, seed=5)
    ue, srv = dep.node("ue1"), dep.server
    marker = b"MARKER-7f3a91"
    ue.send_inner(InnerPacket(dep.app_address(ue), dep.app_address(srv), 1, ECHO_PORT,
                              marker + bytes(40)))
    dep.run_for(0.5)
    records = dep.node("gnb1").records
    assert records
    hits = [r for r in records if marker in r.data]
    assert bool(hits) is visible
    if visible:
        assert {r.direction for r in hits} == {"ul", "dl"}
