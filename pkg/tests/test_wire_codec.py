import base64
from ipaddress import IPv4Address

import pytest
from hypothesis import given, settings, strategies as st

from corpus import MUTATIONS, VALID_TOPOLOGY, VALID_WG, key, ue_dual_peer, hub_side
from oracles import cidr_contains_oracle
from wgran.wire_codec import (
    CidrBlock, ConfigError, DanglingLink, Endpoint, InterfaceStanza, LinkSpec, MalformedValue,
    MissingField, PeerStanza, TunnelConfig, cidr_contains, decode_key, encode_key, parse_rate,
    parse_duration, parse_topology, parse_wg_config, serialize_topology, serialize_wg_config,
)


def test_hub_side_config_fields():
    text = hub_side(3)
    cfg = parse_wg_config(text)
    assert cfg.interface.address == CidrBlock(IPv4Address("10.10.11.3"), 24)
    assert cfg.interface.listen_port == 51000
    assert len(cfg.peers) == 1
    p = cfg.peers[0]
    assert p.endpoint == Endpoint(IPv4Address("12.1.1.3"), 51000)
    assert p.allowed_ips == (CidrBlock(IPv4Address("10.10.11.0"), 24),)
    assert p.persistent_keepalive == 25


def test_dual_peer_blocks_in_order():
    cfg = parse_wg_config(ue_dual_peer(4))
    assert [str(b) for b in cfg.peers[1].allowed_ips] == ["10.10.11.0/24", "10.1.1.0/24"]
    assert cfg.peers[0].endpoint.host == IPv4Address("10.1.1.4")


def test_missing_private_key_cites_section_line():
    text = "\n[Interface]\nAddress = 10.10.11.2/24\nListenPort = 51000\n[Peer]\n" \
           f"PublicKey = {key()}\nAllowedIPs = 10.10.11.0/24\n"
    with pytest.raises(MissingField) as exc:
        parse_wg_config(text)
    assert exc.value.line == 2


def test_two_peers_serialize_in_order():
    cfg = parse_wg_config(ue_dual_peer(5))
    out = serialize_wg_config(cfg)
    assert out.count("[Peer]") == 2
    assert out.index("10.1.1.5:51000") < out.index("192.168.70.5:51000")


def test_empty_peer_config_rejected_at_construction():
    iface = InterfaceStanza(bytes(32), CidrBlock(IPv4Address("10.10.11.2"), 24), 51000)
    with pytest.raises(MissingField):
        TunnelConfig(iface, ())
    with pytest.raises(MissingField):
        PeerStanza(bytes(32), ())


@pytest.mark.parametrize("i", range(len(VALID_WG)))
def test_corpus_wg_roundtrip(i):
    cfg = parse_wg_config(VALID_WG[i])
    again = parse_wg_config(serialize_wg_config(cfg))
    assert again == cfg
    assert serialize_wg_config(again) == serialize_wg_config(cfg)


@pytest.mark.parametrize("i", range(len(VALID_TOPOLOGY)))
def test_corpus_topology_roundtrip(i):
    topo = parse_topology(VALID_TOPOLOGY[i])
    assert parse_topology(serialize_topology(topo)) == topo


@pytest.mark.parametrize("name,text,kind,err", MUTATIONS, ids=[m[0] for m in MUTATIONS])
def test_mutation_error_class(name, text, kind, err):
    parse = parse_wg_config if kind == "wg" else parse_topology
    with pytest.raises(err) as exc:
        parse(text)
    assert type(exc.value) is err
    assert exc.value.line is not None


def test_four_node_topology_counts():
    from corpus import FOUR_NODE
    topo = parse_topology(FOUR_NODE)
    assert len(topo.nodes) == 4 and len(topo.links) == 3
    radio = topo.link_between("ue", "gnb")
    assert (radio.rate_ab, radio.rate_ba, radio.mtu) == (60e6, 600e6, 1500)


def test_dangling_link():
    with pytest.raises(DanglingLink):
        parse_topology("[Node]\nId = a\nRole = ue\n[Link]\nA = a\nB = b\n")


def test_units():
    assert parse_rate("600M") == 600e6
    assert parse_rate("60Mbps") == 60e6
    assert parse_rate("1e9") == 1e9
    assert parse_duration("3.9ms") == pytest.approx(3.9e-3)
    assert parse_duration("250us") == pytest.approx(250e-6)
    with pytest.raises(MalformedValue):
        parse_rate("0")
    with pytest.raises(MalformedValue):
        parse_duration("3 parsecs")


def test_link_mtu_floor():
    assert LinkSpec("a", "b").mtu == 1500
    with pytest.raises(MalformedValue):
        parse_topology("[Node]\nId = a\nRole = ue\n[Node]\nId = b\nRole = ue\n"
                       "[Link]\nA = a\nB = b\nMtu = 40\n")


@pytest.mark.parametrize("addr,want", [("10.10.11.7", True), ("10.1.1.5", False)])
def test_cidr_examples(addr, want):
    assert cidr_contains(CidrBlock.parse("10.10.11.0/24"), addr) is want


def test_universal_prefix():
    any_block = CidrBlock.parse("0.0.0.0/0")
    for a in ("0.0.0.0", "255.255.255.255", "12.1.1.2"):
        assert cidr_contains(any_block, a)


addresses = st.integers(0, 2**32 - 1).map(IPv4Address)


@settings(max_examples=10_000, deadline=None)
@given(addresses, st.integers(0, 32), addresses)
def test_cidr_contains_matches_bit_oracle(net, plen, addr):
    assert cidr_contains(CidrBlock(net, plen), addr) == cidr_contains_oracle(net, plen, addr)


@given(addresses, st.integers(0, 32))
def test_normalization_idempotent(net, plen):
    n = CidrBlock(net, plen).normalized()
    assert n.normalized() == n
    assert int(n.address) & ~n.mask & 0xFFFFFFFF == 0


@given(st.binary(min_size=32, max_size=32))
def test_key_roundtrip(raw):
    assert decode_key(encode_key(raw)) == raw


B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/="


@settings(max_examples=500)
@given(st.binary(min_size=32, max_size=32), st.integers(0, 43), st.sampled_from(B64 + "!- "))
def test_key_corruption_never_silently_equal(raw, pos, ch):
    text = encode_key(raw)
    bad = text[:pos] + ch + text[pos + 1:]
    if bad == text:
        return
    try:
        decoded = decode_key(bad)
    except MalformedValue:
        return
    assert decoded != raw


cidrs = st.builds(lambda a, p: CidrBlock(a, p).normalized(), addresses, st.integers(0, 32))
keys = st.binary(min_size=32, max_size=32)
peers = st.builds(
    PeerStanza, keys, st.lists(cidrs, min_size=1, max_size=4).map(tuple),
    st.none() | st.builds(Endpoint, addresses, st.integers(1, 65535)),
    st.none() | st.integers(1, 3600))


@given(keys, cidrs, st.integers(1, 65535),
       st.lists(peers, min_size=1, max_size=5, unique_by=lambda p: p.public_key))
def test_wg_roundtrip_property(priv, addr, port, peer_list):
    cfg = TunnelConfig(InterfaceStanza(priv, addr, port), tuple(peer_list))
    assert parse_wg_config(serialize_wg_config(cfg)) == cfg


def test_errors_share_base_class():
    for _, text, kind, _ in MUTATIONS:
        parse = parse_wg_config if kind == "wg" else parse_topology
        with pytest.raises(ConfigError):
            parse(text)


def test_noncanonical_base64_rejected():
    raw = bytes(32)
    text = base64.b64encode(raw).decode()
    # last char before '=' carries 2 unused bits; setting them aliases the same bytes
    alias = text[:42] + "B="
    with pytest.raises(MalformedValue):
        decode_key(alias)
