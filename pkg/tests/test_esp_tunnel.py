from ipaddress import IPv4Address

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import esp_wire_overhead, wg_wire_size
from wgran.core import InnerPacket, Verdict
from wgran.crypto_tunnel import OUTER_UDP_IP_LEN
from wgran.esp_tunnel import (
    AuthMismatch, EspEndpoint, EspPacket, EspPeer, SecurityAssociation, esp_decrypt,
    esp_encrypt, esp_overhead, ike_mock_establish, pad_length,
)
from wgran.wire_codec import CidrBlock

UE_ADDR, HUB_ADDR = IPv4Address("12.1.1.2"), IPv4Address("10.1.1.3")


def endpoints(psk_ue=b"k" * 32, psk_hub=b"k" * 32, seed=0):
    ue = EspEndpoint("ue", [EspPeer("hub", HUB_ADDR, psk_ue, (CidrBlock.parse("10.10.11.1/32"),))],
                     np.random.default_rng(seed))
    hub = EspEndpoint("hub", [EspPeer("ue", UE_ADDR, psk_hub, (CidrBlock.parse("10.10.11.2/32"),))],
                      np.random.default_rng(seed + 1))
    return ue, hub


def pkt(payload=b"x", src="10.10.11.2", dst="10.10.11.1"):
    return InnerPacket(src, dst, 40000, 7, payload)


def test_ike_four_messages_two_round_trips():
    ue, hub = endpoints()
    res = ike_mock_establish(ue, hub, "hub", UE_ADDR, delay=3.9e-3)
    assert res.messages == 4
    assert res.established_at == pytest.approx(15.6e-3)
    assert ue.counters.handshake_messages + hub.counters.handshake_messages == 4
    (i_out, i_in), (r_out, r_in) = res.initiator_sa, res.responder_sa
    assert (i_out.key, i_out.salt, i_out.spi) == (r_in.key, r_in.salt, r_in.spi)
    assert (r_out.key, r_out.spi) == (i_in.key, i_in.spi)


def test_ike_psk_mismatch():
    ue, hub = endpoints(psk_hub=b"z" * 32)
    with pytest.raises(AuthMismatch):
        ike_mock_establish(ue, hub, "hub", UE_ADDR)
    assert hub.last_auth_failure == "ue"
    assert ue.counters.handshake_messages + hub.counters.handshake_messages == 4


def sa_pair():
    ue, hub = endpoints()
    res = ike_mock_establish(ue, hub, "hub", UE_ADDR)
    return res.initiator_sa[0], res.responder_sa[1]


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=1400))
def test_roundtrip(payload):
    out, inn = sa_pair()
    p = pkt(payload)
    assert esp_decrypt(inn, esp_encrypt(out, p)) == p


def test_verdicts():
    out, inn = sa_pair()
    raw = esp_encrypt(out, pkt(bytes(100))).to_bytes()
    bad = bytearray(raw)
    bad[-1] ^= 1  # last ICV bit
    assert esp_decrypt(inn, bytes(bad)) is Verdict.AUTH_FAIL
    assert isinstance(esp_decrypt(inn, raw), InnerPacket)
    assert esp_decrypt(inn, raw) is Verdict.REPLAY
    other = bytearray(raw)
    other[0] ^= 0xFF
    assert esp_decrypt(inn, bytes(other)) is Verdict.UNKNOWN_SPI
    assert esp_decrypt(inn, b"\x00" * 5) is Verdict.MALFORMED


def test_no_inner_source_check():
    # any inner source is accepted once the SA authenticates
    out, inn = sa_pair()
    spoofed = pkt(src="192.168.70.5")
    assert esp_decrypt(inn, esp_encrypt(out, spoofed)) == spoofed


def test_overhead_1000_is_56():
    assert pad_length(1000) == 2
    assert esp_overhead(1000) == 56
    out, _ = sa_pair()
    wire = esp_encrypt(out, pkt(bytes(1000 - 28))).to_bytes()
    assert 20 + len(wire) - 1000 == 56


@pytest.mark.parametrize("p", list(range(65)) + [1000, 1400])
def test_overhead_matches_layout_oracle(p):
    assert esp_overhead(p) == esp_wire_overhead(p)
    wg = wg_wire_size(p) + OUTER_UDP_IP_LEN - p
    assert -6 <= esp_overhead(p) - wg <= -3
    assert 54 <= esp_overhead(p) <= 57


def test_bytes_encrypted_parity_with_wg():
    from test_crypto_tunnel import established, pkt as wg_pkt
    a, _, _, _ = established()
    ue, hub = endpoints()
    ike_mock_establish(ue, hub, "hub", UE_ADDR)
    rng = np.random.default_rng(3)
    sizes = rng.integers(0, 1400, 2000)
    for n in sizes:
        body = bytes(int(n))
        a.encrypt_outbound(wg_pkt(body), 0.0)
        ue.encrypt_outbound(pkt(body), 0.0)
    diff = ue.counters.bytes_encrypted - a.counters.bytes_encrypted
    assert 0 <= diff <= 3 * len(sizes)


def test_spi_zero_reserved():
    with pytest.raises(ValueError):
        SecurityAssociation(0, bytes(32), bytes(4), "x")


def test_packet_layout():
    out, _ = sa_pair()
    p = esp_encrypt(out, pkt(bytes(3)))
    raw = p.to_bytes()
    assert EspPacket.from_bytes(raw) == p
    assert int.from_bytes(raw[:4], "big") == out.spi
    assert int.from_bytes(raw[4:8], "big") == p.seq == 0
    assert raw[8:16] == (0).to_bytes(8, "big")


def test_queue_until_sa_then_flush():
    ue, hub = endpoints()
    txs = ue.encrypt_outbound(pkt(b"early"), 0.0)
    assert [t.kind for t in txs] == ["ike"]
    assert ue.encrypt_outbound(pkt(b"early2"), 0.0) == []
    r = hub.receive(txs[0].message, UE_ADDR, 0.0, ike=True)
    r = ue.receive(r.replies[0].message, HUB_ADDR, 0.0, ike=True)
    r = hub.receive(r.replies[0].message, UE_ADDR, 0.0, ike=True)
    r = ue.receive(r.replies[0].message, HUB_ADDR, 0.0, ike=True)
    data = [t for t in r.replies if t.kind == "data"]
    assert len(data) == 2
    got = [hub.receive(t.message, UE_ADDR, 0.0).packet.payload for t in data]
    assert got == [b"early", b"early2"]
