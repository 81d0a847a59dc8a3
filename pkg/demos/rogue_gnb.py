"""A rogue base station tries to register a UE with the core.

Without the N2 gate the AMF happily sets the rogue gNB up and hands its UE
an address.  With the gate, the rogue's handshake is ignored and not a
single byte comes back.  Finally we revoke the trusted gNB at runtime.

    python demos/rogue_gnb.py
"""

from wgran.ran import N2Unavailable, build_deployment


def try_rogue(gate: bool) -> None:
    dep = build_deployment(mode="wireguard", seed=3, n2gate=gate)
    try:
        session = dep.attach("ue2")
        outcome = f"registered as {session.address}"
    except N2Unavailable:
        outcome = "no registration"
    rogue = dep.node("rogue")
    print(f"gate {'on ' if gate else 'off'}: rogue UE {outcome}; "
          f"bytes sent back to rogue = {rogue.n2_rx_bytes}; "
          f"AMF handled {dep.amf.processed_by_src[str(rogue.outer_address)]} rogue NGAP msgs")


try_rogue(gate=False)
try_rogue(gate=True)

# revocation takes effect on the next packet, no restart
dep = build_deployment(mode="wireguard", seed=3)
gnb1 = dep.node("gnb1")
version = dep.gate.revoke(dep.n2_keys["gnb1"].public).version
before = dep.amf.processed
try:
    dep.attach("ue1", timeout=1.0)
except N2Unavailable as exc:
    print(f"after revocation (whitelist v{version}): {exc}")
print(f"AMF messages from gnb1 since revocation: {dep.amf.processed - before}")
