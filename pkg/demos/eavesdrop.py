"""What an untrusted gNB gets to read.

A UE sends a few packets with a recognisable marker to the partner server.
We dump the first record captured at the untrusted gNB in each mode and
report whether the marker survived and how random the captured bytes look.

    python demos/eavesdrop.py
"""

from wgran.core import SINK_PORT, InnerPacket
from wgran.ran import PingClient, build_deployment
from wgran.threatlab import byte_entropy

MARKER = b"PAYROLL-2024-Q3"

for mode in ("baseline", "wireguard", "ipsec"):
    dep = build_deployment(mode=mode, seed=1)
    ue, server = dep.node("ue1"), dep.server
    # bring the tunnel up first, then forget what the gNB saw during setup
    PingClient(ue, dep.app_address(ue), dep.app_address(server)).ping(0)
    dep.run_for(0.2)
    dep.node("gnb1").records.clear()
    for i in range(20):
        body = MARKER + i.to_bytes(2, "big") + bytes(200)
        ue.send_inner(InnerPacket(dep.app_address(ue), dep.app_address(server), 40000,
                                  SINK_PORT, body))
    dep.run_for(0.5)

    # only uplink records carry our payload; downlink here is empty
    records = [r for r in dep.node("gnb1").records if r.direction == "ul"]
    seen = sum(MARKER in r.data for r in records)
    blob = b"".join(r.data[28:] for r in records)
    print(f"{mode:>9}: {len(records)} records, marker visible in {seen}, "
          f"entropy {byte_entropy(blob):.2f} bits/byte")
    print(f"           first record: {records[0].data[28:60].hex()}")
