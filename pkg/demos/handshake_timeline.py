"""Handshake timelines: WireGuard versus the mock IKE exchange.

A tap on the radio link prints every handshake frame the UE sends or
receives until its first data packet can leave.

    python demos/handshake_timeline.py
"""

from wgran.core import SINK_PORT, InnerPacket
from wgran.ran import DEFAULT_TOPOLOGY, build_deployment
from wgran.wire_codec import parse_topology

topo = parse_topology(DEFAULT_TOPOLOGY.replace("Jitter = 0.3ms", "Jitter = 0"))
WG_KINDS = {1: "initiation", 2: "response", 4: "data"}

for mode in ("wireguard", "ipsec"):
    dep = build_deployment(topo, mode, seed=0)
    ue = dep.node("ue1")
    t0 = dep.sim.now
    log = []

    def tap(obs, log=log):
        d = obs.data
        if mode == "wireguard":
            label = WG_KINDS.get(d[28], "?")
        else:
            label = "ike" if d[9] == 17 else "esp"
        log.append((obs.time - t0, "up" if obs.direction == 0 else "down", len(d), label))

    dep.sim.links["radio1"].attach_tap(tap)
    ue.send_inner(InnerPacket(dep.app_address(ue), dep.app_address(dep.server), 1, SINK_PORT,
                              b"hello"))
    dep.run_for(0.1)
    print(f"{mode}:")
    for t, d, n, label in log:
        print(f"  {t / 1e6:8.3f} ms  {d:>4}  {n:4d} B  {label}")
