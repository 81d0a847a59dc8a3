"""Round-trip latency and the fragmentation cliff, side by side.

Part one pings the partner server from the UE in each mode and prints
mean / p99.  Part two sweeps the payload size on the downlink and shows
where the tunnel overhead pushes frames past the 1440-byte radio MTU.

    python demos/latency_and_mtu.py
"""

from wgran.kpi import measure_rtt, measure_throughput

MODES = ("baseline", "wireguard", "ipsec")

print("RTT over 500 pings (ms)")
base = None
for mode in MODES:
    st = measure_rtt(None, mode, 500, seed=2).stats
    base = base or st.mean
    print(f"  {mode:>9}  mean {st.mean * 1e3:6.3f}  p99 {st.p99 * 1e3:6.3f}  "
          f"(+{(st.mean - base) * 1e3:.3f})")

print("\nDownlink goodput (Mbps)")
sweep = (500, 1000, 1300, 1400)
print(f"  {'payload':>9}  " + "  ".join(f"{p:>7}" for p in sweep))
for mode in MODES:
    reps = measure_throughput(None, mode, "dl", sweep, 0.05, seed=2)
    print(f"  {mode:>9}  " + "  ".join(f"{r.goodput / 1e6:7.1f}" for r in reps))
