"""RTT and goodput measurements, nearest-rank statistics, CSV output.

All reported times are virtual.  The only wall-clock number anywhere is
:func:`aead_benchmark`, which is host dependent and never written to CSV.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ECHO_PORT, INNER_HEADER_LEN, IPV4_HEADER_LEN, SINK_PORT
from .crypto_tunnel import DATA_OVERHEAD, OUTER_UDP_IP_LEN, aead_seal
from .esp_tunnel import esp_overhead
from .netsim import NS, fragment_count
from .ran import (
    BulkSender, Deployment, PingClient, ProcessingModel, Sink, UeNode, build_deployment,
)
from .wire_codec import TopologyConfig

CSV_HEADER = ("mode", "metric", "direction", "mtu", "seq", "value")
HIST_BIN = 0.5e-3


class EmptySamples(ValueError):
    pass


class NoResponder(RuntimeError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class RttSample:
    seq: int
    rtt: float

    def __post_init__(self):
        if not self.rtt > 0:
            raise ValueError("rtt must be positive")


@dataclass(frozen=True)
class Stats:
    n: int
    mean: float
    p95: float
    p99: float
    min: float
    max: float
    histogram: tuple  # ((bin start seconds, count), ...)


def nearest_rank(ordered: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(samples: Iterable, bin_width: float = HIST_BIN) -> Stats:
    vals = [s.rtt if isinstance(s, RttSample) else float(s) for s in samples]
    if not vals:
        raise EmptySamples("no samples")
    ordered = sorted(vals)
    hist: dict[int, int] = {}
    for v in vals:
        b = math.floor(v / bin_width + 1e-9)
        hist[b] = hist.get(b, 0) + 1
    lo, hi = min(hist), max(hist)
    bins = tuple((b * bin_width, hist.get(b, 0)) for b in range(lo, hi + 1))
    mean = math.fsum(vals) / len(vals)
    mean = min(max(mean, ordered[0]), ordered[-1])
    return Stats(len(vals), mean, nearest_rank(ordered, 95), nearest_rank(ordered, 99),
                 ordered[0], ordered[-1], bins)


def count_peaks(histogram, min_fraction: float = 0.1) -> int:
    """Local maxima (plateaus count once) at least ``min_fraction`` of the tallest bin."""
    counts = [c for _, c in histogram] if histogram and isinstance(histogram[0], tuple) \
        else list(histogram)
    if not counts:
        return 0
    floor = max(counts) * min_fraction
    peaks, i, n = 0, 0, len(counts)
    while i < n:
        j = i
        while j + 1 < n and counts[j + 1] == counts[i]:
            j += 1
        left = counts[i - 1] if i > 0 else -1
        right = counts[j + 1] if j + 1 < n else -1
        if counts[i] > left and counts[i] > right and counts[i] >= floor and counts[i] > 0:
            peaks += 1
        i = j + 1
    return peaks


@dataclass
class KpiReport:
    mode: str
    metric: str             # "rtt" or "goodput"
    direction: str          # "rt", "dl" or "ul"
    mtu: Optional[int]
    seed: int
    repeat: int = 0
    samples: list = field(default_factory=list)
    stats: Optional[Stats] = None
    goodput: Optional[float] = None
    expected_goodput: Optional[float] = None
    counters: dict = field(default_factory=dict)
    lost: int = 0


# ----------------------------------------------------------------- sizes

def frame_size(mode: str, payload: int) -> int:
    """Bytes on the radio link for one application payload."""
    inner = payload + INNER_HEADER_LEN
    if mode == "baseline":
        return inner
    if mode == "wireguard":
        return inner + DATA_OVERHEAD + OUTER_UDP_IP_LEN
    if mode == "ipsec":
        return inner + esp_overhead(inner)
    raise ValueError(mode)


def fitted_goodput(arrivals, payload: int) -> Optional[float]:
    """Payload bits/s from a least-squares fit of arrival time against sequence.

    Jitter is zero-mean, so the slope is unbiased where a first/last span
    would be stretched by the two most extreme draws.
    """
    if len(arrivals) < 2:
        return None
    seq = np.array([a[0] for a in arrivals], dtype=float)
    t = np.array([a[1] for a in arrivals], dtype=float) / NS
    slope = float(np.polyfit(seq, t, 1)[0])
    return payload * 8 / slope if slope > 0 else None


def closed_form_goodput(rate: float, payload: int, frame: int, mtu: int,
                        fragment_cost: str = "slot") -> float:
    k = fragment_count(frame, mtu)
    if fragment_cost == "slot" or k == 1:
        return rate * payload / frame / k
    return rate * payload / (frame + (k - 1) * IPV4_HEADER_LEN)


# -------------------------------------------------------------- measuring

def _first_ue(dep: Deployment) -> UeNode:
    for ue in dep.ues:
        if ue.state == "registered":
            return ue
    raise NoResponder("no registered UE")


def _responder(dep: Deployment, responder: str):
    node = dep.server if responder == "server" else dep.upf
    if ECHO_PORT not in node.services:
        raise NoResponder(f"{node.id} runs no echo service")
    if node is dep.upf and dep.mode != "baseline" and dep.scenario == 2:
        return node, min(node.inner_addresses)
    return node, dep.app_address(node)


def measure_rtt(topology: Optional[TopologyConfig], mode: str, n: int, seed: int,
                scenario: int = 1, interval: float = 0.01, size: int = 56,
                model: Optional[ProcessingModel] = None, responder: str = "server",
                repeat: int = 0) -> KpiReport:
    """``n`` echo round trips after one untimed warm-up probe."""
    dep = build_deployment(topology, mode, seed, scenario=scenario, model=model, inspect=False)
    ue = _first_ue(dep)
    node, dst = _responder(dep, responder)
    ping = PingClient(ue, dep.app_address(ue), dst, size=size)
    ping.ping(0)
    dep.run_for(0.25)
    if 0 not in ping.rtts:
        raise NoResponder(f"{node.id} did not answer")
    ping.schedule(n, interval, dep.sim.t + interval, first_seq=1)
    dep.run_for(n * interval + 1.0)
    samples = [RttSample(s, ping.rtts[s] / NS) for s in range(1, n + 1) if s in ping.rtts]
    rep = KpiReport(mode, "rtt", "rt", None, seed, repeat, samples,
                    counters=dep.crypto_counters().as_dict(), lost=n - len(samples))
    if samples:
        rep.stats = summarize(samples)
    return rep


def _radio(dep: Deployment, ue: UeNode):
    return ue.links[ue.serving]


def measure_throughput(topology: Optional[TopologyConfig], mode: str, direction: str,
                       mtu_sweep: Sequence[int], duration: float, seed: int,
                       scenario: int = 1, model: Optional[ProcessingModel] = None,
                       repeat: int = 0) -> list[KpiReport]:
    """Saturate the radio link with one flow per payload size and time the arrivals.

    The sender is paced at the baseline line rate, so tunnel modes queue at
    the bottleneck and their goodput is set purely by the serializer.
    """
    if direction not in ("dl", "ul"):
        raise ValueError("direction must be dl or ul")
    out = []
    for payload in mtu_sweep:
        dep = build_deployment(topology, mode, seed, scenario=scenario, model=model,
                               inspect=False)
        ue = _first_ue(dep)
        far = dep.server
        src, dst = (far, ue) if direction == "dl" else (ue, far)
        radio = _radio(dep, ue)
        d = radio.direction_from(ue.serving if direction == "dl" else ue.id)
        rate = radio.rates[d]
        sink = Sink(track=True)
        dst.services[SINK_PORT] = sink
        PingClient(ue, dep.app_address(ue), dep.app_address(far), port=40998).ping(0)
        dep.run_for(0.25)
        interval = frame_size("baseline", payload) * 8 / rate
        count = max(50, int(duration / interval))
        sender = BulkSender(src, dep.app_address(src), dep.app_address(dst), payload, count,
                            interval)
        sender.start(dep.sim.t)
        frame = frame_size(mode, payload)
        budget = count * fragment_count(frame, radio.mtu) * frame * 8 / rate * 1.5 + 1.0
        deadline = dep.sim.t + budget
        while sink.count < count and dep.sim.t < deadline:
            dep.run_for(min(0.25, deadline - dep.sim.t))
        goodput = fitted_goodput(sink.arrivals, payload)
        rep = KpiReport(mode, "goodput", direction, payload, seed, repeat,
                        goodput=goodput, counters=dep.crypto_counters().as_dict(),
                        lost=count - sink.count)
        rep.expected_goodput = closed_form_goodput(rate, payload, frame, radio.mtu,
                                                   radio.fragment_cost)
        out.append(rep)
    return out


# ------------------------------------------------------------------ output

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def csv_rows(reports: Iterable[KpiReport]) -> list[tuple]:
    """Rows in the order given; RTT sample rows use seq = repeat * 10**6 + ping seq."""
    rows = []
    for r in reports:
        mtu = _fmt(r.mtu)
        if r.metric == "rtt":
            base = r.repeat * 1_000_000
            for s in r.samples:
                rows.append((r.mode, "rtt_ms", r.direction, mtu, base + s.seq, _fmt(s.rtt * 1e3)))
            if r.stats is not None:
                for name in ("mean", "p95", "p99"):
                    rows.append((r.mode, f"rtt_{name}_ms", r.direction, mtu, r.repeat,
                                 _fmt(getattr(r.stats, name) * 1e3)))
        else:
            rows.append((r.mode, "goodput_bps", r.direction, mtu, r.repeat, _fmt(r.goodput)))
        for key in ("bytes_encrypted", "handshake_messages", "aead_ops"):
            if key in r.counters:
                rows.append((r.mode, key, r.direction, mtu, r.repeat, _fmt(r.counters[key])))
    return rows


def emit_csv(reports: Iterable[KpiReport], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(csv_rows(reports))
    try:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoFailure(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def report_table(reports: Iterable[KpiReport]) -> str:
    rows = [("mode", "metric", "dir", "mtu", "rep", "n", "mean_ms", "p95_ms", "p99_ms", "Mbps")]
    for r in reports:
        if r.metric == "rtt" and r.stats is not None:
            st = r.stats
            rows.append((r.mode, r.metric, r.direction, _fmt(r.mtu), str(r.repeat), str(st.n),
                         f"{st.mean * 1e3:.3f}", f"{st.p95 * 1e3:.3f}", f"{st.p99 * 1e3:.3f}", ""))
        elif r.metric == "goodput":
            mbps = f"{r.goodput / 1e6:.2f}" if r.goodput else "-"
            rows.append((r.mode, r.metric, r.direction, _fmt(r.mtu), str(r.repeat), "", "", "", "",
                         mbps))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows)


def aead_benchmark(size: int = 1 << 16, seconds: float = 0.2) -> dict:
    """Wall-clock AEAD throughput in bytes/s on this host (not reproducible)."""
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    key = os.urandom(32)
    data = os.urandom(size)
    gcm = AESGCM(key)
    out = {}
    for name, fn in (("chacha20poly1305", lambda i: aead_seal(key, i, data)),
                     ("aes256gcm", lambda i: gcm.encrypt(i.to_bytes(12, "big"), data, b""))):
        n, start = 0, time.perf_counter()
        while time.perf_counter() - start < seconds:
            fn(n)
            n += 1
        out[name] = n * size / (time.perf_counter() - start)
    return out
