"""Deterministic virtual-time network fabric.

Time is integer nanoseconds.  Events run in ``(time, sequence)`` order, so
two events scheduled for the same instant run in insertion order.  All
randomness (jitter, loss) comes from per-link generators spawned from the
simulator seed in link-creation order.

A link direction is a FIFO serializer: a datagram starts transmitting when
the previous one has left, takes ``bytes * 8 / rate`` on the wire and then
propagates for ``delay + jitter``.  Datagrams larger than the link MTU are
split into IPv4 fragments that are reassembled at the far end of the link.
With ``fragment_cost="slot"`` every fragment occupies the link for as long
as the unfragmented datagram would (one scheduling grant per frame), which
is what turns fragmentation into a throughput cliff; ``"bytes"`` charges
each fragment only for its own size.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Callable, Optional

import numpy as np

from .core import IPV4_HEADER_LEN
from .wire_codec import CidrBlock, LinkSpec

NS = 1_000_000_000
REASSEMBLY_TIMEOUT = 2.0


def to_ns(seconds: float) -> int:
    return round(seconds * NS)


def fragment_count(size: int, mtu: int) -> int:
    if size <= mtu:
        return 1
    return math.ceil((size - IPV4_HEADER_LEN) / (mtu - IPV4_HEADER_LEN))


@dataclass
class Frame:
    data: bytes
    sender: str
    frag: Optional[tuple] = None  # (ident, index, count, original header)

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Observed:
    time: int
    link: str
    direction: int
    data: bytes


@dataclass
class EventTrace:
    end: int
    events: int
    digest: str
    records: list = field(default_factory=list)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for t, seq, label in self.records:
                fh.write(json.dumps({"t_ns": t, "seq": seq, "event": label}) + "\n")


class _Draws:
    """Buffered draws from one numpy generator (keeps per-event cost low)."""

    def __init__(self, rng: np.random.Generator, batch: int = 4096):
        self.rng = rng
        self.batch = batch
        self._normal = deque()
        self._uniform = deque()

    def normal(self) -> float:
        if not self._normal:
            self._normal.extend(self.rng.standard_normal(self.batch).tolist())
        return self._normal.popleft()

    def uniform(self) -> float:
        if not self._uniform:
            self._uniform.extend(self.rng.random(self.batch).tolist())
        return self._uniform.popleft()

    def truncated_normal(self, sigma: float, bound: float = 2.0) -> float:
        while True:
            z = self.normal()
            if -bound <= z <= bound:
                return z * sigma


class TapHandle:
    def __init__(self, link: "Link", observer: Callable, interposer: bool):
        self.link, self.observer, self.interposer = link, observer, interposer

    def detach(self) -> None:
        pool = self.link.interposers if self.interposer else self.link.taps
        if self.observer in pool:
            pool.remove(self.observer)


class Link:
    def __init__(self, sim: "Simulator", spec: LinkSpec, a: "Node", b: "Node",
                 rng: np.random.Generator):
        if spec.mtu < 68:
            raise ValueError("mtu must be >= 68")
        self.sim = sim
        self.spec = spec
        self.name = spec.key
        self.ends = (a, b)
        self.rates = (spec.rate_ab, spec.rate_ba)
        self.delay_ns = to_ns(spec.delay)
        self.jitter = spec.jitter
        self.mtu = spec.mtu
        self.loss = spec.loss
        self.fragment_cost = spec.fragment_cost
        self.taps: list[Callable] = []
        self.interposers: list[Callable] = []
        self._draws = _Draws(rng)
        self._busy = [0, 0]
        self._ident = itertools.count(1)
        self.sent = [0, 0]
        self.delivered = [0, 0]
        self.lost = [0, 0]
        self.in_flight = [0, 0]
        a.links[b.id] = self
        b.links[a.id] = self

    def direction_from(self, node_id: str) -> int:
        return 0 if self.ends[0].id == node_id else 1

    def other(self, node_id: str) -> "Node":
        return self.ends[1] if self.ends[0].id == node_id else self.ends[0]

    def attach_tap(self, observer: Callable) -> TapHandle:
        """``observer(Observed)`` sees every transmitted frame's bytes."""
        self.taps.append(observer)
        return TapHandle(self, observer, False)

    def attach_interposer(self, fn: Callable) -> TapHandle:
        """``fn(data, direction, now_ns) -> list[bytes]`` may mutate, drop or add."""
        self.interposers.append(fn)
        return TapHandle(self, fn, True)

    def inject(self, data: bytes, from_node: str, at: Optional[float] = None) -> None:
        """Put raw bytes on the wire as if ``from_node`` had sent them."""
        d = self.direction_from(from_node)
        when = self.sim.now if at is None else to_ns(at)
        self.sim.schedule(when, self._put, d, data)

    def transmit(self, data: bytes, sender: str) -> list[int]:
        """Queue one datagram; returns scheduled arrival times (ns)."""
        d = self.direction_from(sender)
        datagrams = [data]
        for fn in self.interposers:
            datagrams = [out for dg in datagrams for out in fn(dg, d, self.sim.now)]
        arrivals = []
        for dg in datagrams:
            arrivals += self._put(d, dg)
        return arrivals

    def serialization_ns(self, nbytes: int, direction: int) -> int:
        return round(nbytes * 8 * NS / self.rates[direction])

    def _put(self, d: int, data: bytes) -> list[int]:
        sim = self.sim
        size = len(data)
        k = fragment_count(size, self.mtu)
        if k == 1:
            pieces = [(data, None, size)]
        else:
            pieces = self._fragment(data, k)
        arrivals = []
        for piece, frag, cost in pieces:
            start = max(sim.now, self._busy[d])
            done = start + self.serialization_ns(cost, d)
            self._busy[d] = done
            self.sent[d] += 1
            if self.taps:
                obs = Observed(start, self.name, d, piece)
                for tap in self.taps:
                    tap(obs)
            if self.loss and self._draws.uniform() < self.loss:
                self.lost[d] += 1
                continue
            arrival = done + self.delay_ns
            if self.jitter:
                arrival = max(done, arrival + to_ns(self._draws.truncated_normal(self.jitter)))
            self.in_flight[d] += 1
            sim.schedule(arrival, self._arrive, d, Frame(piece, self.ends[d].id, frag))
            arrivals.append(arrival)
        return arrivals

    def _fragment(self, data: bytes, k: int):
        header, body = data[:IPV4_HEADER_LEN], data[IPV4_HEADER_LEN:]
        chunk = self.mtu - IPV4_HEADER_LEN
        ident = next(self._ident) & 0xFFFF
        pieces = []
        for i in range(k):
            part = body[i * chunk:(i + 1) * chunk]
            more = i < k - 1
            hdr = bytearray(header)
            struct.pack_into("!HH", hdr, 2, IPV4_HEADER_LEN + len(part), ident)
            struct.pack_into("!H", hdr, 6, (0x2000 if more else 0) | ((i * chunk) >> 3))
            cost = len(data) if self.fragment_cost == "slot" else IPV4_HEADER_LEN + len(part)
            pieces.append((bytes(hdr) + part, (ident, i, k, header), cost))
        return pieces

    def _arrive(self, d: int, frame: Frame) -> None:
        self.in_flight[d] -= 1
        self.delivered[d] += 1
        self.ends[1 - d].receive(frame, self)

    def conservation(self) -> bool:
        return all(self.sent[d] == self.delivered[d] + self.lost[d] + self.in_flight[d]
                   for d in (0, 1))


class Node:
    """Base network node: address ownership, forwarding, reassembly."""

    role = "node"

    def __init__(self, node_id: str, addresses=()):
        self.id = node_id
        self.sim: Optional[Simulator] = None
        self.links: dict[str, Link] = {}
        self.owned: list[CidrBlock] = []
        self.addresses: list[IPv4Address] = []
        for a in addresses:
            self.add_address(a)
        self._reasm: OrderedDict = OrderedDict()
        self.reassembly_timeouts = 0

    def add_address(self, addr, prefix_len: int = 32) -> None:
        addr = IPv4Address(addr)
        if prefix_len == 32:
            self.addresses.append(addr)
        self.owned.append(CidrBlock(addr, prefix_len).normalized())
        if self.sim is not None:
            self.sim._routes_dirty = True

    def owns(self, addr: IPv4Address) -> bool:
        return addr in self.addresses

    def receive(self, frame: Frame, link: Link) -> None:
        data = frame.data
        if frame.frag is not None:
            data = self._reassemble(frame, link)
            if data is None:
                return
        dst = IPv4Address(data[16:20])
        if self.owns(dst):
            self.deliver(data, link)
        else:
            self.forward(data, link)

    def _reassemble(self, frame: Frame, link: Link) -> Optional[bytes]:
        now = self.sim.now
        limit = to_ns(REASSEMBLY_TIMEOUT)
        while self._reasm:
            key, entry = next(iter(self._reasm.items()))
            if now - entry[0] <= limit:
                break
            del self._reasm[key]
            self.reassembly_timeouts += 1
        ident, index, count, header = frame.frag
        key = (link.name, frame.sender, ident)
        entry = self._reasm.get(key)
        if entry is None:
            entry = self._reasm[key] = [now, {}]
        entry[1][index] = frame.data[IPV4_HEADER_LEN:]
        if len(entry[1]) < count:
            return None
        del self._reasm[key]
        return header + b"".join(entry[1][i] for i in range(count))

    def deliver(self, data: bytes, link: Optional[Link]) -> None:
        pass

    def forward(self, data: bytes, link: Optional[Link]) -> None:
        self.send(data)

    def send(self, data: bytes, at: Optional[int] = None) -> None:
        """Route a datagram by its destination address (optionally later)."""
        if at is not None and at > self.sim.now:
            self.sim.schedule(at, self.send, data)
            return
        hop = self.sim.next_hop(self.id, IPv4Address(data[16:20]))
        if hop is None:
            self.sim.unroutable += 1
            return
        self.links[hop].transmit(data, self.id)


class Simulator:
    def __init__(self, seed: int, record_trace: bool = False):
        self.seed = seed
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._seeds = np.random.SeedSequence(seed)
        self.rng = np.random.default_rng(self._seeds.spawn(1)[0])
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}
        self.record_trace = record_trace
        self._records: list = []
        self._hash = hashlib.blake2s()
        self._events = 0
        self._routes_dirty = True
        self._owner_cache: dict = {}
        self._hop_cache: dict = {}
        self.unroutable = 0

    @property
    def t(self) -> float:
        """Current virtual time in seconds."""
        return self.now / NS

    def spawn_rng(self) -> np.random.Generator:
        return np.random.default_rng(self._seeds.spawn(1)[0])

    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node {node.id}")
        node.sim = self
        self.nodes[node.id] = node
        self._routes_dirty = True
        return node

    def connect(self, spec: LinkSpec) -> Link:
        link = Link(self, spec, self.nodes[spec.a], self.nodes[spec.b], self.spawn_rng())
        self.links[link.name] = link
        self._routes_dirty = True
        return link

    def schedule(self, at_ns: int, fn: Callable, *args) -> None:
        if at_ns < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (at_ns, next(self._seq), fn, args))

    def call_in(self, delay: float, fn: Callable, *args) -> None:
        self.schedule(self.now + to_ns(delay), fn, *args)

    def run_until(self, t_end: float) -> EventTrace:
        end = to_ns(t_end)
        if end < self.now:
            raise ValueError("t_end is in the past")
        q = self._queue
        h = self._hash
        pack = struct.Struct("<QQ").pack
        while q and q[0][0] <= end:
            at, seq, fn, args = heapq.heappop(q)
            self.now = at
            label = getattr(fn, "__qualname__", "event")
            owner = getattr(getattr(fn, "__self__", None), "id", None) \
                or getattr(getattr(fn, "__self__", None), "name", "")
            h.update(pack(at, seq))
            h.update(f"{owner}.{label}".encode())
            if self.record_trace:
                self._records.append((at, seq, f"{owner}.{label}"))
            self._events += 1
            fn(*args)
        self.now = end
        return EventTrace(end, self._events, h.hexdigest(), list(self._records))

    # -- static routing

    def _refresh_routes(self) -> None:
        self._owner_cache.clear()
        self._hop_cache.clear()
        self._routes_dirty = False

    def owner_of(self, addr: IPv4Address) -> Optional[str]:
        if self._routes_dirty:
            self._refresh_routes()
        key = int(addr)
        if key in self._owner_cache:
            return self._owner_cache[key]
        best, best_len = None, -1
        for node in self.nodes.values():
            for block in node.owned:
                if block.prefix_len > best_len and block.contains(addr):
                    best, best_len = node.id, block.prefix_len
        self._owner_cache[key] = best
        return best

    def next_hop(self, src: str, dst_addr: IPv4Address) -> Optional[str]:
        owner = self.owner_of(dst_addr)
        if owner is None:
            return None
        key = (src, owner)
        if key not in self._hop_cache:
            self._hop_cache[key] = self._bfs_first_hop(src, owner)
        return self._hop_cache[key]

    def _bfs_first_hop(self, src: str, dst: str) -> Optional[str]:
        if src == dst:
            return None
        parent = {src: None}
        frontier = deque([src])
        while frontier:
            cur = frontier.popleft()
            for nxt in self.nodes[cur].links:
                if nxt in parent:
                    continue
                parent[nxt] = cur
                if nxt == dst:
                    while parent[nxt] != src:
                        nxt = parent[nxt]
                    return nxt
                frontier.append(nxt)
        return None
