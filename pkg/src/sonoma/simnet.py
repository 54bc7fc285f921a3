"""Deterministic simulated network.

A directed graph of links, each with propagation delay, capacity and a
constant-rate (fluid) cross-traffic load. Probe packets crossing a link are
served by a single FIFO whose service rate is the link's available bandwidth,
so chirps and trains see self-induced queuing exactly when their rate exceeds
the tightest link on the route.

All functions are pure; randomness (probe loss) comes from a counter-based
hash of ``(seed, stream, probe, link)`` so any run can be replayed.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .model import (
    TRACEROUTE_MAX_TTL,
    ChirpRecord,
    ErrorCode,
    Hop,
    PingResult,
    SonomaError,
    TracerouteResult,
    TrainRecord,
)


@dataclass(frozen=True)
class SimNode:
    node_id: str
    ip_address: str
    line_rate_mbps: float = 100.0


@dataclass(frozen=True)
class SimLink:
    src: str
    dst: str
    delay_ms: float
    capacity_mbps: float
    cross_traffic_mbps: float = 0.0
    loss: float = 0.0

    def __post_init__(self):
        if self.delay_ms <= 0 or self.capacity_mbps <= 0:
            raise ValueError(f"link {self.src}->{self.dst}: delay and capacity must be positive")
        if not 0 <= self.cross_traffic_mbps < self.capacity_mbps:
            raise ValueError(f"link {self.src}->{self.dst}: cross traffic must be below capacity")
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError(f"link {self.src}->{self.dst}: loss outside [0, 1]")

    @property
    def available_mbps(self) -> float:
        return self.capacity_mbps - self.cross_traffic_mbps


@dataclass(frozen=True)
class SimTopology:
    nodes: tuple[SimNode, ...]
    links: tuple[SimLink, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)
    _by_ip: dict = field(init=False, repr=False, compare=False)
    _adj: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id = {n.node_id: n for n in self.nodes}
        by_ip = {n.ip_address: n for n in self.nodes}
        if len(by_id) != len(self.nodes) or len(by_ip) != len(self.nodes):
            raise ValueError("duplicate node id or address")
        adj: dict[str, dict[str, SimLink]] = {n: {} for n in by_id}
        for link in self.links:
            if link.src not in by_id or link.dst not in by_id:
                raise ValueError(f"link {link.src}->{link.dst} references an unknown node")
            adj[link.src][link.dst] = link
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_ip", by_ip)
        object.__setattr__(self, "_adj", adj)

    def node(self, ref: str) -> SimNode:
        """Look up a node by IP address or node id."""
        node = self._by_ip.get(ref) or self._by_id.get(ref)
        if node is None:
            raise SonomaError(ErrorCode.UNKNOWN_ADDRESS, f"{ref} is not in the topology")
        return node

    def link(self, a: str, b: str) -> SimLink:
        return self._adj[a][b]

    def neighbours(self, node_id: str) -> dict[str, SimLink]:
        return self._adj[node_id]

    def address(self, node_id: str) -> str:
        return self._by_id[node_id].ip_address

    @classmethod
    def from_dict(cls, data: dict) -> SimTopology:
        nodes = tuple(
            SimNode(n["nodeId"], n["ipAddress"], float(n.get("lineRateMbps", 100.0)))
            for n in data["nodes"]
        )
        links = tuple(
            SimLink(
                l["from"], l["to"], float(l["delayMs"]), float(l["capacityMbps"]),
                float(l.get("crossTrafficMbps", 0.0)), float(l.get("loss", 0.0)),
            )
            for l in data["links"]
        )
        return cls(nodes, links)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"nodeId": n.node_id, "ipAddress": n.ip_address, "lineRateMbps": n.line_rate_mbps}
                for n in self.nodes
            ],
            "links": [
                {"from": l.src, "to": l.dst, "delayMs": l.delay_ms, "capacityMbps": l.capacity_mbps,
                 "crossTrafficMbps": l.cross_traffic_mbps, "loss": l.loss}
                for l in self.links
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> SimTopology:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def duplex(a: str, b: str, delay_ms: float, capacity_mbps: float,
           cross_traffic_mbps: float = 0.0, loss: float = 0.0) -> tuple[SimLink, SimLink]:
    """An undirected physical link as its two directed halves."""
    return (SimLink(a, b, delay_ms, capacity_mbps, cross_traffic_mbps, loss),
            SimLink(b, a, delay_ms, capacity_mbps, cross_traffic_mbps, loss))


def uniform(seed: int, *keys) -> float:
    """Counter-based uniform draw in [0, 1)."""
    digest = hashlib.blake2b(repr((seed,) + keys).encode(), digest_size=8).digest()
    return struct.unpack(">Q", digest)[0] / 2.0 ** 64


def _lost(link: SimLink, seed: int, *keys) -> bool:
    return link.loss > 0 and uniform(seed, *keys) < link.loss


# -- routing ---------------------------------------------------------------


def compute_route(topo: SimTopology, src: str, dst: str) -> list[str]:
    """Minimum-hop node-id path from ``src`` to ``dst``.

    Ties go to the lexicographically smallest node-id sequence: BFS distances
    towards ``dst`` are computed on the reversed graph, then the walk from
    ``src`` greedily takes the smallest neighbour one step closer.
    """
    s = topo.node(src).node_id
    d = topo.node(dst).node_id
    dist = {d: 0}
    reverse: dict[str, list[str]] = {}
    for link in topo.links:
        reverse.setdefault(link.dst, []).append(link.src)
    queue = deque([d])
    while queue:
        cur = queue.popleft()
        for prev in reverse.get(cur, ()):
            if prev not in dist:
                dist[prev] = dist[cur] + 1
                queue.append(prev)
    if s not in dist:
        raise SonomaError(ErrorCode.NO_ROUTE, f"{dst} unreachable from {src}")
    path = [s]
    while path[-1] != d:
        here = path[-1]
        path.append(min(n for n in topo.neighbours(here) if dist.get(n) == dist[here] - 1))
    return path


def route_links(topo: SimTopology, route: list[str]) -> list[SimLink]:
    return [topo.link(a, b) for a, b in zip(route, route[1:])]


def ground_truth_available_bandwidth(topo: SimTopology, src: str, dst: str) -> float:
    """Tightest link's available bandwidth (Mbps) along the chosen route."""
    links = route_links(topo, compute_route(topo, src, dst))
    if not links:
        raise SonomaError(ErrorCode.PARAM_ERROR, "source and destination coincide")
    return min(l.available_mbps for l in links)


# -- ping / traceroute -----------------------------------------------------

LOOPBACK_RTT_MS = 0.001


def _rtt_ms(links: list[SimLink], size_bytes: int) -> float:
    one_way = sum(l.delay_ms + size_bytes * 8 / (l.capacity_mbps * 1e3) for l in links)
    return max(round(2 * one_way, 3), LOOPBACK_RTT_MS)


def _check_ping_params(count: int, size_bytes: int) -> None:
    if count < 1:
        raise SonomaError(ErrorCode.PARAM_ERROR, "count must be >= 1")
    if not 28 <= size_bytes <= 65535:
        raise SonomaError(ErrorCode.PARAM_ERROR, "sizeBytes must be in [28, 65535]")


def ping_probes(topo: SimTopology, src: str, dst: str, count: int, size_bytes: int,
                seed: int = 0) -> list[float | None]:
    """Per-probe RTT in ms, ``None`` for a lost probe."""
    _check_ping_params(count, size_bytes)
    try:
        route = compute_route(topo, src, dst)
    except SonomaError as exc:
        if exc.code is ErrorCode.NO_ROUTE:
            return [None] * count
        raise
    links = route_links(topo, route)
    rtt = _rtt_ms(links, size_bytes)
    out: list[float | None] = []
    for probe in range(count):
        lost = any(
            _lost(l, seed, "ping", probe, i, direction)
            for i, l in enumerate(links) for direction in ("fwd", "rev")
        )
        out.append(None if lost else rtt)
    return out


def simulate_ping(topo: SimTopology, src: str, dst: str, count: int, size_bytes: int,
                  seed: int = 0) -> PingResult:
    probes = ping_probes(topo, src, dst, count, size_bytes, seed)
    rtts = tuple(r for r in probes if r is not None)
    return PingResult(topo.node(dst).ip_address, count, len(rtts), rtts, size_bytes)


def simulate_traceroute(topo: SimTopology, src: str, dst: str, size_bytes: int = 60) -> TracerouteResult:
    target = topo.node(dst).ip_address
    try:
        route = compute_route(topo, src, dst)
    except SonomaError as exc:
        if exc.code is not ErrorCode.NO_ROUTE:
            raise
        hops = tuple(Hop(ttl, None, None) for ttl in range(1, TRACEROUTE_MAX_TTL + 1))
        return TracerouteResult(target, hops)
    links = route_links(topo, route)
    hops = tuple(
        Hop(k, topo.address(route[k]), _rtt_ms(links[:k], size_bytes))
        for k in range(1, min(len(route), TRACEROUTE_MAX_TTL + 1))
    )
    return TracerouteResult(target, hops)


# -- chirps and trains -----------------------------------------------------


class _Fifo:
    """Per-link FIFO state shared by all packets of one probe sequence."""

    def __init__(self):
        self.last_departure: dict[tuple[str, str], float] = {}

    def traverse(self, links: list[SimLink], t: float, size_bytes: int, seed: int,
                 stream: str, packet: int) -> float | None:
        for i, link in enumerate(links):
            if _lost(link, seed, stream, packet, i):
                return None
            key = (link.src, link.dst)
            service_us = size_bytes * 8 / link.available_mbps
            depart = max(t, self.last_departure.get(key, float("-inf"))) + service_us
            self.last_departure[key] = depart
            t = depart + link.delay_ms * 1e3
        return t


def chirp_send_times(n_packets: int, initial_gap_us: float, gap_ratio: float,
                     start_us: int = 0) -> list[int]:
    """Emission times on the microsecond grid; gap k is initial * ratio**(k-1)."""
    out, t = [start_us], float(start_us)
    for k in range(1, n_packets):
        t += initial_gap_us * gap_ratio ** (k - 1)
        out.append(round(t))
    return out


def check_chirp_params(n_packets: int, size_bytes: int, initial_gap_us: float, gap_ratio: float) -> None:
    if n_packets < 2:
        raise SonomaError(ErrorCode.PARAM_ERROR, "nPackets must be >= 2")
    if not 0 < gap_ratio < 1:
        raise SonomaError(ErrorCode.PARAM_ERROR, "gapRatio must be in (0, 1)")
    if initial_gap_us <= 0:
        raise SonomaError(ErrorCode.PARAM_ERROR, "initialGapUs must be positive")
    if not 28 <= size_bytes <= 65535:
        raise SonomaError(ErrorCode.PARAM_ERROR, "sizeBytes must be in [28, 65535]")
    if initial_gap_us * gap_ratio ** (n_packets - 2) < 1:
        raise SonomaError(ErrorCode.PARAM_ERROR, "smallest gap is below one microsecond")


def simulate_chirp(topo: SimTopology, src: str, dst: str, n_packets: int, size_bytes: int,
                   initial_gap_us: float, gap_ratio: float, seed: int = 0,
                   start_us: int = 0) -> list[ChirpRecord]:
    check_chirp_params(n_packets, size_bytes, initial_gap_us, gap_ratio)
    sends = chirp_send_times(n_packets, initial_gap_us, gap_ratio, start_us)
    try:
        links = route_links(topo, compute_route(topo, src, dst))
    except SonomaError as exc:
        if exc.code is not ErrorCode.NO_ROUTE:
            raise
        return [ChirpRecord(k, s, None, size_bytes) for k, s in enumerate(sends)]
    fifo = _Fifo()
    out = []
    for k, s in enumerate(sends):
        arrival = fifo.traverse(links, s, size_bytes, seed, "chirp", k)
        out.append(ChirpRecord(k, s, None if arrival is None else round(arrival), size_bytes))
    return out


def train_gap_us(topo: SimTopology, src: str, size_bytes: int) -> float:
    return size_bytes * 8 / topo.node(src).line_rate_mbps


def simulate_train(topo: SimTopology, src: str, dsts: list[str], n_packets: int, size_bytes: int,
                   seed: int = 0, start_us: int = 0) -> list[TrainRecord]:
    """Back-to-back train at the source line rate, round-robin over ``dsts``."""
    if not dsts:
        raise SonomaError(ErrorCode.PARAM_ERROR, "dsts must be non-empty")
    if n_packets < 2:
        raise SonomaError(ErrorCode.PARAM_ERROR, "nPackets must be >= 2")
    if not 28 <= size_bytes <= 65535:
        raise SonomaError(ErrorCode.PARAM_ERROR, "sizeBytes must be in [28, 65535]")
    gap = train_gap_us(topo, src, size_bytes)
    routes: dict[str, list[SimLink] | None] = {}
    for d in dsts:
        try:
            routes[d] = route_links(topo, compute_route(topo, src, d))
        except SonomaError as exc:
            if exc.code is not ErrorCode.NO_ROUTE:
                raise
            routes[d] = None
    fifo = _Fifo()
    out = []
    for i in range(n_packets):
        d = dsts[i % len(dsts)]
        s = round(start_us + i * gap)
        links = routes[d]
        arrival = None if links is None else fifo.traverse(links, s, size_bytes, seed, "train", i)
        out.append(TrainRecord(i, s, None if arrival is None else round(arrival), size_bytes,
                               topo.node(d).ip_address))
    return out
