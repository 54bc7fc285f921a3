"""Complex-measurement evaluation: chirp sweeps, the bandwidth estimator and route merging."""
from __future__ import annotations

import math
import statistics
from collections import defaultdict

from ..model import ChirpRecord, ErrorCode, SonomaError, TopologyGraph, TracerouteResult

SWEEP_PACKET_BYTES = 1500
SWEEP_START_MBPS = 1.0
SWEEP_MIN_PACKETS = 32
SWEEP_MAX_PACKETS = 256
# largest rate increase between consecutive chirp packets
SWEEP_MAX_STEP = 1.08
EXCURSION_LENGTH = 3


def default_sweep(line_rate_mbps: float, size_bytes: int = SWEEP_PACKET_BYTES) -> dict:
    """Chirp parameters sweeping from 1 Mbps to twice the sender's line rate.

    The top rate is clamped so that the last gap stays on the microsecond grid.

    The packet count is the smallest (at least 32) that keeps every rate step
    within ``SWEEP_MAX_STEP``.
    """
    # the smallest gap may not drop below one microsecond
    end_mbps = min(2 * line_rate_mbps, size_bytes * 8.0)
    # n packets give n - 1 gaps and n - 2 rate steps between them
    steps = math.ceil(math.log(end_mbps / SWEEP_START_MBPS) / math.log(SWEEP_MAX_STEP))
    n = min(max(SWEEP_MIN_PACKETS, steps + 2), SWEEP_MAX_PACKETS)
    return {
        "nPackets": n,
        "sizeBytes": size_bytes,
        "initialGapUs": size_bytes * 8 / SWEEP_START_MBPS,
        "gapRatio": (SWEEP_START_MBPS / end_mbps) ** (1 / (n - 2)),
    }


def queuing_delays(records: list[ChirpRecord]) -> dict[int, int]:
    """Per received packet: one-way delay minus the smallest one-way delay."""
    owd = {r.packet_index: r.recv_timestamp_us - r.send_timestamp_us
           for r in records if r.recv_timestamp_us is not None}
    if not owd:
        return {}
    base = min(owd.values())
    return {k: d - base for k, d in owd.items()}


def estimate_available_bandwidth(records: list[ChirpRecord]) -> float:
    """Rate (Mbps) of the first packet that opens a queuing excursion.

    An excursion starts at packet k when its queuing delay is positive and
    does not decrease over packets k, k+1, k+2. The packet's rate is its size
    over the gap since the previous emission.
    """
    by_index = {r.packet_index: r for r in records}
    q = queuing_delays(records)
    for k in sorted(q):
        if k == 0 or k - 1 not in by_index:
            continue
        window = [q.get(k + i) for i in range(EXCURSION_LENGTH)]
        if None in window or window[0] <= 0:
            continue
        if all(a <= b for a, b in zip(window, window[1:])):
            gap = by_index[k].send_timestamp_us - by_index[k - 1].send_timestamp_us
            return by_index[k].size_bytes * 8 / gap
    raise SonomaError(ErrorCode.ESTIMATION_FAILED, "no queuing excursion within the sweep")


def merge_routes(routes: list[tuple[str, TracerouteResult]]):
    """Union of traceroute paths as a directed graph.

    Each route starts at its source (RTT 0). An edge's delay is the mean of
    the positive RTT differences between its endpoints over all routes that
    traverse it. Returns the graph and per-edge sample counts.
    """
    nodes: set[str] = set()
    edges: set[tuple[str, str]] = set()
    samples: dict[tuple[str, str], list[float]] = defaultdict(list)
    for source, result in routes:
        path = [(source, 0.0)] + [(h.address, h.rtt_ms) for h in result.hops]
        nodes.update(a for a, _ in path if a is not None)
        for (a, ra), (b, rb) in zip(path, path[1:]):
            if a is None or b is None:
                continue
            edges.add((a, b))
            if ra is not None and rb is not None and rb - ra > 0:
                samples[(a, b)].append(rb - ra)
    delays = {e: statistics.fmean(v) for e, v in samples.items()}
    counts = {e: len(samples.get(e, ())) for e in edges}
    return TopologyGraph(frozenset(nodes), frozenset(edges), delays), counts


def edge_rows(graph: TopologyGraph, counts: dict) -> list[dict]:
    return [
        {"from": a, "to": b, "delayMs": graph.per_edge_delay_ms.get((a, b)), "samples": counts.get((a, b), 0)}
        for a, b in sorted(graph.edges)
    ]


def route_stats(lengths: list[int]) -> dict:
    return {
        "routes": len(lengths),
        "meanRouteLength": statistics.fmean(lengths) if lengths else 0.0,
        "stdevRouteLength": statistics.pstdev(lengths) if lengths else 0.0,
    }


def graph_stats(rows: list[dict]) -> dict:
    """Summary of an edge list; ``delayMs`` may be ``None`` or ``""`` for edges without samples."""
    nodes = {r["from"] for r in rows} | {r["to"] for r in rows}
    delays = [float(r["delayMs"]) for r in rows if r["delayMs"] not in (None, "")]
    return {
        "nodes": len(nodes),
        "edges": len(rows),
        "linksWithDelay": len(delays),
        "averageDelayMs": statistics.fmean(delays) if delays else 0.0,
        "linksBelow1ms": sum(1 for d in delays if d < 1.0),
    }
