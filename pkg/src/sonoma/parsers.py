"""Flat row encodings of each atomic measurement and their typed readers.

Agents emit flat rows (one dict of scalars per probe/hop/packet) so partial
results survive an abort. The management layer reads them back into the
typed results and aligns the two halves of paired probes (sender and
capture) by packet index.
"""
from __future__ import annotations

from .model import ChirpRecord, Hop, PingResult, TracerouteResult, TrainRecord, to_wire


def ping_rows(source: str, target: str, probes: list[float | None], size_bytes: int) -> list[dict]:
    return [
        {"source": source, "target": target, "seq": i, "rttMs": rtt, "sizeBytes": size_bytes}
        for i, rtt in enumerate(probes)
    ]


def rows_to_ping(rows: list[dict]) -> PingResult:
    rtts = tuple(r["rttMs"] for r in rows if r["rttMs"] is not None)
    return PingResult(rows[0]["target"], len(rows), len(rtts), rtts, rows[0]["sizeBytes"])


def traceroute_rows(source: str, result: TracerouteResult) -> list[dict]:
    return [
        {"source": source, "target": result.target, "ttl": h.ttl, "address": h.address,
         "rttMs": h.rtt_ms}
        for h in result.hops
    ]


def rows_to_traceroute(target: str, rows: list[dict]) -> TracerouteResult:
    hops = tuple(Hop(r["ttl"], r["address"], r["rttMs"]) for r in sorted(rows, key=lambda r: r["ttl"]))
    return TracerouteResult(target, hops)


def chirp_send_rows(records: list[ChirpRecord]) -> list[dict]:
    return [
        {"packetIndex": r.packet_index, "sendTimestampUs": r.send_timestamp_us, "sizeBytes": r.size_bytes}
        for r in records
    ]


def capture_rows(records) -> list[dict]:
    """Receiver side: only packets that arrived."""
    return [
        {"packetIndex": r.packet_index, "recvTimestampUs": r.recv_timestamp_us, "sizeBytes": r.size_bytes}
        for r in records if r.recv_timestamp_us is not None
    ]


def align_chirp(send_rows: list[dict], recv_rows: list[dict]) -> list[ChirpRecord]:
    """Match emission and reception timestamps by packet index."""
    recv = {r["packetIndex"]: r["recvTimestampUs"] for r in recv_rows}
    return [
        ChirpRecord(s["packetIndex"], s["sendTimestampUs"], recv.get(s["packetIndex"]), s["sizeBytes"])
        for s in sorted(send_rows, key=lambda r: r["packetIndex"])
    ]


def train_send_rows(records: list[TrainRecord]) -> list[dict]:
    return [
        {"packetIndex": r.packet_index, "destination": r.destination,
         "sendTimestampUs": r.send_timestamp_us, "sizeBytes": r.size_bytes}
        for r in records
    ]


def train_recv_rows(records: list[TrainRecord], destination: str) -> list[dict]:
    return [
        {"packetIndex": r.packet_index, "destination": destination,
         "recvTimestampUs": r.recv_timestamp_us, "sizeBytes": r.size_bytes}
        for r in records if r.destination == destination and r.recv_timestamp_us is not None
    ]


def align_train(send_rows: list[dict], recv_rows: list[dict]) -> list[TrainRecord]:
    recv = {r["packetIndex"]: r["recvTimestampUs"] for r in recv_rows}
    return [
        TrainRecord(s["packetIndex"], s["sendTimestampUs"], recv.get(s["packetIndex"]),
                    s["sizeBytes"], s["destination"])
        for s in sorted(send_rows, key=lambda r: r["packetIndex"])
    ]


def records_to_rows(records) -> list[dict]:
    return [to_wire(r) for r in records]
