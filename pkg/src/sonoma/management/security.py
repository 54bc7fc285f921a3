"""Security checker: parameter caps, denied targets and per-agent gray lists."""
from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field

from ..model import ErrorCode, GrayList, SonomaError

# broadcast, multicast, "this network"
ALWAYS_DENIED = ("255.255.255.255/32", "224.0.0.0/4", "0.0.0.0/8")


@dataclass(frozen=True)
class SecurityPolicy:
    max_probe_rate_pps: int = 50_000
    max_packet_bytes: int = 9000
    max_count: int = 1000
    denied_target_prefixes: tuple[str, ...] = field(default=ALWAYS_DENIED)

    def __post_init__(self):
        if min(self.max_probe_rate_pps, self.max_packet_bytes, self.max_count) <= 0:
            raise ValueError("security caps must be positive")
        merged = tuple(dict.fromkeys((*self.denied_target_prefixes, *ALWAYS_DENIED)))
        object.__setattr__(self, "denied_target_prefixes", merged)

    @classmethod
    def from_dict(cls, data: dict | None) -> SecurityPolicy:
        data = data or {}
        return cls(
            int(data.get("maxProbeRatePps", cls.max_probe_rate_pps)),
            int(data.get("maxPacketBytes", cls.max_packet_bytes)),
            int(data.get("maxCount", cls.max_count)),
            tuple(data.get("deniedTargetPrefixes", ALWAYS_DENIED)),
        )


class SecurityChecker:
    def __init__(self, policy: SecurityPolicy):
        self.policy = policy
        self._denied = [ipaddress.ip_network(p) for p in policy.denied_target_prefixes]

    @staticmethod
    def _reject(msg: str):
        raise SonomaError(ErrorCode.SECURITY_REJECTED, msg)

    def check_target(self, address: str) -> None:
        ip = ipaddress.ip_address(address)
        for net in self._denied:
            if ip.version == net.version and ip in net:
                self._reject(f"target {address} is in denied prefix {net}")

    def check_packet(self, size_bytes: int, grays: list[GrayList | None] = ()) -> None:
        if size_bytes > self.policy.max_packet_bytes:
            self._reject(f"packet size {size_bytes} B exceeds {self.policy.max_packet_bytes} B")
        for g in grays:
            if g is not None and size_bytes > g.max_packet_bytes:
                self._reject(f"packet size {size_bytes} B exceeds gray-list cap {g.max_packet_bytes} B")

    def check_rate(self, pps: float, grays: list[GrayList | None] = ()) -> None:
        if pps > self.policy.max_probe_rate_pps:
            self._reject(f"probe rate {pps:.0f} pps exceeds {self.policy.max_probe_rate_pps} pps")
        for g in grays:
            if g is not None and pps > g.max_probe_rate_pps:
                self._reject(f"probe rate {pps:.0f} pps exceeds gray-list cap {g.max_probe_rate_pps} pps")

    def check_ping(self, target: str, count: int, size_bytes: int, interval_sec: float,
                   gray: GrayList | None = None) -> None:
        if count > self.policy.max_count:
            self._reject(f"count {count} exceeds {self.policy.max_count}")
        self.check_target(target)
        self.check_packet(size_bytes, [gray])
        self.check_rate(1.0 / interval_sec if interval_sec > 0 else float("inf"), [gray])

    def check_traceroute(self, target: str, size_bytes: int, gray: GrayList | None = None) -> None:
        self.check_target(target)
        self.check_packet(size_bytes, [gray])

    def check_chirp(self, n_packets: int, size_bytes: int, initial_gap_us: float, gap_ratio: float,
                    grays: list[GrayList | None]) -> None:
        if n_packets > self.policy.max_count:
            self._reject(f"nPackets {n_packets} exceeds {self.policy.max_count}")
        self.check_packet(size_bytes, grays)
        smallest_gap_us = initial_gap_us * gap_ratio ** (n_packets - 2)
        self.check_rate(1e6 / smallest_gap_us, grays)

    def check_train(self, n_packets: int, size_bytes: int, line_rate_mbps: float,
                    grays: list[GrayList | None]) -> None:
        if n_packets > self.policy.max_count:
            self._reject(f"nPackets {n_packets} exceeds {self.policy.max_count}")
        self.check_packet(size_bytes, grays)
        self.check_rate(line_rate_mbps * 1e6 / (size_bytes * 8), grays)
