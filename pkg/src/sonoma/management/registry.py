"""Lookup service: agent registry with periodic health probes, plus the resource broker."""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from ..agent import AgentClient
from ..model import Capability, ErrorCode, GrayList, NodeDescriptor, NodeStatus, SonomaError

logger = logging.getLogger(__name__)

OFFLINE_AFTER_MISSES = 3


@dataclass
class AgentEntry:
    node_id: str
    client: AgentClient
    gray: GrayList | None = None
    descriptor: NodeDescriptor | None = None
    misses: int = 0
    task_count: int = 0

    @property
    def online(self) -> bool:
        return self.descriptor is not None and self.misses < OFFLINE_AFTER_MISSES


class Registry:
    def __init__(self):
        self._lock = threading.Lock()
        self._agents: dict[str, AgentEntry] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @classmethod
    def load(cls, path: str | Path) -> Registry:
        """Registry file: ``[{nodeId, url, grayListConstraints?}, ...]``."""
        reg = cls()
        for item in json.loads(Path(path).read_text()):
            gray = item.get("grayListConstraints")
            reg.register(item["nodeId"], item["url"],
                         GrayList(gray["maxProbeRatePps"], gray["maxPacketBytes"]) if gray else None,
                         probe=False)
        return reg

    def register(self, node_id: str, url: str, gray: GrayList | None = None, probe: bool = True) -> AgentEntry:
        entry = AgentEntry(node_id, AgentClient(url), gray)
        with self._lock:
            self._agents[node_id] = entry
        if probe:
            self.probe(node_id)
        return entry

    def probe(self, node_id: str) -> bool:
        with self._lock:
            entry = self._agents[node_id]
        try:
            caps = entry.client.get_capabilities()
        except SonomaError as exc:
            with self._lock:
                entry.misses += 1
                if entry.misses == OFFLINE_AFTER_MISSES:
                    logger.warning("agent %s is offline: %s", node_id, exc)
            return False
        desc = NodeDescriptor(
            node_id=caps["nodeId"],
            address=caps["address"],
            capabilities=frozenset(Capability(c) for c in caps["capabilities"]),
            status=NodeStatus(caps["status"]),
            gray_list_constraints=entry.gray,
            line_rate_mbps=caps.get("lineRateMbps"),
        )
        with self._lock:
            entry.descriptor = desc
            entry.misses = 0
        return True

    def probe_all(self) -> None:
        with self._lock:
            ids = list(self._agents)
        for node_id in ids:
            self.probe(node_id)

    def start_health(self, interval_sec: float = 10.0) -> None:
        def loop():
            while not self._stop.wait(interval_sec):
                self.probe_all()

        self._thread = threading.Thread(target=loop, daemon=True, name="agent-health")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()

    def entries(self) -> list[AgentEntry]:
        with self._lock:
            return list(self._agents.values())

    def resolve(self, ref: str) -> AgentEntry:
        """Find an agent by node id or address; it must be online."""
        with self._lock:
            entry = self._agents.get(ref)
            if entry is None:
                entry = next((e for e in self._agents.values()
                              if e.descriptor is not None and e.descriptor.address == ref), None)
        if entry is None:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"no measurement agent {ref!r}")
        if not entry.online:
            raise SonomaError(ErrorCode.NODE_UNAVAILABLE, f"agent {entry.node_id} is offline")
        return entry

    def count_task(self, node_id: str) -> None:
        with self._lock:
            self._agents[node_id].task_count += 1


class ResourceBroker:
    """Exclusive, all-or-nothing reservations of agents for time-reserving work."""

    def __init__(self):
        self._lock = threading.Lock()
        self._holders: dict[str, str] = {}

    def acquire(self, node_ids: list[str], holder: str) -> None:
        with self._lock:
            busy = [n for n in node_ids if n in self._holders]
            if busy:
                raise SonomaError(ErrorCode.BUSY, f"agents {busy} are reserved")
            for n in node_ids:
                self._holders[n] = holder

    def release(self, holder: str) -> None:
        with self._lock:
            for n in [n for n, h in self._holders.items() if h == holder]:
                del self._holders[n]

    def holder_of(self, node_id: str) -> str | None:
        with self._lock:
            return self._holders.get(node_id)


def descriptor_view(entry: AgentEntry, broker: ResourceBroker) -> NodeDescriptor:
    desc = entry.descriptor
    if broker.holder_of(entry.node_id) is not None:
        desc = replace(desc, status=NodeStatus.BUSY)
    return desc
