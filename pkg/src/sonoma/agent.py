"""Measurement Agent daemon.

Serves the Instructor interface (``POST /instructor/<operation>``), runs
atomic tasks on a backend and signals the management layer through the
callback interface when a task finishes.

Task table, reservation and execution log live behind one lock; measurement
workers only touch them through short critical sections.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import shutil
import socket
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from . import parsers, rpc, simnet
from .model import (
    PROTOCOL_VERSION,
    REQUIRED_CAPABILITY,
    AtomicTask,
    Capability,
    ErrorCode,
    NodeStatus,
    ResourceMode,
    SonomaError,
    State,
    TaskKind,
    estimate_duration,
    from_wire,
    to_wire,
)

logger = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    node_id: str
    listen_address: str = "127.0.0.1:0"
    ml_callback_url: str | None = None
    backend: str = "SIM"
    topology_path: str | None = None
    capabilities: frozenset[Capability] = frozenset(Capability)
    max_concurrent_time_sharing: int = 8
    # SIM: wall-clock pause between emitted rows; 0 runs at full speed
    sim_pacing_sec: float = 0.0
    lease_factor: float = 2.0
    callback_retry_delays_sec: tuple[float, ...] = (1.0, 4.0, 16.0)
    # REAL backend only
    address: str | None = None
    line_rate_mbps: float = 100.0
    probe_port: int = 9999

    def __post_init__(self):
        self.capabilities = frozenset(Capability(c) for c in self.capabilities)
        if not self.capabilities:
            raise ValueError("an agent needs at least one capability")
        if self.backend not in ("SIM", "REAL"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "SIM" and not self.topology_path:
            raise ValueError("SIM backend requires topologyPath")
        if self.max_concurrent_time_sharing < 1:
            raise ValueError("maxConcurrentTimeSharing must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> AgentConfig:
        keys = {
            "nodeId": "node_id", "listenAddress": "listen_address", "mlCallbackUrl": "ml_callback_url",
            "backend": "backend", "topologyPath": "topology_path", "capabilities": "capabilities",
            "maxConcurrentTimeSharing": "max_concurrent_time_sharing", "simPacingSec": "sim_pacing_sec",
            "leaseFactor": "lease_factor", "callbackRetryDelaysSec": "callback_retry_delays_sec",
            "address": "address", "lineRateMbps": "line_rate_mbps", "probePort": "probe_port",
        }
        unknown = set(data) - set(keys)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {keys[k]: v for k, v in data.items()}
        if "callback_retry_delays_sec" in kwargs:
            kwargs["callback_retry_delays_sec"] = tuple(kwargs["callback_retry_delays_sec"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> AgentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ReservationState:
    holder: str | None = None
    held_since: int = 0
    lease_sec: float = 0.0


# -- backends --------------------------------------------------------------


class SimBackend:
    """Answers every probe from the simulated network."""

    supports = frozenset(Capability)

    def __init__(self, topo: simnet.SimTopology, node_id: str):
        self.topo = topo
        self.node = topo.node(node_id)

    @property
    def address(self) -> str:
        return self.node.ip_address

    @property
    def line_rate_mbps(self) -> float:
        return self.node.line_rate_mbps

    def validate(self, kind: TaskKind, params: dict) -> None:
        for key in ("target", "destination", "source"):
            if key in params:
                self._known(params[key])
        for ref in params.get("destinations", ()):
            self._known(ref)

    def _known(self, ref: str) -> None:
        try:
            self.topo.node(ref)
        except SonomaError as exc:
            raise SonomaError(ErrorCode.PARAM_ERROR, exc.message) from None

    def rows(self, kind: TaskKind, p: dict, abort: threading.Event) -> Iterator[dict]:
        topo, me, seed = self.topo, self.address, p.get("seed", 0)
        target = topo.node(p["target"]).ip_address if "target" in p else None
        if kind is TaskKind.PING:
            probes = simnet.ping_probes(topo, me, target, p["count"], p["sizeBytes"], seed)
            yield from parsers.ping_rows(me, target, probes, p["sizeBytes"])
        elif kind is TaskKind.TRACEROUTE:
            result = simnet.simulate_traceroute(topo, me, target, p.get("sizeBytes", 60))
            yield from parsers.traceroute_rows(me, result)
        elif kind is TaskKind.CHIRP_SEND:
            records = simnet.simulate_chirp(topo, me, p["destination"], p["nPackets"], p["sizeBytes"],
                                            p["initialGapUs"], p["gapRatio"], seed)
            yield from parsers.chirp_send_rows(records)
        elif kind is TaskKind.CAPTURE:
            records = simnet.simulate_chirp(topo, p["source"], me, p["nPackets"], p["sizeBytes"],
                                            p["initialGapUs"], p["gapRatio"], seed)
            yield from parsers.capture_rows(records)
        elif kind is TaskKind.TRAIN_SEND:
            records = simnet.simulate_train(topo, me, p["destinations"], p["nPackets"], p["sizeBytes"], seed)
            yield from parsers.train_send_rows(records)
        elif kind is TaskKind.TRAIN_RECV:
            records = simnet.simulate_train(topo, p["source"], p["destinations"], p["nPackets"],
                                            p["sizeBytes"], seed)
            yield from parsers.train_recv_rows(records, me)


_PING_RE = re.compile(r"icmp_seq=(\d+).*time=([\d.]+)")
_HOP_RE = re.compile(r"^\s*(\d+)\s+(\S+)\s+([\d.]+)\s*ms")
_PROBE = struct.Struct("!IQ")


class RealBackend:
    """Best-effort probes from an unprivileged process.

    ping/traceroute shell out to the system tools; chirps and trains are UDP
    datagrams carrying ``(index, send time)`` to ``probePort`` on the peer.
    """

    def __init__(self, address: str, line_rate_mbps: float, probe_port: int):
        self.address = address
        self.line_rate_mbps = line_rate_mbps
        self.probe_port = probe_port
        caps = {Capability.CHIRP, Capability.TRAIN}
        if shutil.which("ping"):
            caps.add(Capability.PING)
        if shutil.which("traceroute"):
            caps.add(Capability.TRACEROUTE)
        self.supports = frozenset(caps)

    def validate(self, kind: TaskKind, params: dict) -> None:
        pass

    def rows(self, kind: TaskKind, p: dict, abort: threading.Event) -> Iterator[dict]:
        if kind is TaskKind.PING:
            return self._ping(p)
        if kind is TaskKind.TRACEROUTE:
            return self._traceroute(p)
        if kind is TaskKind.CHIRP_SEND:
            gaps = [p["initialGapUs"] * p["gapRatio"] ** k for k in range(p["nPackets"] - 1)]
            return self._send([p["destination"]] * p["nPackets"], gaps, p["sizeBytes"], abort, chirp=True)
        if kind is TaskKind.TRAIN_SEND:
            dsts = p["destinations"]
            gap = p["sizeBytes"] * 8 / self.line_rate_mbps
            seq = [dsts[i % len(dsts)] for i in range(p["nPackets"])]
            return self._send(seq, [gap] * (p["nPackets"] - 1), p["sizeBytes"], abort, chirp=False)
        if kind in (TaskKind.CAPTURE, TaskKind.TRAIN_RECV):
            expect = p["nPackets"] if kind is TaskKind.CAPTURE else sum(
                1 for i in range(p["nPackets"]) if p["destinations"][i % len(p["destinations"])] == self.address)
            # bind now so the socket exists before the sender starts
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind(("0.0.0.0", self.probe_port))
            sock.settimeout(0.2)
            timeout = estimate_duration(kind, p, self.line_rate_mbps)
            return self._capture(sock, expect, timeout, abort, None if kind is TaskKind.CAPTURE else self.address)
        raise SonomaError(ErrorCode.CAPABILITY_MISSING, kind.value)

    def _ping(self, p: dict) -> Iterator[dict]:
        cmd = ["ping", "-n", "-c", str(p["count"]), "-s", str(p["sizeBytes"] - 28),
               "-i", str(max(p.get("intervalSec", 1.0), 0.2)), p["target"]]
        out = subprocess.run(cmd, capture_output=True, text=True, timeout=estimate_duration(TaskKind.PING, p) + 5)
        got = {int(m.group(1)): float(m.group(2)) for m in _PING_RE.finditer(out.stdout)}
        for seq in range(p["count"]):
            yield {"source": self.address, "target": p["target"], "seq": seq,
                   "rttMs": got.get(seq + 1), "sizeBytes": p["sizeBytes"]}

    def _traceroute(self, p: dict) -> Iterator[dict]:
        cmd = ["traceroute", "-n", "-q", "1", "-m", "30", p["target"], str(p.get("sizeBytes", 60))]
        out = subprocess.run(cmd, capture_output=True, text=True, timeout=60)
        for line in out.stdout.splitlines()[1:]:
            m = _HOP_RE.match(line)
            if m:
                yield {"source": self.address, "target": p["target"], "ttl": int(m.group(1)),
                       "address": m.group(2), "rttMs": float(m.group(3))}
            elif line.strip() and line.split()[0].isdigit():
                yield {"source": self.address, "target": p["target"], "ttl": int(line.split()[0]),
                       "address": None, "rttMs": None}

    def _send(self, dsts: list[str], gaps: list[float], size: int, abort, chirp: bool) -> Iterator[dict]:
        pad = b"\0" * max(size - 28 - _PROBE.size, 0)
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            due = time.perf_counter_ns()
            for i, dst in enumerate(dsts):
                if i:
                    due += int(gaps[i - 1] * 1000)
                while time.perf_counter_ns() < due:
                    pass
                if abort.is_set():
                    return
                sent = time.time_ns() // 1000
                sock.sendto(_PROBE.pack(i, sent) + pad, (dst, self.probe_port))
                row = {"packetIndex": i, "sendTimestampUs": sent, "sizeBytes": size}
                if not chirp:
                    row = {"packetIndex": i, "destination": dst, "sendTimestampUs": sent, "sizeBytes": size}
                yield row

    def _capture(self, sock, expect: int, timeout: float, abort, destination) -> Iterator[dict]:
        deadline = time.monotonic() + timeout
        got = 0
        with sock:
            while got < expect and time.monotonic() < deadline and not abort.is_set():
                try:
                    data, _ = sock.recvfrom(65535)
                except socket.timeout:
                    continue
                recv = time.time_ns() // 1000
                index, _sent = _PROBE.unpack_from(data)
                got += 1
                row = {"packetIndex": index, "recvTimestampUs": recv, "sizeBytes": len(data) + 28}
                if destination is not None:
                    row["destination"] = destination
                yield row


# -- callback notifier -----------------------------------------------------


class CallbackNotifier:
    """At-least-once ``POST <ml>/callback {taskId}`` with backoff between attempts."""

    def __init__(self, ml_url: str | None, delays: tuple[float, ...] = (1.0, 4.0, 16.0)):
        self.ml_url = ml_url.rstrip("/") if ml_url else None
        self.delays = delays

    def __call__(self, task_id: str) -> None:
        if self.ml_url:
            threading.Thread(target=self._deliver, args=(task_id,), daemon=True).start()

    def _deliver(self, task_id: str) -> None:
        for attempt, delay in enumerate((0.0, *self.delays)):
            if delay:
                time.sleep(delay)
            try:
                rpc.request(f"{self.ml_url}/callback", {"taskId": task_id}, timeout=10)
                return
            except SonomaError as exc:
                # ML answered; retrying won't change the verdict
                logger.warning("callback for %s rejected: %s", task_id, exc)
                return
            except rpc.TransportError as exc:
                logger.info("callback attempt %d for %s failed: %s", attempt + 1, task_id, exc)
        logger.warning("giving up on callback for %s; ML must poll", task_id)


# -- agent -----------------------------------------------------------------


@dataclass
class _Entry:
    task: AtomicTask
    state: State
    expected_sec: float
    rows: list = field(default_factory=list)
    abort: threading.Event = field(default_factory=threading.Event)
    error: str | None = None


def _check_params(kind: TaskKind, p: dict) -> None:
    def need(*keys):
        missing = [k for k in keys if k not in p]
        if missing:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"{kind.value} needs {missing}")

    if kind is TaskKind.PING:
        need("target", "count", "sizeBytes")
        if p["count"] < 1 or not 28 <= p["sizeBytes"] <= 65535 or p.get("intervalSec", 1.0) < 0:
            raise SonomaError(ErrorCode.PARAM_ERROR, "bad ping parameters")
    elif kind is TaskKind.TRACEROUTE:
        need("target")
    elif kind in (TaskKind.CHIRP_SEND, TaskKind.CAPTURE):
        need("nPackets", "sizeBytes", "initialGapUs", "gapRatio",
             "destination" if kind is TaskKind.CHIRP_SEND else "source")
        simnet.check_chirp_params(p["nPackets"], p["sizeBytes"], p["initialGapUs"], p["gapRatio"])
    else:
        need("destinations", "nPackets", "sizeBytes", *(["source"] if kind is TaskKind.TRAIN_RECV else []))
        if not p["destinations"] or p["nPackets"] < 2 or not 28 <= p["sizeBytes"] <= 65535:
            raise SonomaError(ErrorCode.PARAM_ERROR, "bad train parameters")


class MeasurementAgent:
    def __init__(self, config: AgentConfig, backend=None,
                 notifier: Callable[[str], None] | None = None,
                 on_row: Callable[[str, int], None] | None = None):
        self.config = config
        if backend is None:
            if config.backend == "SIM":
                backend = SimBackend(simnet.SimTopology.load(config.topology_path), config.node_id)
            else:
                backend = RealBackend(config.address or "127.0.0.1", config.line_rate_mbps, config.probe_port)
        missing = config.capabilities - backend.supports
        if missing:
            raise ValueError(f"backend cannot provide {sorted(c.value for c in missing)}")
        self.backend = backend
        self.notify = notifier or CallbackNotifier(config.ml_callback_url, config.callback_retry_delays_sec)
        self.on_row = on_row
        self.reservation = ReservationState()
        self._lock = threading.Lock()
        self._tasks: dict[str, _Entry] = {}
        self._log: list[dict] = []
        self._lease_timer: threading.Timer | None = None

    @property
    def node_id(self) -> str:
        return self.config.node_id

    # -- instructor interface

    def get_capabilities(self) -> dict:
        with self._lock:
            busy = self.reservation.holder is not None
        return {
            "nodeId": self.node_id,
            "address": self.backend.address,
            "capabilities": sorted(c.value for c in self.config.capabilities),
            "status": (NodeStatus.BUSY if busy else NodeStatus.FREE).value,
            "protocolVersion": PROTOCOL_VERSION,
            "lineRateMbps": self.backend.line_rate_mbps,
        }

    def start_task(self, task: AtomicTask | dict) -> dict:
        if isinstance(task, dict):
            try:
                task = from_wire(AtomicTask, task)
            except (KeyError, TypeError, ValueError) as exc:
                raise SonomaError(ErrorCode.PARAM_ERROR, f"malformed task: {exc}") from None
        if REQUIRED_CAPABILITY[task.kind] not in self.config.capabilities:
            raise SonomaError(ErrorCode.CAPABILITY_MISSING, f"{self.node_id} cannot run {task.kind.value}")
        _check_params(task.kind, task.params)
        self.backend.validate(task.kind, task.params)
        expected = estimate_duration(task.kind, task.params, self.backend.line_rate_mbps)
        reply = {"taskId": task.task_id, "accepted": True, "expectedDurationSec": expected}
        with self._lock:
            if task.task_id in self._tasks:
                return reply
            if task.resource_mode is ResourceMode.TIME_RESERVING:
                if self.reservation.holder is not None:
                    return {**reply, "accepted": False, "reason": ErrorCode.BUSY.value}
                lease = self.config.lease_factor * expected
                self.reservation = ReservationState(task.task_id, time.time_ns() // 1000, lease)
                self._lease_timer = threading.Timer(lease, self._expire, args=(task.task_id,))
                self._lease_timer.daemon = True
                self._lease_timer.start()
            else:
                running = sum(1 for e in self._tasks.values()
                              if e.state is State.RUNNING and e.task.resource_mode is ResourceMode.TIME_SHARING)
                if running >= self.config.max_concurrent_time_sharing:
                    return {**reply, "accepted": False, "reason": ErrorCode.BUSY.value}
            entry = _Entry(task, State.RUNNING, expected)
            self._tasks[task.task_id] = entry
            self._log.append({"taskId": task.task_id, "kind": task.kind.value,
                              "resourceMode": task.resource_mode.value,
                              "startNs": time.monotonic_ns(), "endNs": None})
        threading.Thread(target=self._run, args=(entry,), daemon=True,
                         name=f"task-{task.task_id[:8]}").start()
        return reply

    def abort_task(self, task_id: str) -> dict:
        with self._lock:
            entry = self._entry(task_id)
            if entry.state is State.RUNNING:
                self._finish(entry, State.KILLED)
        return {"taskId": task_id, "acknowledged": True}

    def fetch_task_data(self, task_id: str) -> dict:
        with self._lock:
            entry = self._entry(task_id)
            if not entry.state.terminal:
                raise SonomaError(ErrorCode.NOT_READY, f"task {task_id} is {entry.state.value}")
            return {"taskId": task_id, "state": entry.state.value, "rawRows": list(entry.rows),
                    "error": entry.error}

    def get_log(self) -> list[dict]:
        with self._lock:
            return [dict(e) for e in self._log]

    def task_state(self, task_id: str) -> State:
        with self._lock:
            return self._entry(task_id).state

    # -- internals

    def _entry(self, task_id: str) -> _Entry:
        entry = self._tasks.get(task_id)
        if entry is None:
            raise SonomaError(ErrorCode.UNKNOWN_TASK, task_id)
        return entry

    def _finish(self, entry: _Entry, state: State) -> None:
        # caller holds the lock
        entry.state = state
        entry.abort.set()
        if self.reservation.holder == entry.task.task_id:
            self.reservation = ReservationState()
            if self._lease_timer is not None:
                self._lease_timer.cancel()
                self._lease_timer = None
        for rec in reversed(self._log):
            if rec["taskId"] == entry.task.task_id:
                rec["endNs"] = time.monotonic_ns()
                break

    def _expire(self, task_id: str) -> None:
        with self._lock:
            entry = self._tasks.get(task_id)
            if entry is None or entry.state is not State.RUNNING or self.reservation.holder != task_id:
                return
            logger.warning("reservation lease for %s expired", task_id)
            entry.error = "reservation lease expired"
            self._finish(entry, State.FAILED)
        self.notify(task_id)

    def _run(self, entry: _Entry) -> None:
        task = entry.task
        final = State.FINISHED
        error = None
        try:
            for row in self.backend.rows(task.kind, task.params, entry.abort):
                with self._lock:
                    if entry.state is not State.RUNNING:
                        break
                    entry.rows.append(row)
                    count = len(entry.rows)
                if self.on_row is not None:
                    self.on_row(task.task_id, count)
                if self.config.sim_pacing_sec and entry.abort.wait(self.config.sim_pacing_sec):
                    break
        except Exception as exc:  # noqa: BLE001
            logger.exception("task %s failed", task.task_id)
            final, error = State.FAILED, str(exc)
        with self._lock:
            if entry.state is not State.RUNNING:
                return
            entry.error = error
            self._finish(entry, final)
        self.notify(task.task_id)

    # -- HTTP

    def route(self, method: str, path: str, query: dict, body) -> object:
        body = body or {}
        ops = {
            "/instructor/getCapabilities": lambda: self.get_capabilities(),
            "/instructor/startTask": lambda: self.start_task(body.get("task", body)),
            "/instructor/abortTask": lambda: self.abort_task(body["taskId"]),
            "/instructor/fetchTaskData": lambda: self.fetch_task_data(body["taskId"]),
            "/instructor/getLog": lambda: self.get_log(),
        }
        if path not in ops:
            raise SonomaError(ErrorCode.UNKNOWN_OPERATION, path)
        try:
            return ops[path]()
        except KeyError as exc:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"missing field {exc}") from None

    def serve(self, address: str | None = None) -> rpc.JsonServer:
        server = rpc.JsonServer(rpc.parse_listen(address or self.config.listen_address), self.route)
        return server.start()


class AgentClient:
    """ML-side stub for one agent's Instructor interface."""

    def __init__(self, url: str, timeout: float = 15.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _call(self, op: str, body: dict | None = None):
        try:
            return rpc.request(f"{self.url}/instructor/{op}", body or {}, timeout=self.timeout)
        except rpc.TransportError as exc:
            raise SonomaError(ErrorCode.NODE_UNAVAILABLE, str(exc)) from None

    def get_capabilities(self) -> dict:
        return self._call("getCapabilities")

    def start_task(self, task: AtomicTask) -> dict:
        return self._call("startTask", to_wire(task))

    def abort_task(self, task_id: str) -> dict:
        return self._call("abortTask", {"taskId": task_id})

    def fetch_task_data(self, task_id: str) -> dict:
        return self._call("fetchTaskData", {"taskId": task_id})

    def get_log(self) -> list[dict]:
        return self._call("getLog")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="agent", description="Measurement Agent daemon")
    parser.add_argument("--config", required=True, help="agent config JSON")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    agent = MeasurementAgent(AgentConfig.load(args.config))
    server = agent.serve()
    logger.info("agent %s (%s) listening on %s", agent.node_id, agent.backend.address, server.url)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
