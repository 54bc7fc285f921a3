"""The management layer: sessions, scheduling, composite measurements and result flow.

Every measurement, synchronous or not, runs as a process made of atomic
tasks. Tasks are dispatched to agents in stages (captures before senders for
paired probes); completion arrives through agent callbacks, with polling as
the fallback. Raw rows reach the VO before any evaluation runs.
"""
from __future__ import annotations

import ipaddress
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .. import parsers
from ..model import (
    AtomicTask,
    Capability,
    ErrorCode,
    Layer,
    MeasurementKind,
    NodeStatus,
    ProcessHandle,
    SonomaError,
    State,
    TaskKind,
    advance,
    composite_duration,
    estimate_duration,
    new_token,
    now_us,
    to_wire,
)
from ..simnet import check_chirp_params
from ..vo import VoKey, VoStore, format_output
from . import processing
from .aas import AccountStore, SessionManager, schemas_from_config
from .registry import AgentEntry, Registry, ResourceBroker, descriptor_view
from .security import SecurityChecker, SecurityPolicy

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
PAIRED = (MeasurementKind.CHIRP, MeasurementKind.TRAIN, MeasurementKind.BANDWIDTH)


@dataclass
class MLConfig:
    version: str = VERSION
    listen_address: str = "127.0.0.1:8000"
    agent_registry_path: str | None = None
    accounts_path: str | None = None
    vo_path: str = "vo.sqlite"
    security_policy: SecurityPolicy = field(default_factory=SecurityPolicy)
    quotas: dict | None = None
    health_interval_sec: float = 10.0
    sim_seed: int = 0
    sync_poll_sec: float = 0.5
    sync_timeout_min_sec: float = 10.0

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> MLConfig:
        def path(key):
            value = data.get(key)
            if value and base_dir is not None and not Path(value).is_absolute():
                return str(base_dir / value)
            return value

        return cls(
            version=data.get("version", VERSION),
            listen_address=data.get("listenAddress", "127.0.0.1:8000"),
            agent_registry_path=path("agentRegistryPath"),
            accounts_path=path("accountsPath"),
            vo_path=path("voPath") or "vo.sqlite",
            security_policy=SecurityPolicy.from_dict(data.get("securityPolicy")),
            quotas=data.get("quotas"),
            health_interval_sec=float(data.get("healthIntervalSec", 10.0)),
            sim_seed=int(data.get("simSeed", 0)),
            sync_poll_sec=float(data.get("syncPollSec", 0.5)),
            sync_timeout_min_sec=float(data.get("syncTimeoutMinSec", 10.0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> MLConfig:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


@dataclass(eq=False)
class _Task:
    task: AtomicTask
    entry: AgentEntry
    expected: float
    role: str  # probe | send | capture
    source: str
    target: str
    state: State = State.SCHEDULED
    rows: list | None = None
    collected: bool = False
    stored: bool = False
    started_at: float | None = None
    error: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def task_id(self) -> str:
        return self.task.task_id


@dataclass(eq=False)
class _Process:
    process_id: str
    session_id: str
    kind: MeasurementKind
    stages: list[list[_Task]]
    expected: float
    reserved: bool = False
    state: State = State.SCHEDULED
    created_at: int = field(default_factory=now_us)
    dispatched: bool = False
    finalized: bool = False
    error: SonomaError | None = None
    result: object = None
    aligned: dict = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock)
    store_lock: threading.Lock = field(default_factory=threading.Lock)
    done: threading.Event = field(default_factory=threading.Event)

    @property
    def tasks(self) -> list[_Task]:
        return [t for stage in self.stages for t in stage]

    def handle(self) -> ProcessHandle:
        return ProcessHandle(self.process_id, self.session_id, self.kind, self.state, self.expected,
                             tuple(t.task_id for t in self.tasks), self.created_at)


class ManagementLayer:
    def __init__(self, config: MLConfig | None = None, vo: VoStore | None = None,
                 registry: Registry | None = None, accounts: AccountStore | None = None,
                 clock=time.monotonic):
        self.config = config or MLConfig()
        self.clock = clock
        self.vo = vo or VoStore(self.config.vo_path)
        if registry is None:
            registry = Registry.load(self.config.agent_registry_path) if self.config.agent_registry_path else Registry()
        self.registry = registry
        if accounts is None:
            accounts = AccountStore.load(self.config.accounts_path) if self.config.accounts_path else AccountStore()
        self.sessions = SessionManager(accounts, schemas_from_config(self.config.quotas), clock)
        self.security = SecurityChecker(self.config.security_policy)
        self.broker = ResourceBroker()
        self._lock = threading.RLock()
        self._procs: dict[str, _Process] = {}
        self._tasks: dict[str, tuple[_Task, _Process]] = {}
        self._dispatch_pool = ThreadPoolExecutor(16, thread_name_prefix="dispatch")
        self._io_pool = ThreadPoolExecutor(64, thread_name_prefix="agent-io")
        self._closing = False

    def start(self) -> None:
        self.registry.probe_all()
        self.registry.start_health(self.config.health_interval_sec)

    def shutdown(self) -> None:
        self._closing = True
        self.registry.stop()
        self._dispatch_pool.shutdown(wait=False, cancel_futures=True)
        self._io_pool.shutdown(wait=False, cancel_futures=True)

    def register_agent(self, node_id: str, url: str, gray=None) -> None:
        self.registry.register(node_id, url, gray)

    # -- sessions ----------------------------------------------------------

    def get_version(self) -> str:
        return self.config.version

    def request_session(self, user: str, credential: str = "", zip_results: bool = False,
                        format_results: str = "CSV") -> str:
        return self.sessions.open(user, credential, zip_results, format_results).id

    def close_session(self, session_id: str) -> dict:
        self.sessions.use(session_id, count=False)
        with self._lock:
            mine = [p for p in self._procs.values() if p.session_id == session_id]
        for proc in mine:
            if not proc.state.terminal:
                self._kill(proc)
        self.sessions.close(session_id)
        return {"acknowledged": True}

    def _use(self, session_id: str, asynchronous: bool = False):
        session, schema = self.sessions.use(session_id)
        if asynchronous and not schema.async_allowed:
            raise SonomaError(ErrorCode.ASYNC_FORBIDDEN, f"{session.privilege.value} sessions cannot run "
                              "asynchronous measurements")
        return session, schema

    # -- lookup ------------------------------------------------------------

    def get_node_list(self, session_id: str, filter: str = "ALL") -> list[dict]:
        self._use(session_id)
        cap = None if filter in (None, "ALL") else self._capability(filter)
        out = []
        for entry in self.registry.entries():
            if not entry.online:
                continue
            if cap is not None and cap not in entry.descriptor.capabilities:
                continue
            out.append(to_wire(descriptor_view(entry, self.broker)))
        return out

    @staticmethod
    def _capability(name: str) -> Capability:
        try:
            return Capability(name)
        except ValueError:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"unknown capability {name!r}") from None

    def _agent(self, ref: str, cap: Capability) -> AgentEntry:
        entry = self.registry.resolve(ref)
        if cap not in entry.descriptor.capabilities:
            raise SonomaError(ErrorCode.CAPABILITY_MISSING, f"{entry.node_id} lacks {cap.value}")
        return entry

    def _address(self, ref: str) -> str:
        """Probe target: an agent's address, or any IP literal."""
        try:
            return self.registry.resolve(ref).descriptor.address
        except SonomaError:
            pass
        try:
            return str(ipaddress.ip_address(ref))
        except ValueError:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"{ref!r} is neither an agent nor an IP address") from None

    def _seed(self, seed) -> int:
        return self.config.sim_seed if seed is None else int(seed)

    # -- task construction -------------------------------------------------

    def _task(self, entry: AgentEntry, kind: TaskKind, params: dict, role: str, source: str, target: str) -> _Task:
        task = AtomicTask.create(entry.node_id, kind, params)
        expected = estimate_duration(kind, params, entry.descriptor.line_rate_mbps)
        return _Task(task, entry, expected, role, source, target)

    def _ping_tasks(self, pairs, count: int, size_bytes: int, interval_sec: float, seed) -> list[_Task]:
        out = []
        for entry, target in pairs:
            addr = self._address(target)
            self.security.check_ping(addr, count, size_bytes, interval_sec, entry.gray)
            params = {"target": addr, "count": count, "sizeBytes": size_bytes, "intervalSec": interval_sec,
                      "seed": self._seed(seed)}
            out.append(self._task(entry, TaskKind.PING, params, "probe", entry.descriptor.address, addr))
        return out

    def _traceroute_tasks(self, pairs, size_bytes: int, skip_self: bool = False) -> list[_Task]:
        out = []
        for entry, target in pairs:
            addr = self._address(target)
            if addr == entry.descriptor.address:
                if skip_self:
                    continue
                raise SonomaError(ErrorCode.PARAM_ERROR, "traceroute target is the source itself")
            self.security.check_traceroute(addr, size_bytes, entry.gray)
            out.append(self._task(entry, TaskKind.TRACEROUTE, {"target": addr, "sizeBytes": size_bytes},
                                  "probe", entry.descriptor.address, addr))
        return out

    def _check_composite(self, schema, n_nodes: int) -> None:
        if n_nodes > schema.max_nodes_per_composite:
            raise SonomaError(ErrorCode.QUOTA, f"{n_nodes} nodes exceed the per-composite limit "
                              f"{schema.max_nodes_per_composite}")

    @staticmethod
    def _nonempty(name: str, items) -> list:
        if not isinstance(items, (list, tuple)) or not items:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"{name} must be a non-empty list")
        return list(items)

    # -- process lifecycle -------------------------------------------------

    def _process(self, session_id: str, kind: MeasurementKind, stages: list[list[_Task]],
                 reserve: list[str] | None = None) -> _Process:
        tasks = [t for s in stages for t in s]
        if len(tasks) == 1:
            expected = tasks[0].expected
        else:
            per_agent: dict[str, list[float]] = {}
            for t in tasks:
                per_agent.setdefault(t.entry.node_id, []).append(t.expected)
            expected = composite_duration(per_agent)
        proc = _Process(new_token(), session_id, kind, stages, expected)
        if reserve:
            self.broker.acquire(reserve, proc.process_id)
            proc.reserved = True
        with self._lock:
            self._procs[proc.process_id] = proc
            for t in tasks:
                self._tasks[t.task_id] = (t, proc)
        return proc

    def _launch(self, proc: _Process, sync: bool) -> _Process:
        if not sync:
            self._dispatch_pool.submit(self._dispatch, proc)
            return proc
        self._dispatch(proc)
        self._await(proc)
        return proc

    def _dispatch(self, proc: _Process) -> None:
        try:
            for stage in proc.stages:
                results = list(self._io_pool.map(lambda t: self._start_one(proc, t), stage))
                if not all(results):
                    if proc.kind in PAIRED:
                        self._abandon(proc)
                        break
        except Exception:  # noqa: BLE001
            if self._closing:
                logger.warning("dispatch of %s cut short by shutdown", proc.process_id)
            else:
                logger.exception("dispatch of %s failed", proc.process_id)
            self._abandon(proc)
        finally:
            with proc.lock:
                proc.dispatched = True
                if proc.state is State.SCHEDULED:
                    proc.state = advance(proc.state, State.RUNNING)
            self._maybe_finalize(proc)

    def _start_one(self, proc: _Process, t: _Task) -> bool:
        with proc.lock:
            if proc.state is State.KILLED:
                t.state, t.collected = State.KILLED, True
                return False
        try:
            reply = t.entry.client.start_task(t.task)
            accepted, reason = reply["accepted"], reply.get("reason")
        except SonomaError as exc:
            accepted, reason = False, exc.code.value
        with proc.lock:
            if not accepted:
                t.state, t.error, t.collected = State.FAILED, reason, True
                return False
            if t.state is State.SCHEDULED:
                t.state = State.RUNNING
            t.started_at = self.clock()
            killed = proc.state is State.KILLED
        self.registry.count_task(t.entry.node_id)
        if killed:
            self._abort(proc, t)
        return True

    def _abandon(self, proc: _Process) -> None:
        """A paired probe lost one side: release whatever already started."""
        for t in proc.tasks:
            with proc.lock:
                if t.state is State.SCHEDULED:
                    t.state, t.error, t.collected = State.FAILED, "sibling task failed", True
                    continue
                running = t.state is State.RUNNING
            if running:
                self._abort(proc, t)

    def _abort(self, proc: _Process, t: _Task) -> None:
        try:
            t.entry.client.abort_task(t.task_id)
        except SonomaError as exc:
            logger.warning("abort of %s failed: %s", t.task_id, exc)
        if not self._collect(proc, t):
            with proc.lock:
                t.state, t.collected, t.rows = State.KILLED, True, []
        if proc.state is State.KILLED and proc.kind in PAIRED:
            self._store_paired(proc)

    def _collect(self, proc: _Process, t: _Task) -> bool:
        """Pull a terminal task's rows from its agent, once."""
        with t.lock:
            if t.collected:
                return True
            try:
                data = t.entry.client.fetch_task_data(t.task_id)
            except SonomaError as exc:
                if exc.code is ErrorCode.UNKNOWN_TASK:
                    with proc.lock:
                        t.state, t.error, t.collected, t.rows = State.FAILED, exc.code.value, True, []
                    data = None
                else:
                    return False
            if data is not None:
                with proc.lock:
                    t.rows = data["rawRows"]
                    t.state = State(data["state"])
                    t.error = data.get("error")
                    t.collected = True
                if proc.kind not in PAIRED and t.rows:
                    self._store(proc, t.task_id, Layer.RAW, t.rows)
                    t.stored = True
        self._maybe_finalize(proc)
        return True

    def _store(self, proc: _Process, task_id: str | None, layer: Layer, rows: list[dict]) -> None:
        try:
            self.vo.store(VoKey(proc.session_id, proc.process_id, task_id, layer), rows, proc.kind.value)
        except SonomaError as exc:
            if exc.code is not ErrorCode.DUPLICATE_KEY:
                raise

    def _store_paired(self, proc: _Process) -> None:
        """Store sender rows, then each capture's rows aligned with the send timestamps."""
        with proc.store_lock:
            sender = next(t for t in proc.tasks if t.role == "send")
            if not sender.collected:
                return
            send_rows = sender.rows or []
            if send_rows and not sender.stored:
                self._store(proc, sender.task_id, Layer.RAW, send_rows)
                sender.stored = True
            for cap in proc.tasks:
                if cap.role != "capture" or not cap.collected or cap.stored:
                    continue
                if proc.kind is MeasurementKind.TRAIN:
                    mine = [r for r in send_rows if r["destination"] == cap.source]
                    aligned = parsers.align_train(mine, cap.rows or [])
                else:
                    aligned = parsers.align_chirp(send_rows, cap.rows or [])
                proc.aligned[cap.task_id] = aligned
                if aligned:
                    self._store(proc, cap.task_id, Layer.RAW, parsers.records_to_rows(aligned))
                    cap.stored = True

    def _maybe_finalize(self, proc: _Process) -> None:
        with proc.lock:
            if proc.finalized or not proc.dispatched:
                return
            if not all(t.state.terminal and t.collected for t in proc.tasks):
                return
            proc.finalized = True
        ok = all(t.state is State.FINISHED for t in proc.tasks)
        try:
            if proc.kind in PAIRED:
                self._store_paired(proc)
            if ok:
                self._evaluate(proc)
        except SonomaError as exc:
            proc.error, ok = exc, False
        except Exception as exc:  # noqa: BLE001
            logger.exception("evaluation of %s failed", proc.process_id)
            proc.error, ok = SonomaError(ErrorCode.MEASUREMENT_FAILED, str(exc)), False
        if not ok and proc.error is None:
            errors = [t.error for t in proc.tasks if t.state is not State.FINISHED and t.error]
            code = errors[0] if errors and errors[0] in ErrorCode.__members__ else ErrorCode.MEASUREMENT_FAILED
            proc.error = SonomaError(code, "; ".join(e for e in errors if e) or "a task did not finish")
        with proc.lock:
            proc.state = advance(proc.state, State.FINISHED if ok else State.FAILED)
        self._release(proc)
        proc.done.set()

    def _evaluate(self, proc: _Process) -> None:
        if proc.kind is MeasurementKind.TOPOLOGY:
            routes = [(t.source, parsers.rows_to_traceroute(t.target, t.rows)) for t in proc.tasks]
            graph, counts = processing.merge_routes(routes)
            rows = processing.edge_rows(graph, counts)
            if rows:
                self._store(proc, None, Layer.PROCESSED, rows)
            proc.result = graph
        elif proc.kind is MeasurementKind.BANDWIDTH:
            (records,) = proc.aligned.values()
            estimate = processing.estimate_available_bandwidth(records)
            sender = next(t for t in proc.tasks if t.role == "send")
            self._store(proc, None, Layer.PROCESSED,
                        [{"source": sender.source, "destination": sender.target, "bandwidthMbps": estimate}])
            proc.result = estimate

    def _release(self, proc: _Process) -> None:
        if proc.reserved:
            self.broker.release(proc.process_id)

    def _kill(self, proc: _Process) -> None:
        with proc.lock:
            if proc.finalized:
                return
            proc.finalized = True
            proc.state = advance(proc.state, State.KILLED)
            running = [t for t in proc.tasks if t.state is State.RUNNING and not t.collected]
        for t in running:
            self._abort(proc, t)
        if proc.kind in PAIRED:
            self._store_paired(proc)
        self._release(proc)
        proc.done.set()

    def _await(self, proc: _Process) -> None:
        deadline = self.clock() + max(2 * proc.expected, self.config.sync_timeout_min_sec)
        while not proc.done.wait(self.config.sync_poll_sec):
            for t in proc.tasks:
                if t.state is State.RUNNING and not t.collected:
                    self._collect(proc, t)
            if proc.done.is_set():
                break
            if self.clock() > deadline:
                self._kill(proc)
                raise SonomaError(ErrorCode.MEASUREMENT_FAILED, f"{proc.process_id} timed out")
        if proc.state is not State.FINISHED:
            raise proc.error or SonomaError(ErrorCode.MEASUREMENT_FAILED, proc.state.value)

    def _owned(self, session_id: str, process_id: str) -> _Process:
        with self._lock:
            proc = self._procs.get(process_id)
        if proc is None or proc.session_id != session_id:
            raise SonomaError(ErrorCode.UNKNOWN_PROCESS, str(process_id))
        return proc

    def _handle(self, proc: _Process) -> dict:
        return {"processId": proc.process_id, "expectedDurationSec": proc.expected, "state": State.SCHEDULED.value}

    # -- ping --------------------------------------------------------------

    def short_ping(self, session_id, source_node, target, count=3, size_bytes=64, interval_sec=1.0, seed=None):
        self._use(session_id)
        entry = self._agent(source_node, Capability.PING)
        tasks = self._ping_tasks([(entry, target)], count, size_bytes, interval_sec, seed)
        proc = self._launch(self._process(session_id, MeasurementKind.PING, [tasks]), sync=True)
        return {"processId": proc.process_id, "result": to_wire(parsers.rows_to_ping(tasks[0].rows))}

    def long_ping(self, session_id, source_node, target, count=3, size_bytes=64, interval_sec=1.0, seed=None):
        self._use(session_id, asynchronous=True)
        entry = self._agent(source_node, Capability.PING)
        tasks = self._ping_tasks([(entry, target)], count, size_bytes, interval_sec, seed)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.PING, [tasks]), sync=False))

    def parallel_ping(self, session_id, source_node, targets, count=3, size_bytes=64, interval_sec=1.0, seed=None):
        _, schema = self._use(session_id, asynchronous=True)
        targets = self._nonempty("targets", targets)
        self._check_composite(schema, len(targets))
        entry = self._agent(source_node, Capability.PING)
        tasks = self._ping_tasks([(entry, t) for t in targets], count, size_bytes, interval_sec, seed)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.PING, [tasks]), sync=False))

    def ensemble_ping(self, session_id, sources, targets, count=3, size_bytes=64, interval_sec=1.0, seed=None):
        _, schema = self._use(session_id, asynchronous=True)
        sources, targets = self._nonempty("sources", sources), self._nonempty("targets", targets)
        self._check_composite(schema, max(len(sources), len(targets)))
        entries = [self._agent(s, Capability.PING) for s in sources]
        pairs = [(e, t) for e in entries for t in targets]
        tasks = self._ping_tasks(pairs, count, size_bytes, interval_sec, seed)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.PING, [tasks]), sync=False))

    # -- traceroute --------------------------------------------------------

    def short_traceroute(self, session_id, source_node, target, size_bytes=60):
        self._use(session_id)
        entry = self._agent(source_node, Capability.TRACEROUTE)
        tasks = self._traceroute_tasks([(entry, target)], size_bytes)
        proc = self._launch(self._process(session_id, MeasurementKind.TRACEROUTE, [tasks]), sync=True)
        t = tasks[0]
        return {"processId": proc.process_id, "result": to_wire(parsers.rows_to_traceroute(t.target, t.rows))}

    def long_traceroute(self, session_id, source_node, target, size_bytes=60):
        self._use(session_id, asynchronous=True)
        entry = self._agent(source_node, Capability.TRACEROUTE)
        tasks = self._traceroute_tasks([(entry, target)], size_bytes)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.TRACEROUTE, [tasks]), False))

    def parallel_traceroute(self, session_id, source_node, targets, size_bytes=60):
        _, schema = self._use(session_id, asynchronous=True)
        targets = self._nonempty("targets", targets)
        self._check_composite(schema, len(targets))
        entry = self._agent(source_node, Capability.TRACEROUTE)
        tasks = self._traceroute_tasks([(entry, t) for t in targets], size_bytes)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.TRACEROUTE, [tasks]), False))

    def ensemble_traceroute(self, session_id, sources, targets, size_bytes=60):
        _, schema = self._use(session_id, asynchronous=True)
        sources, targets = self._nonempty("sources", sources), self._nonempty("targets", targets)
        self._check_composite(schema, max(len(sources), len(targets)))
        entries = [self._agent(s, Capability.TRACEROUTE) for s in sources]
        tasks = self._traceroute_tasks([(e, t) for e in entries for t in targets], size_bytes, skip_self=True)
        if not tasks:
            raise SonomaError(ErrorCode.PARAM_ERROR, "no source/target pair with distinct endpoints")
        return self._handle(self._launch(self._process(session_id, MeasurementKind.TRACEROUTE, [tasks]), False))

    def topology(self, session_id, node_list, size_bytes=60):
        _, schema = self._use(session_id, asynchronous=True)
        node_list = self._nonempty("nodeList", node_list)
        if len(node_list) < 2:
            raise SonomaError(ErrorCode.PARAM_ERROR, "topology needs at least two nodes")
        self._check_composite(schema, len(node_list))
        entries = [self._agent(n, Capability.TRACEROUTE) for n in node_list]
        if len({e.node_id for e in entries}) != len(entries):
            raise SonomaError(ErrorCode.PARAM_ERROR, "nodeList contains duplicates")
        pairs = [(a, b.descriptor.address) for a in entries for b in entries if a is not b]
        tasks = self._traceroute_tasks(pairs, size_bytes)
        return self._handle(self._launch(self._process(session_id, MeasurementKind.TOPOLOGY, [tasks]), False))

    # -- chirp / train -----------------------------------------------------

    def _chirp_process(self, session_id, kind, src_node, dst_node, n_packets, size_bytes,
                       initial_gap_us, gap_ratio, seed) -> _Process:
        src = self._agent(src_node, Capability.CHIRP)
        dst = self._agent(dst_node, Capability.CHIRP)
        if src is dst:
            raise SonomaError(ErrorCode.PARAM_ERROR, "source and destination must differ")
        sweep = processing.default_sweep(src.descriptor.line_rate_mbps or 100.0)
        probe = {
            "nPackets": int(n_packets or sweep["nPackets"]),
            "sizeBytes": int(size_bytes or sweep["sizeBytes"]),
            "initialGapUs": float(initial_gap_us or sweep["initialGapUs"]),
            "gapRatio": float(gap_ratio or sweep["gapRatio"]),
            "seed": self._seed(seed),
        }
        check_chirp_params(probe["nPackets"], probe["sizeBytes"], probe["initialGapUs"], probe["gapRatio"])
        self.security.check_chirp(probe["nPackets"], probe["sizeBytes"], probe["initialGapUs"],
                                  probe["gapRatio"], [src.gray, dst.gray])
        s_addr, d_addr = src.descriptor.address, dst.descriptor.address
        capture = self._task(dst, TaskKind.CAPTURE, {**probe, "source": s_addr}, "capture", d_addr, s_addr)
        sender = self._task(src, TaskKind.CHIRP_SEND, {**probe, "destination": d_addr}, "send", s_addr, d_addr)
        return self._process(session_id, kind, [[capture], [sender]], reserve=[src.node_id, dst.node_id])

    def short_chirp(self, session_id, src_node, dst_node, n_packets=None, size_bytes=None,
                    initial_gap_us=None, gap_ratio=None, seed=None):
        self._use(session_id)
        proc = self._chirp_process(session_id, MeasurementKind.CHIRP, src_node, dst_node, n_packets,
                                   size_bytes, initial_gap_us, gap_ratio, seed)
        self._launch(proc, sync=True)
        (records,) = proc.aligned.values()
        return {"processId": proc.process_id, "records": parsers.records_to_rows(records)}

    def long_chirp(self, session_id, src_node, dst_node, n_packets=None, size_bytes=None,
                   initial_gap_us=None, gap_ratio=None, seed=None):
        self._use(session_id, asynchronous=True)
        proc = self._chirp_process(session_id, MeasurementKind.CHIRP, src_node, dst_node, n_packets,
                                   size_bytes, initial_gap_us, gap_ratio, seed)
        return self._handle(self._launch(proc, sync=False))

    def get_available_bandwidth(self, session_id, src_node, dst_node, seed=None):
        self._use(session_id)
        proc = self._chirp_process(session_id, MeasurementKind.BANDWIDTH, src_node, dst_node,
                                   None, None, None, None, seed)
        try:
            self._launch(proc, sync=True)
        except SonomaError as exc:
            # raw rows are stored even when estimation fails; say where
            raise SonomaError(exc.code, f"{exc.message} (raw data: process {proc.process_id})") from None
        return {"bandwidthMbps": proc.result, "processIdOfRawData": proc.process_id}

    def _train_process(self, session_id, kind, src_node, dst_nodes, n_packets, size_bytes, seed) -> _Process:
        dst_nodes = self._nonempty("dstNodes", dst_nodes)
        src = self._agent(src_node, Capability.TRAIN)
        dsts = [self._agent(d, Capability.TRAIN) for d in dst_nodes]
        ids = [src.node_id] + [d.node_id for d in dsts]
        if len(set(ids)) != len(ids):
            raise SonomaError(ErrorCode.PARAM_ERROR, "train endpoints must be distinct agents")
        if n_packets < 2 or n_packets < len(dsts):
            raise SonomaError(ErrorCode.PARAM_ERROR, "need nPackets >= 2 and at least one packet per destination")
        line_rate = src.descriptor.line_rate_mbps or 100.0
        self.security.check_train(n_packets, size_bytes, line_rate, [src.gray, *(d.gray for d in dsts)])
        s_addr = src.descriptor.address
        d_addrs = [d.descriptor.address for d in dsts]
        probe = {"destinations": d_addrs, "nPackets": n_packets, "sizeBytes": size_bytes,
                 "seed": self._seed(seed), "lineRateMbps": line_rate}
        captures = [self._task(d, TaskKind.TRAIN_RECV, {**probe, "source": s_addr}, "capture",
                               d.descriptor.address, s_addr) for d in dsts]
        sender = self._task(src, TaskKind.TRAIN_SEND, probe, "send", s_addr, ",".join(d_addrs))
        return self._process(session_id, kind, [captures, [sender]], reserve=ids)

    def short_train(self, session_id, src_node, dst_nodes, n_packets=20, size_bytes=1500, seed=None):
        self._use(session_id)
        proc = self._train_process(session_id, MeasurementKind.TRAIN, src_node, dst_nodes, n_packets,
                                   size_bytes, seed)
        self._launch(proc, sync=True)
        records = sorted((r for recs in proc.aligned.values() for r in recs), key=lambda r: r.packet_index)
        return {"processId": proc.process_id, "records": parsers.records_to_rows(records)}

    def long_train(self, session_id, src_node, dst_nodes, n_packets=20, size_bytes=1500, seed=None):
        self._use(session_id, asynchronous=True)
        proc = self._train_process(session_id, MeasurementKind.TRAIN, src_node, dst_nodes, n_packets,
                                   size_bytes, seed)
        return self._handle(self._launch(proc, sync=False))

    # -- process queries ---------------------------------------------------

    def get_process_info(self, session_id, process_id) -> dict:
        self._use(session_id)
        proc = self._owned(session_id, process_id)
        now = self.clock()
        for t in proc.tasks:
            # duration guess exceeded and no callback yet: pull instead
            if (t.state is State.RUNNING and not t.collected and t.started_at is not None
                    and now - t.started_at > t.expected):
                self._collect(proc, t)
        done = sum(1 for t in proc.tasks if t.state.terminal and t.collected)
        return {"processId": proc.process_id, "kind": proc.kind.value, "state": proc.state.value,
                "completedTasks": done, "totalTasks": len(proc.tasks), "expectedDurationSec": proc.expected}

    def get_results(self, session_id, process_id, raw=False) -> dict:
        session, _ = self._use(session_id)
        proc = self._owned(session_id, process_id)
        if not proc.state.terminal:
            raise SonomaError(ErrorCode.NOT_READY, f"process is {proc.state.value}")
        rows = self.result_rows(proc, raw)
        payload = format_output(rows, session.format_results, session.zip_results)
        return {"processId": proc.process_id, "state": proc.state.value,
                "partial": proc.state is not State.FINISHED, "format": session.format_results.value,
                "zipped": session.zip_results, "rows": len(rows), "payload": payload}

    get_data = get_results

    def result_rows(self, proc: _Process, raw: bool = False) -> list[dict]:
        if not raw:
            processed = self.vo.retrieve(proc.session_id, proc.process_id, Layer.PROCESSED)
            if processed:
                return [r for group in processed.values() for r in group]
        groups = self.vo.retrieve(proc.session_id, proc.process_id, Layer.RAW)
        rows = []
        for t in proc.tasks:
            group = groups.get(t.task_id)
            if group is None:
                continue
            if raw:
                rows.extend({"taskId": t.task_id, **r} for r in group)
            elif proc.kind not in PAIRED or t.role == "capture":
                rows.extend(group)
        return rows

    def kill_process(self, session_id, process_id) -> dict:
        self._use(session_id)
        proc = self._owned(session_id, process_id)
        self._kill(proc)
        return {"acknowledged": True, "state": proc.state.value}

    def process_handle(self, process_id: str) -> ProcessHandle:
        with self._lock:
            return self._procs[process_id].handle()

    # -- callback interface ------------------------------------------------

    def handle_callback(self, task_id: str) -> dict:
        with self._lock:
            found = self._tasks.get(task_id)
        if found is None:
            logger.warning("callback for unknown task %s", task_id)
            raise SonomaError(ErrorCode.UNKNOWN_TASK, str(task_id))
        t, proc = found
        self._collect(proc, t)
        return {"acknowledged": True}

    # -- admin -------------------------------------------------------------

    def accounting(self) -> dict:
        return {
            "sessions": [
                {"sessionId": s.id, "user": s.user, "privilege": s.privilege.value, "requestCount": s.request_count}
                for s in self.sessions.snapshot()
            ],
            "agents": [
                {"nodeId": e.node_id, "taskCount": e.task_count,
                 "status": (descriptor_view(e, self.broker).status if e.online else NodeStatus.OFFLINE).value}
                for e in self.registry.entries()
            ],
        }

    def records(self, session_id: str, process_id: str, layer: str = "RAW") -> dict:
        """Read-only view of stored rows, exactly as stored."""
        try:
            layer = Layer(layer)
        except ValueError:
            raise SonomaError(ErrorCode.PARAM_ERROR, f"unknown layer {layer!r}") from None
        texts = self.vo.retrieve_text(session_id, process_id, layer)
        return {(k or ""): v for k, v in texts.items()}
