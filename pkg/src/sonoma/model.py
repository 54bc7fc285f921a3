"""Shared vocabulary: enums, value objects, errors and the JSON wire codec.

Every type here is an immutable value object. On the wire they become JSON
objects whose keys are the lowerCamelCase form of the Python field names.
"""
from __future__ import annotations

import dataclasses
import enum
import math
import secrets
import time
import types
import typing
from dataclasses import dataclass, field
from typing import Any

PROTOCOL_VERSION = "1"


def now_us() -> int:
    """Integer microseconds since the Unix epoch."""
    return time.time_ns() // 1000


def new_token() -> str:
    # 128 bits of entropy, 32 hex chars
    return secrets.token_hex(16)


class Privilege(str, enum.Enum):
    GUEST = "GUEST"
    REGISTERED = "REGISTERED"


class OutputFormat(str, enum.Enum):
    CSV = "CSV"
    XML = "XML"


class Capability(str, enum.Enum):
    PING = "PING"
    TRACEROUTE = "TRACEROUTE"
    CHIRP = "CHIRP"
    TRAIN = "TRAIN"


class NodeStatus(str, enum.Enum):
    FREE = "FREE"
    BUSY = "BUSY"
    OFFLINE = "OFFLINE"


class State(str, enum.Enum):
    """Lifecycle shared by processes and atomic tasks."""

    SCHEDULED = "SCHEDULED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    FAILED = "FAILED"
    KILLED = "KILLED"

    @property
    def terminal(self) -> bool:
        return self in (State.FINISHED, State.FAILED, State.KILLED)


TRANSITIONS: dict[State, frozenset[State]] = {
    State.SCHEDULED: frozenset({State.RUNNING, State.KILLED}),
    State.RUNNING: frozenset({State.FINISHED, State.FAILED, State.KILLED}),
    State.FINISHED: frozenset(),
    State.FAILED: frozenset(),
    State.KILLED: frozenset(),
}


class IllegalTransition(ValueError):
    pass


def advance(current: State, new: State) -> State:
    """Return ``new`` if the lifecycle allows ``current -> new``, else raise."""
    if new not in TRANSITIONS[current]:
        raise IllegalTransition(f"{current.value} -> {new.value}")
    return new


class TaskKind(str, enum.Enum):
    PING = "PING"
    TRACEROUTE = "TRACEROUTE"
    CHIRP_SEND = "CHIRP_SEND"
    CAPTURE = "CAPTURE"
    TRAIN_SEND = "TRAIN_SEND"
    TRAIN_RECV = "TRAIN_RECV"


class ResourceMode(str, enum.Enum):
    TIME_SHARING = "TIME_SHARING"
    TIME_RESERVING = "TIME_RESERVING"


RESOURCE_MODE: dict[TaskKind, ResourceMode] = {
    TaskKind.PING: ResourceMode.TIME_SHARING,
    TaskKind.TRACEROUTE: ResourceMode.TIME_SHARING,
    TaskKind.CHIRP_SEND: ResourceMode.TIME_RESERVING,
    TaskKind.CAPTURE: ResourceMode.TIME_RESERVING,
    TaskKind.TRAIN_SEND: ResourceMode.TIME_RESERVING,
    TaskKind.TRAIN_RECV: ResourceMode.TIME_RESERVING,
}

REQUIRED_CAPABILITY: dict[TaskKind, Capability] = {
    TaskKind.PING: Capability.PING,
    TaskKind.TRACEROUTE: Capability.TRACEROUTE,
    TaskKind.CHIRP_SEND: Capability.CHIRP,
    TaskKind.CAPTURE: Capability.CHIRP,
    TaskKind.TRAIN_SEND: Capability.TRAIN,
    TaskKind.TRAIN_RECV: Capability.TRAIN,
}


class MeasurementKind(str, enum.Enum):
    PING = "PING"
    TRACEROUTE = "TRACEROUTE"
    CHIRP = "CHIRP"
    TRAIN = "TRAIN"
    BANDWIDTH = "BANDWIDTH"
    TOPOLOGY = "TOPOLOGY"


class Layer(str, enum.Enum):
    RAW = "RAW"
    PROCESSED = "PROCESSED"


class ErrorCode(str, enum.Enum):
    PARAM_ERROR = "PARAM_ERROR"
    AUTH_FAILED = "AUTH_FAILED"
    UNSUPPORTED_FORMAT = "UNSUPPORTED_FORMAT"
    UNKNOWN_SESSION = "UNKNOWN_SESSION"
    UNKNOWN_PROCESS = "UNKNOWN_PROCESS"
    UNKNOWN_TASK = "UNKNOWN_TASK"
    UNKNOWN_OPERATION = "UNKNOWN_OPERATION"
    UNKNOWN_ADDRESS = "UNKNOWN_ADDRESS"
    NO_ROUTE = "NO_ROUTE"
    QUOTA = "QUOTA"
    ASYNC_FORBIDDEN = "ASYNC_FORBIDDEN"
    SECURITY_REJECTED = "SECURITY_REJECTED"
    CAPABILITY_MISSING = "CAPABILITY_MISSING"
    NODE_UNAVAILABLE = "NODE_UNAVAILABLE"
    BUSY = "BUSY"
    NOT_READY = "NOT_READY"
    ESTIMATION_FAILED = "ESTIMATION_FAILED"
    MEASUREMENT_FAILED = "MEASUREMENT_FAILED"
    DUPLICATE_KEY = "DUPLICATE_KEY"
    IO_ERROR = "IO_ERROR"


HTTP_STATUS: dict[ErrorCode, int] = {
    ErrorCode.PARAM_ERROR: 400,
    ErrorCode.UNSUPPORTED_FORMAT: 400,
    ErrorCode.CAPABILITY_MISSING: 400,
    ErrorCode.UNKNOWN_ADDRESS: 400,
    ErrorCode.NO_ROUTE: 400,
    ErrorCode.AUTH_FAILED: 401,
    ErrorCode.ASYNC_FORBIDDEN: 403,
    ErrorCode.SECURITY_REJECTED: 403,
    ErrorCode.UNKNOWN_SESSION: 404,
    ErrorCode.UNKNOWN_PROCESS: 404,
    ErrorCode.UNKNOWN_TASK: 404,
    ErrorCode.UNKNOWN_OPERATION: 404,
    ErrorCode.BUSY: 409,
    ErrorCode.NOT_READY: 409,
    ErrorCode.DUPLICATE_KEY: 409,
    ErrorCode.ESTIMATION_FAILED: 422,
    ErrorCode.QUOTA: 429,
    ErrorCode.IO_ERROR: 500,
    ErrorCode.MEASUREMENT_FAILED: 502,
    ErrorCode.NODE_UNAVAILABLE: 503,
}


class SonomaError(Exception):
    """An error that crosses a service boundary as ``{code, message}``."""

    def __init__(self, code: ErrorCode | str, message: str = ""):
        self.code = ErrorCode(code)
        self.message = message or self.code.value
        super().__init__(f"{self.code.value}: {self.message}")

    @property
    def http_status(self) -> int:
        return HTTP_STATUS.get(self.code, 400)

    def to_wire(self) -> dict:
        return {"code": self.code.value, "message": self.message}


# -- value objects ---------------------------------------------------------


@dataclass(frozen=True)
class GrayList:
    max_probe_rate_pps: int
    max_packet_bytes: int


@dataclass(frozen=True)
class Session:
    id: str
    user: str
    privilege: Privilege
    zip_results: bool
    format_results: OutputFormat
    opened_at: int
    request_count: int = 0


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    address: str
    capabilities: frozenset[Capability]
    status: NodeStatus
    gray_list_constraints: GrayList | None = None
    line_rate_mbps: float | None = None


@dataclass(frozen=True)
class ProcessHandle:
    process_id: str
    session_id: str
    kind: MeasurementKind
    state: State
    expected_duration_sec: float
    tasks: tuple[str, ...]
    created_at: int


@dataclass(frozen=True)
class AtomicTask:
    task_id: str
    agent: str
    kind: TaskKind
    params: dict[str, Any]
    resource_mode: ResourceMode
    state: State = State.SCHEDULED

    def __post_init__(self):
        if RESOURCE_MODE[self.kind] is not self.resource_mode:
            raise ValueError(f"{self.kind.value} requires {RESOURCE_MODE[self.kind].value}")

    @classmethod
    def create(cls, agent: str, kind: TaskKind, params: dict, task_id: str | None = None):
        return cls(task_id or new_token(), agent, kind, dict(params), RESOURCE_MODE[kind])


@dataclass(frozen=True)
class PingResult:
    target: str
    sent: int
    received: int
    rtt_ms: tuple[float, ...]
    packet_size_bytes: int


@dataclass(frozen=True)
class Hop:
    ttl: int
    address: str | None  # None: UNKNOWN
    rtt_ms: float | None  # None: TIMEOUT


@dataclass(frozen=True)
class TracerouteResult:
    target: str
    hops: tuple[Hop, ...]


@dataclass(frozen=True)
class ChirpRecord:
    packet_index: int
    send_timestamp_us: int
    recv_timestamp_us: int | None  # None: LOST
    size_bytes: int


@dataclass(frozen=True)
class TrainRecord:
    packet_index: int
    send_timestamp_us: int
    recv_timestamp_us: int | None
    size_bytes: int
    destination: str


@dataclass(frozen=True)
class TopologyGraph:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]]
    per_edge_delay_ms: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge {a}->{b} has an endpoint outside nodes")
        if not set(self.per_edge_delay_ms) <= set(self.edges):
            raise ValueError("delay keys must be edges")

    def __eq__(self, other):
        if not isinstance(other, TopologyGraph):
            return NotImplemented
        return (self.nodes, self.edges, self.per_edge_delay_ms) == (
            other.nodes, other.edges, other.per_edge_delay_ms)

    __hash__ = None

    def __wire__(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": [list(e) for e in sorted(self.edges)],
            "perEdgeDelayMs": [
                {"from": a, "to": b, "delayMs": d}
                for (a, b), d in sorted(self.per_edge_delay_ms.items())
            ],
        }

    @classmethod
    def __from_wire__(cls, data: dict) -> TopologyGraph:
        return cls(
            frozenset(data["nodes"]),
            frozenset(tuple(e) for e in data["edges"]),
            {(d["from"], d["to"]): d["delayMs"] for d in data.get("perEdgeDelayMs", [])},
        )


@dataclass(frozen=True)
class MeasurementRecord:
    session_id: str
    process_id: str
    task_id: str | None
    kind: MeasurementKind
    raw_rows: tuple[dict, ...]
    processed_rows: tuple[dict, ...] | None = None
    stored_at: int = 0


# -- wire codec ------------------------------------------------------------


def camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(p.title() for p in rest)


def snake(name: str) -> str:
    return "".join("_" + c.lower() if c.isupper() else c for c in name)


def to_wire(obj: Any) -> Any:
    """Encode a value object (recursively) into JSON-compatible data."""
    if hasattr(obj, "__wire__"):
        return obj.__wire__()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {camel(f.name): to_wire(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_wire(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(to_wire(v) for v in obj)
    if isinstance(obj, dict):
        return {k: to_wire(v) for k, v in obj.items()}
    return obj


def _decode(tp: Any, data: Any) -> Any:
    if data is None:
        return None
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _decode(args[0], data)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_decode(args[0], v) for v in data)
        return tuple(_decode(a, v) for a, v in zip(args, data))
    if origin in (frozenset, set):
        (arg,) = typing.get_args(tp)
        return frozenset(_decode(arg, v) for v in data)
    if origin is list:
        (arg,) = typing.get_args(tp)
        return [_decode(arg, v) for v in data]
    if origin is dict:
        return dict(data)
    if isinstance(tp, type):
        if hasattr(tp, "__from_wire__"):
            return tp.__from_wire__(data)
        if dataclasses.is_dataclass(tp):
            return from_wire(tp, data)
        if issubclass(tp, enum.Enum):
            return tp(data)
        if tp is float and isinstance(data, int):
            return float(data)
    return data


def from_wire(cls: type, data: dict) -> Any:
    """Decode JSON data produced by :func:`to_wire` back into ``cls``."""
    if hasattr(cls, "__from_wire__"):
        return cls.__from_wire__(data)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = camel(f.name)
        if key in data:
            kwargs[f.name] = _decode(hints[f.name], data[key])
    return cls(**kwargs)


# -- duration estimates ----------------------------------------------------

TRACEROUTE_MAX_TTL = 30


def chirp_sum_gaps_us(n_packets: int, initial_gap_us: float, gap_ratio: float) -> float:
    return sum(initial_gap_us * gap_ratio ** k for k in range(n_packets - 1))


def estimate_duration(kind: TaskKind, params: dict, line_rate_mbps: float | None = None) -> float:
    """Conservative upper bound on an atomic task's run time, in seconds."""
    if kind is TaskKind.PING:
        return params.get("count", 1) * max(params.get("intervalSec", 1.0), 1.0) + 2
    if kind is TaskKind.TRACEROUTE:
        return TRACEROUTE_MAX_TTL * 1.0
    if kind in (TaskKind.CHIRP_SEND, TaskKind.CAPTURE):
        gaps = chirp_sum_gaps_us(params["nPackets"], params["initialGapUs"], params["gapRatio"])
        return gaps / 1e6 + 2
    if kind in (TaskKind.TRAIN_SEND, TaskKind.TRAIN_RECV):
        # the sender's line rate sets the gap, so receivers are told it explicitly
        rate = params.get("lineRateMbps") or line_rate_mbps or 100.0
        gap_us = params["sizeBytes"] * 8 / rate
        return params["nPackets"] * gap_us / 1e6 + 2
    raise ValueError(kind)


def composite_duration(per_agent: dict[str, list[float]], margin: float = 5.0) -> float:
    """Max over agents of the sum of that agent's task estimates, plus margin."""
    return max(math.fsum(v) for v in per_agent.values()) + margin
