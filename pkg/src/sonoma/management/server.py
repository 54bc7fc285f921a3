"""HTTP front end of the management layer and the ``mld`` daemon."""
from __future__ import annotations

import argparse
import base64
import inspect
import logging
import signal
import threading
from dataclasses import dataclass

from .. import rpc
from ..model import ErrorCode, SonomaError, camel, snake
from .core import ManagementLayer, MLConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Operation:
    name: str
    method: str
    asynchronous: bool = False
    needs_session: bool = True


OPERATIONS = [
    Operation("getVersion", "get_version", needs_session=False),
    Operation("requestSession", "request_session", needs_session=False),
    Operation("closeSession", "close_session"),
    Operation("getNodeList", "get_node_list"),
    Operation("shortPing", "short_ping"),
    Operation("longPing", "long_ping", asynchronous=True),
    Operation("parallelPing", "parallel_ping", asynchronous=True),
    Operation("ensemblePing", "ensemble_ping", asynchronous=True),
    Operation("shortTraceroute", "short_traceroute"),
    Operation("longTraceroute", "long_traceroute", asynchronous=True),
    Operation("parallelTraceroute", "parallel_traceroute", asynchronous=True),
    Operation("ensembleTraceroute", "ensemble_traceroute", asynchronous=True),
    Operation("shortChirp", "short_chirp"),
    Operation("longChirp", "long_chirp", asynchronous=True),
    Operation("shortTrain", "short_train"),
    Operation("longTrain", "long_train", asynchronous=True),
    Operation("getAvailableBandwidth", "get_available_bandwidth"),
    Operation("topology", "topology", asynchronous=True),
    Operation("getProcessInfo", "get_process_info"),
    Operation("getResults", "get_results"),
    Operation("getData", "get_data"),
    Operation("killProcess", "kill_process"),
]
BY_NAME = {op.name: op for op in OPERATIONS}


def _params(ml: ManagementLayer, op: Operation) -> list[dict]:
    out = []
    for p in inspect.signature(getattr(ml, op.method)).parameters.values():
        item = {"name": camel(p.name), "required": p.default is inspect.Parameter.empty}
        if not item["required"]:
            item["default"] = p.default
        out.append(item)
    return out


def describe(ml: ManagementLayer) -> dict:
    return {
        "version": ml.get_version(),
        "operations": [
            {"name": op.name, "endpoint": f"/api/{op.name}", "asynchronous": op.asynchronous,
             "needsSession": op.needs_session, "params": _params(ml, op)}
            for op in OPERATIONS
        ],
    }


def _encode(result):
    if isinstance(result, dict) and isinstance(result.get("payload"), bytes):
        return {**result, "payload": base64.b64encode(result["payload"]).decode("ascii"),
                "payloadEncoding": "base64"}
    return result


def call(ml: ManagementLayer, name: str, body: dict | None):
    op = BY_NAME.get(name)
    if op is None:
        raise SonomaError(ErrorCode.UNKNOWN_OPERATION, name)
    if body is not None and not isinstance(body, dict):
        raise SonomaError(ErrorCode.PARAM_ERROR, "request body must be a JSON object")
    method = getattr(ml, op.method)
    accepted = set(inspect.signature(method).parameters)
    kwargs = {snake(k): v for k, v in (body or {}).items()}
    unknown = sorted(camel(k) for k in kwargs if k not in accepted)
    if unknown:
        raise SonomaError(ErrorCode.PARAM_ERROR, f"{name} does not take {unknown}")
    try:
        inspect.signature(method).bind(**kwargs)
    except TypeError as exc:
        raise SonomaError(ErrorCode.PARAM_ERROR, f"{name}: {exc}") from None
    try:
        return _encode(method(**kwargs))
    except (TypeError, ValueError) as exc:
        raise SonomaError(ErrorCode.PARAM_ERROR, f"{name}: {exc}") from None


def make_router(ml: ManagementLayer):
    def router(method: str, path: str, query: dict, body):
        if path == "/api/describe" and method == "GET":
            return describe(ml)
        if path.startswith("/api/") and method == "POST":
            return call(ml, path[len("/api/"):], body)
        if path == "/callback" and method == "POST":
            if not isinstance(body, dict) or "taskId" not in body:
                raise SonomaError(ErrorCode.PARAM_ERROR, "callback needs taskId")
            return ml.handle_callback(body["taskId"])
        if path == "/admin/accounting" and method == "GET":
            return ml.accounting()
        if path == "/admin/records" and method == "GET":
            try:
                return ml.records(query["sessionId"], query["processId"], query.get("layer", "RAW"))
            except KeyError as exc:
                raise SonomaError(ErrorCode.PARAM_ERROR, f"missing query parameter {exc}") from None
        raise SonomaError(ErrorCode.UNKNOWN_OPERATION, f"{method} {path}")

    return router


def serve(ml: ManagementLayer, address: str | None = None) -> rpc.JsonServer:
    return rpc.JsonServer(rpc.parse_listen(address or ml.config.listen_address), make_router(ml)).start()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mld", description="Measurement management layer daemon")
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ml = ManagementLayer(MLConfig.load(args.config))
    ml.start()
    server = serve(ml)
    logger.info("management layer listening on %s", server.url)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(1.0):
            pass
    except KeyboardInterrupt:
        pass
    server.stop()
    ml.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
