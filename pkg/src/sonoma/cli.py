"""``sonoma``: command-line actor for the management layer."""
from __future__ import annotations

import argparse
import base64
import csv
import gzip
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from urllib.parse import urlsplit

from . import rpc
from .management.processing import graph_stats, route_stats
from .model import ErrorCode, SonomaError
from .vo import parse_output

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARAM = 2
EXIT_AUTH = 3
EXIT_MEASUREMENT = 4
EXIT_TIMEOUT = 5

PARAM_CODES = {ErrorCode.PARAM_ERROR, ErrorCode.CAPABILITY_MISSING, ErrorCode.UNSUPPORTED_FORMAT,
               ErrorCode.SECURITY_REJECTED, ErrorCode.UNKNOWN_OPERATION}
AUTH_CODES = {ErrorCode.AUTH_FAILED, ErrorCode.QUOTA, ErrorCode.ASYNC_FORBIDDEN, ErrorCode.UNKNOWN_SESSION}


def exit_code(err: SonomaError) -> int:
    if err.code in PARAM_CODES:
        return EXIT_PARAM
    if err.code in AUTH_CODES:
        return EXIT_AUTH
    return EXIT_MEASUREMENT


class Timeout(Exception):
    pass


@dataclass
class ClientConfig:
    ml_url: str
    user: str = "guest"
    credential: str = ""
    default_format: str = "CSV"
    default_zip: bool = False

    def __post_init__(self):
        parts = urlsplit(self.ml_url)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValueError(f"malformed ML URL {self.ml_url!r}")


class Client:
    def __init__(self, config: ClientConfig, timeout: float = 600.0):
        self.config = config
        self.timeout = timeout
        self.session_id: str | None = None

    def call(self, op: str, **params):
        return rpc.request(f"{self.config.ml_url.rstrip('/')}/api/{op}", params, timeout=self.timeout)

    def describe(self) -> dict:
        return rpc.request(f"{self.config.ml_url.rstrip('/')}/api/describe", timeout=self.timeout)

    def open(self) -> str:
        self.session_id = self.call("requestSession", user=self.config.user, credential=self.config.credential,
                                    zipResults=self.config.default_zip, formatResults=self.config.default_format)
        return self.session_id

    def close(self) -> None:
        if self.session_id is not None:
            try:
                self.call("closeSession", sessionId=self.session_id)
            except (SonomaError, rpc.TransportError) as exc:
                logger.warning("closing session failed: %s", exc)
            self.session_id = None

    def __enter__(self) -> Client:
        self.open()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def session_call(self, op: str, **params):
        return self.call(op, sessionId=self.session_id, **params)

    def wait(self, process_id: str, expected_sec: float, sleep=time.sleep, clock=time.monotonic) -> dict:
        """Poll until the process is terminal; gives up after twice the expected duration."""
        interval = min(2.0, max(expected_sec / 10, 0.05))
        deadline = clock() + 2 * expected_sec
        while True:
            info = self.session_call("getProcessInfo", processId=process_id)
            if info["state"] in ("FINISHED", "FAILED", "KILLED"):
                return info
            if clock() > deadline:
                raise Timeout(f"process {process_id} still {info['state']} after {2 * expected_sec:.1f} s")
            sleep(interval)

    def results(self, process_id: str, raw: bool = False) -> tuple[bytes, dict]:
        res = self.session_call("getResults", processId=process_id, raw=raw)
        payload = base64.b64decode(res["payload"])
        if res.get("zipped"):
            payload = gzip.decompress(payload)
        return payload, res


# -- subcommands -------------------------------------------------------------


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def route_lengths(route_rows: list[dict]) -> list[int]:
    """Hop count per traceroute task, up to the hop that reached the target."""
    by_task: dict[str, list[dict]] = {}
    for r in route_rows:
        by_task.setdefault(r["taskId"], []).append(r)
    out = []
    for rows in by_task.values():
        rows.sort(key=lambda r: int(r["ttl"]))
        target = rows[0]["target"]
        reached = [int(r["ttl"]) for r in rows if r["address"] == target]
        out.append(reached[0] if reached else sum(1 for r in rows if r["address"]))
    return out


def cmd_topology(client: Client, args) -> int:
    handle = client.session_call("topology", nodeList=args.nodes)
    info = client.wait(handle["processId"], handle["expectedDurationSec"])
    if info["state"] != "FINISHED":
        print(f"topology process ended {info['state']}", file=sys.stderr)
        return EXIT_MEASUREMENT
    fmt = client.config.default_format
    edges_payload, _ = client.results(handle["processId"])
    routes_payload, _ = client.results(handle["processId"], raw=True)
    edges = parse_output(edges_payload, fmt)
    routes = parse_output(routes_payload, fmt)
    _write_csv(args.output, edges)
    _write_csv(args.output + ".routes.csv", routes)
    rs = route_stats(route_lengths(routes))
    gs = graph_stats(edges)
    print(f"routes: {rs['routes']}")
    print(f"mean route length: {rs['meanRouteLength']:.3f}")
    print(f"stdev route length: {rs['stdevRouteLength']:.3f}")
    print(f"nodes: {gs['nodes']}")
    print(f"edges: {gs['edges']}")
    print(f"links with delay: {gs['linksWithDelay']}")
    print(f"average delay ms: {gs['averageDelayMs']:.3f}")
    print(f"links below 1 ms: {gs['linksBelow1ms']}")
    return EXIT_OK


def _write_csv(path: str, rows: list[dict]) -> None:
    names = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, names, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_bandwidth(client: Client, args) -> int:
    res = client.session_call("getAvailableBandwidth", srcNode=args.src, dstNode=args.dst)
    print(f"{res['bandwidthMbps']:.3f} Mbps")
    logger.info("raw data in process %s", res["processIdOfRawData"])
    return EXIT_OK


def cmd_ping(client: Client, args) -> int:
    res = client.session_call("shortPing", sourceNode=args.src, target=args.target, count=args.count,
                              sizeBytes=args.size, intervalSec=args.interval)
    _emit(res["result"])
    return EXIT_OK


def cmd_traceroute(client: Client, args) -> int:
    res = client.session_call("shortTraceroute", sourceNode=args.src, target=args.target)
    _emit(res["result"])
    return EXIT_OK


def cmd_chirp(client: Client, args) -> int:
    params = {"nPackets": args.packets, "sizeBytes": args.size, "initialGapUs": args.initial_gap_us,
              "gapRatio": args.gap_ratio}
    res = client.session_call("shortChirp", srcNode=args.src, dstNode=args.dst,
                              **{k: v for k, v in params.items() if v is not None})
    _emit(res["records"])
    return EXIT_OK


def cmd_train(client: Client, args) -> int:
    res = client.session_call("shortTrain", srcNode=args.src, dstNodes=args.dst, nPackets=args.packets,
                              sizeBytes=args.size)
    _emit(res["records"])
    return EXIT_OK


def cmd_nodes(client: Client, args) -> int:
    _emit(client.session_call("getNodeList", filter=args.filter))
    return EXIT_OK


def cmd_raw(client: Client, args) -> int:
    # params already parsed in main
    params = args.params
    ops = {op["name"]: op for op in client.describe()["operations"]}
    if args.operation not in ops:
        raise SonomaError(ErrorCode.UNKNOWN_OPERATION, args.operation)
    opened = False
    if ops[args.operation]["needsSession"] and "sessionId" not in params:
        params["sessionId"] = client.open()
        opened = True
    try:
        _emit(client.call(args.operation, **params))
    finally:
        if opened and args.operation != "closeSession":
            client.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    env = os.environ.get
    p = argparse.ArgumentParser(prog="sonoma", description="Network measurement client")
    p.add_argument("--ml-url", default=env("SONOMA_ML_URL", "http://127.0.0.1:8000"))
    p.add_argument("--user", default=env("SONOMA_USER", "guest"))
    p.add_argument("--credential", default=env("SONOMA_CREDENTIAL", ""))
    p.add_argument("--format", default=env("SONOMA_FORMAT", "CSV"), choices=["CSV", "XML"])
    p.add_argument("--zip", action="store_true", default=env("SONOMA_ZIP", "").lower() in ("1", "true", "yes"))
    p.add_argument("--log-level", default=env("SONOMA_LOG_LEVEL", "WARNING"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("topology", help="discover the topology between agents")
    s.add_argument("nodes", nargs="+")
    s.add_argument("-o", "--output", default="topology.csv")
    s.set_defaults(func=cmd_topology)

    s = sub.add_parser("bandwidth", help="estimate available bandwidth")
    s.add_argument("src")
    s.add_argument("dst")
    s.set_defaults(func=cmd_bandwidth)

    s = sub.add_parser("ping")
    s.add_argument("src")
    s.add_argument("target")
    s.add_argument("--count", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--interval", type=float, default=1.0)
    s.set_defaults(func=cmd_ping)

    s = sub.add_parser("traceroute")
    s.add_argument("src")
    s.add_argument("target")
    s.set_defaults(func=cmd_traceroute)

    s = sub.add_parser("chirp")
    s.add_argument("src")
    s.add_argument("dst")
    s.add_argument("--packets", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--initial-gap-us", type=float)
    s.add_argument("--gap-ratio", type=float)
    s.set_defaults(func=cmd_chirp)

    s = sub.add_parser("train")
    s.add_argument("src")
    s.add_argument("dst", nargs="+")
    s.add_argument("--packets", type=int, default=20)
    s.add_argument("--size", type=int, default=1500)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("nodes", help="list measurement agents")
    s.add_argument("--filter", default="ALL")
    s.set_defaults(func=cmd_nodes)

    s = sub.add_parser("raw", help="call any operation with a JSON body")
    s.add_argument("operation")
    s.add_argument("params", nargs="?", default="{}")
    s.set_defaults(func=cmd_raw)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(message)s")
    if args.command == "raw":
        try:
            args.params = json.loads(args.params)
        except ValueError as exc:
            parser.print_usage(sys.stderr)
            print(f"sonoma: malformed JSON params: {exc}", file=sys.stderr)
            return EXIT_PARAM
        if not isinstance(args.params, dict):
            print("sonoma: params must be a JSON object", file=sys.stderr)
            return EXIT_PARAM
    try:
        config = ClientConfig(args.ml_url, args.user, args.credential, args.format, args.zip)
    except ValueError as exc:
        print(f"sonoma: {exc}", file=sys.stderr)
        return EXIT_PARAM
    client = Client(config)
    try:
        if args.command == "raw":
            return args.func(client, args)
        with client:
            return args.func(client, args)
    except SonomaError as exc:
        print(f"sonoma: {exc.code.value}: {exc.message}", file=sys.stderr)
        return exit_code(exc)
    except Timeout as exc:
        print(f"sonoma: timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except rpc.TransportError as exc:
        print(f"sonoma: cannot reach the management layer: {exc}", file=sys.stderr)
        return EXIT_MEASUREMENT


if __name__ == "__main__":
    raise SystemExit(main())
