"""JSON-over-HTTP plumbing shared by the agent, the management layer and the CLI."""
from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from .model import ErrorCode, SonomaError

logger = logging.getLogger(__name__)

# (method, path, query, body) -> result
Router = Callable[[str, str, dict, Any], Any]


class TransportError(Exception):
    """The peer could not be reached or answered with something other than JSON."""


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _serve(self, method: str) -> None:
        url = urlsplit(self.path)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        body = None
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw)
            except ValueError:
                return self._reply(400, {"error": {"code": "PARAM_ERROR", "message": "malformed JSON"}})
        try:
            result = self.server.router(method, url.path, query, body)
        except SonomaError as exc:
            return self._reply(exc.http_status, {"error": exc.to_wire()})
        except Exception as exc:  # noqa: BLE001
            logger.exception("unhandled error serving %s %s", method, url.path)
            return self._reply(500, {"error": {"code": "IO_ERROR", "message": str(exc)}})
        self._reply(200, {"result": result})

    def _reply(self, status: int, obj: dict) -> None:
        data = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._serve("GET")

    def do_POST(self):
        self._serve("POST")

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.address_string(), *args)


class JsonServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], router: Router):
        super().__init__(address, _Handler)
        self.router = router
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> JsonServer:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name=f"http-{self.url}")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_listen(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def request(url: str, body: Any = None, timeout: float = 30.0, method: str | None = None) -> Any:
    """POST ``body`` as JSON (GET when body is None) and return the ``result`` field.

    Service errors are re-raised as :class:`SonomaError`; connection problems
    as :class:`TransportError`.
    """
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method or ("GET" if data is None else "POST"))
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        try:
            payload = json.loads(exc.read())
        except ValueError:
            raise TransportError(f"{url}: HTTP {exc.code}") from exc
        err = payload.get("error") or {}
        try:
            code = ErrorCode(err.get("code"))
        except ValueError:
            raise TransportError(f"{url}: {err}") from exc
        raise SonomaError(code, err.get("message", "")) from None
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise TransportError(f"{url}: {exc}") from exc
    return payload.get("result")
