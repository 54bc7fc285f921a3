"""Authentication, authorization and session handling."""
from __future__ import annotations

import dataclasses
import hashlib
import hmac
import json
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..model import ErrorCode, OutputFormat, Privilege, Session, SonomaError, new_token, now_us

GUEST_USER = "guest"


@dataclass(frozen=True)
class PrivilegeSchema:
    privilege: Privilege
    max_requests_per_minute: int
    async_allowed: bool
    max_nodes_per_composite: int

    def __post_init__(self):
        if self.max_requests_per_minute <= 0:
            raise ValueError("maxRequestsPerMinute must be positive")
        if self.max_nodes_per_composite < 0:
            raise ValueError("maxNodesPerComposite must not be negative")
        if self.privilege is Privilege.GUEST and self.async_allowed:
            raise ValueError("guests may not run asynchronous measurements")


DEFAULT_SCHEMAS = {
    Privilege.GUEST: PrivilegeSchema(Privilege.GUEST, 10, False, 0),
    Privilege.REGISTERED: PrivilegeSchema(Privilege.REGISTERED, 120, True, 32),
}


def schemas_from_config(quotas: dict | None) -> dict[Privilege, PrivilegeSchema]:
    schemas = dict(DEFAULT_SCHEMAS)
    for name, cfg in (quotas or {}).items():
        priv = Privilege(name)
        base = schemas[priv]
        schemas[priv] = PrivilegeSchema(
            priv,
            int(cfg.get("maxRequestsPerMinute", base.max_requests_per_minute)),
            bool(cfg.get("asyncAllowed", base.async_allowed)),
            int(cfg.get("maxNodesPerComposite", base.max_nodes_per_composite)),
        )
    if (schemas[Privilege.GUEST].max_requests_per_minute
            > schemas[Privilege.REGISTERED].max_requests_per_minute):
        raise ValueError("guest quota may not exceed the registered quota")
    return schemas


class AccountStore:
    """Static credentials. A stored credential ``sha256:<hex>`` is compared by digest."""

    def __init__(self, accounts: dict[str, dict] | None = None):
        self._accounts = dict(accounts or {})

    @classmethod
    def load(cls, path: str | Path) -> AccountStore:
        data = json.loads(Path(path).read_text())
        return cls(data.get("users", data))

    def authenticate(self, user: str, credential: str) -> Privilege:
        if user == GUEST_USER:
            if credential:
                raise SonomaError(ErrorCode.AUTH_FAILED, "guest takes an empty credential")
            return Privilege.GUEST
        account = self._accounts.get(user)
        if account is None:
            raise SonomaError(ErrorCode.AUTH_FAILED, f"unknown user {user!r}")
        stored = account.get("credential", "")
        if stored.startswith("sha256:"):
            ok = hmac.compare_digest(stored[7:], hashlib.sha256(credential.encode()).hexdigest())
        else:
            ok = hmac.compare_digest(stored, credential)
        if not ok:
            raise SonomaError(ErrorCode.AUTH_FAILED, "bad credential")
        return Privilege(account.get("privilege", Privilege.REGISTERED.value))


@dataclass
class _Live:
    session: Session
    schema: PrivilegeSchema
    window: deque
    lock: threading.Lock


class SessionManager:
    """Open sessions, per-session request counters and a sliding one-minute quota."""

    def __init__(self, accounts: AccountStore, schemas: dict[Privilege, PrivilegeSchema] | None = None,
                 clock: Callable[[], float] = time.monotonic):
        self.accounts = accounts
        self.schemas = schemas or dict(DEFAULT_SCHEMAS)
        self.clock = clock
        self._lock = threading.Lock()
        self._live: dict[str, _Live] = {}
        self._issued: set[str] = set()

    def open(self, user: str, credential: str = "", zip_results: bool = False,
             format_results: str = "CSV") -> Session:
        try:
            fmt = OutputFormat(format_results)
        except ValueError:
            raise SonomaError(ErrorCode.UNSUPPORTED_FORMAT, str(format_results)) from None
        privilege = self.accounts.authenticate(user, credential or "")
        with self._lock:
            sid = new_token()
            while sid in self._issued:
                sid = new_token()
            self._issued.add(sid)
            session = Session(sid, user, privilege, bool(zip_results), fmt, now_us(), 0)
            self._live[sid] = _Live(session, self.schemas[privilege], deque(), threading.Lock())
        return session

    def _get(self, session_id: str) -> _Live:
        with self._lock:
            live = self._live.get(session_id)
        if live is None:
            raise SonomaError(ErrorCode.UNKNOWN_SESSION, str(session_id))
        return live

    def use(self, session_id: str, count: bool = True) -> tuple[Session, PrivilegeSchema]:
        """Validate a session and charge one request against its quota."""
        live = self._get(session_id)
        if not count:
            return live.session, live.schema
        with live.lock:
            now = self.clock()
            while live.window and now - live.window[0] >= 60.0:
                live.window.popleft()
            live.session = dataclasses.replace(live.session, request_count=live.session.request_count + 1)
            if len(live.window) >= live.schema.max_requests_per_minute:
                raise SonomaError(ErrorCode.QUOTA, f"more than {live.schema.max_requests_per_minute} requests/min")
            live.window.append(now)
            return live.session, live.schema

    def close(self, session_id: str) -> Session:
        with self._lock:
            live = self._live.pop(session_id, None)
        if live is None:
            raise SonomaError(ErrorCode.UNKNOWN_SESSION, str(session_id))
        return live.session

    def snapshot(self) -> list[Session]:
        with self._lock:
            return [l.session for l in self._live.values()]
