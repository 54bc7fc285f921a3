"""The Virtual Observatory: an append-only SQLite repository of measurement rows.

Each group of rows is keyed by ``(sessionId, processId, taskId, layer)``;
process-level processed rows use an empty task id. Rows are kept as the
exact JSON text they were stored with, and a store is acknowledged only
after the transaction is committed with ``synchronous=FULL``.
"""
from __future__ import annotations

import argparse
import csv
import gzip
import io
import json
import sqlite3
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

from .model import ErrorCode, Layer, OutputFormat, SonomaError, now_us

_SCHEMA = """
CREATE TABLE IF NOT EXISTS records (
    session_id TEXT NOT NULL,
    process_id TEXT NOT NULL,
    task_id    TEXT NOT NULL,
    layer      TEXT NOT NULL,
    kind       TEXT,
    rows_json  TEXT NOT NULL,
    stored_at  INTEGER NOT NULL,
    seq        INTEGER PRIMARY KEY AUTOINCREMENT,
    UNIQUE (session_id, process_id, task_id, layer)
)
"""


@dataclass(frozen=True)
class VoKey:
    session_id: str
    process_id: str
    task_id: str | None
    layer: Layer


class VoStore:
    def __init__(self, path: str | Path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute("PRAGMA synchronous=FULL")
        self._db.execute(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def store(self, key: VoKey, rows: list[dict], kind: str | None = None) -> None:
        if not rows:
            raise SonomaError(ErrorCode.PARAM_ERROR, "refusing to store an empty row set")
        text = json.dumps(rows, separators=(",", ":"))
        try:
            with self._lock:
                self._db.execute("BEGIN IMMEDIATE")
                try:
                    self._db.execute(
                        "INSERT INTO records (session_id, process_id, task_id, layer, kind, rows_json, stored_at)"
                        " VALUES (?, ?, ?, ?, ?, ?, ?)",
                        (key.session_id, key.process_id, key.task_id or "", Layer(key.layer).value,
                         kind, text, now_us()),
                    )
                except BaseException:
                    self._db.execute("ROLLBACK")
                    raise
                self._db.execute("COMMIT")
        except sqlite3.IntegrityError:
            raise SonomaError(ErrorCode.DUPLICATE_KEY, f"{key} already stored") from None
        except sqlite3.Error as exc:
            raise SonomaError(ErrorCode.IO_ERROR, str(exc)) from None

    def retrieve_text(self, session_id: str, process_id: str, layer: Layer) -> dict[str | None, str]:
        """Stored JSON text per task id (``None`` for process-level rows), in store order."""
        with self._lock:
            cur = self._db.execute(
                "SELECT task_id, rows_json FROM records WHERE session_id=? AND process_id=? AND layer=?"
                " ORDER BY seq",
                (session_id, process_id, Layer(layer).value),
            )
            return {(t or None): text for t, text in cur.fetchall()}

    def retrieve(self, session_id: str, process_id: str, layer: Layer) -> dict[str | None, list[dict]]:
        """Rows grouped by task id; an unknown process yields ``{}``."""
        return {t: json.loads(text) for t, text in self.retrieve_text(session_id, process_id, layer).items()}

    def count_groups(self, session_id: str, process_id: str, layer: Layer) -> int:
        with self._lock:
            (n,) = self._db.execute(
                "SELECT COUNT(*) FROM records WHERE session_id=? AND process_id=? AND layer=?",
                (session_id, process_id, Layer(layer).value),
            ).fetchone()
        return n

    def processes(self) -> list[tuple[str, str]]:
        with self._lock:
            cur = self._db.execute(
                "SELECT session_id, process_id FROM records GROUP BY session_id, process_id ORDER BY MIN(seq)")
            return [tuple(r) for r in cur.fetchall()]

    def export(self, out_dir: str | Path, fmt: OutputFormat = OutputFormat.CSV, zip: bool = False) -> list[Path]:
        """Write every stored group to ``<sessionId>/<processId>/<layer>.<ext>[.gz]``."""
        written = []
        for session_id, process_id in self.processes():
            for layer in Layer:
                groups = self.retrieve(session_id, process_id, layer)
                if not groups:
                    continue
                rows = [{"taskId": t or "", **r} for t, group in groups.items() for r in group]
                name = f"{layer.value}.{OutputFormat(fmt).value.lower()}" + (".gz" if zip else "")
                path = Path(out_dir) / session_id / process_id / name
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(format_output(rows, fmt, zip))
                written.append(path)
        return written


# -- output format generators ----------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _fields(rows: list[dict]) -> list[str]:
    names: dict[str, None] = {}
    for row in rows:
        names.update(dict.fromkeys(row))
    return list(names)


def format_output(rows: list[dict], fmt: OutputFormat | str, zip: bool = False) -> bytes:
    """Serialize flat rows as CSV (header + one line per row) or XML (one element per row)."""
    try:
        fmt = OutputFormat(fmt)
    except ValueError:
        raise SonomaError(ErrorCode.UNSUPPORTED_FORMAT, str(fmt)) from None
    names = _fields(rows)
    if fmt is OutputFormat.CSV:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow([_cell(row.get(n)) for n in names])
        data = buf.getvalue().encode()
    else:
        root = ET.Element("rows")
        for row in rows:
            el = ET.SubElement(root, "row")
            for n in names:
                if n in row:
                    ET.SubElement(el, n).text = _cell(row[n])
        data = ET.tostring(root, encoding="utf-8", xml_declaration=True)
    return gzip.compress(data, mtime=0) if zip else data


def parse_output(payload: bytes, fmt: OutputFormat | str, zip: bool = False) -> list[dict[str, str]]:
    """Inverse of :func:`format_output` up to stringification of values."""
    if zip:
        payload = gzip.decompress(payload)
    if OutputFormat(fmt) is OutputFormat.CSV:
        return list(csv.DictReader(io.StringIO(payload.decode())))
    root = ET.fromstring(payload)
    return [{child.tag: child.text or "" for child in row} for row in root]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sonoma-vo", description="export the measurement repository")
    parser.add_argument("--db", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--format", default="CSV", choices=[f.value for f in OutputFormat])
    parser.add_argument("--zip", action="store_true")
    args = parser.parse_args(argv)
    store = VoStore(args.db)
    for path in store.export(args.out, OutputFormat(args.format), args.zip):
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
