"""Durable registry of filed-but-unresolved bug reports.

State lives in a directory: a snapshot (``open_reports.json``, an array
of report objects) plus an append-log (``registry.log``, one JSON record
per line) holding every change since the snapshot was written. Loading
replays the log over the snapshot; replay is idempotent per ticket key,
so a crash between snapshot write and log truncation cannot corrupt the
open set. A partial trailing log line (torn write) is ignored.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .errors import NotFoundError, StoreError

SNAPSHOT_FILE = "open_reports.json"
LOG_FILE = "registry.log"

STATUS_OPEN = "open"
STATUS_RESOLVED = "resolved"

_RECOVERY_HINT = (
    "rename the registry directory aside and restart with an empty one, "
    "then re-file still-open reports"
)


@dataclass(frozen=True)
class TicketRef:
    tracker_key: str
    url: str
    created_at: datetime

    def __post_init__(self):
        if not self.tracker_key:
            raise ValueError("tracker_key must be non-empty")
        if "://" not in self.url and not self.url.startswith("urn:"):
            raise ValueError(f"ticket url {self.url!r} is not well-formed")

    def to_dict(self) -> dict:
        return {
            "tracker_key": self.tracker_key,
            "url": self.url,
            "created_at": self.created_at.isoformat(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TicketRef":
        return cls(
            tracker_key=doc["tracker_key"],
            url=doc["url"],
            created_at=datetime.fromisoformat(doc["created_at"]),
        )


@dataclass(frozen=True)
class OpenReport:
    """A filed ticket that has not been marked resolved.

    Only open reports take part in duplicate detection.
    """

    ticket: TicketRef
    summary: str
    description: str
    status: str = STATUS_OPEN

    def to_dict(self) -> dict:
        return {
            "ticket": self.ticket.to_dict(),
            "summary": self.summary,
            "description": self.description,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OpenReport":
        return cls(
            ticket=TicketRef.from_dict(doc["ticket"]),
            summary=doc["summary"],
            description=doc["description"],
            status=doc.get("status", STATUS_OPEN),
        )


class ReportRegistry:
    """Single-writer registry over a storage directory.

    Mutations are serialized by an internal lock; ``dedup_lock`` is held
    by the pipeline across duplicate detection plus ticket filing so two
    concurrent requests cannot race each other into duplicate tickets.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()
        self.dedup_lock = threading.RLock()
        self._reports: dict[str, OpenReport] = {}
        self._load()

    # -- loading -----------------------------------------------------------

    def _load(self) -> None:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreError(f"cannot create registry directory {self.directory}: {exc}") from exc
        snapshot_path = self.directory / SNAPSHOT_FILE
        if snapshot_path.exists():
            try:
                docs = json.loads(snapshot_path.read_bytes())
                if not isinstance(docs, list):
                    raise ValueError("snapshot must be a JSON array")
                for doc in docs:
                    report = OpenReport.from_dict(doc)
                    self._reports[report.ticket.tracker_key] = report
            except (ValueError, KeyError, TypeError) as exc:
                raise StoreError(
                    f"corrupt registry snapshot {snapshot_path}: {exc}; {_RECOVERY_HINT}"
                ) from exc
        log_path = self.directory / LOG_FILE
        if log_path.exists():
            data = log_path.read_bytes()
            lines = data.split(b"\n")
            # Anything after the final newline is a torn write from a crash;
            # the terminated prefix is the authoritative state.
            complete, _tail = lines[:-1], lines[-1]
            for line_no, line in enumerate(complete, start=1):
                if not line:
                    continue
                try:
                    self._apply(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise StoreError(
                        f"corrupt registry log {log_path} at line {line_no}: {exc}; "
                        f"{_RECOVERY_HINT}"
                    ) from exc

    def _apply(self, record: dict) -> None:
        op = record["op"]
        if op == "append":
            report = OpenReport.from_dict(record["report"])
            self._reports[report.ticket.tracker_key] = report
        elif op == "resolve":
            key = record["key"]
            existing = self._reports.get(key)
            if existing is not None:
                self._reports[key] = OpenReport(
                    ticket=existing.ticket,
                    summary=existing.summary,
                    description=existing.description,
                    status=STATUS_RESOLVED,
                )
        else:
            raise ValueError(f"unknown log op {op!r}")

    # -- mutation ----------------------------------------------------------

    def _write_log(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        path = self.directory / LOG_FILE
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def append(self, report: OpenReport) -> None:
        with self._lock:
            self._write_log({"op": "append", "report": report.to_dict()})
            self._reports[report.ticket.tracker_key] = report

    def mark_resolved(self, tracker_key: str) -> None:
        with self._lock:
            existing = self._reports.get(tracker_key)
            if existing is None or existing.status == STATUS_RESOLVED:
                raise NotFoundError(f"no open report with key {tracker_key!r}")
            self._write_log({"op": "resolve", "key": tracker_key})
            self._reports[tracker_key] = OpenReport(
                ticket=existing.ticket,
                summary=existing.summary,
                description=existing.description,
                status=STATUS_RESOLVED,
            )

    def compact(self) -> None:
        """Fold the log into the snapshot and truncate it."""
        with self._lock:
            snapshot_path = self.directory / SNAPSHOT_FILE
            tmp_path = snapshot_path.with_suffix(".json.tmp")
            docs = [r.to_dict() for r in self._all_sorted()]
            tmp_path.write_text(json.dumps(docs, indent=2, sort_keys=True), encoding="utf-8")
            os.replace(tmp_path, snapshot_path)
            (self.directory / LOG_FILE).write_bytes(b"")

    # -- views -------------------------------------------------------------

    def _all_sorted(self) -> list[OpenReport]:
        return sorted(self._reports.values(), key=lambda r: r.ticket.tracker_key)

    def open_reports(self) -> list[OpenReport]:
        """Consistent snapshot of reports still participating in dedup."""
        with self._lock:
            return [r for r in self._all_sorted() if r.status == STATUS_OPEN]

    def all_reports(self) -> list[OpenReport]:
        with self._lock:
            return self._all_sorted()

    def get(self, tracker_key: str) -> Optional[OpenReport]:
        with self._lock:
            return self._reports.get(tracker_key)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)
