"""Append-only study memory with four recall modes and a regenerated ledger.

Storage is one JSON object per line in a single append-mode file; records
are immutable once written and ids increase monotonically.  A plain-text
ledger table is rewritten after every insertion so the study history stays
reviewable (and diffable) outside the JSON stream.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

RECALL_MODES = ("by_bus", "by_case", "keyword", "max_capacity")

LEDGER_COLUMNS = (
    ("id", 4),
    ("timestamp", 20),
    ("case", 10),
    ("bus", 5),
    ("p_mw", 8),
    ("ctype", 11),
    ("kind", 12),
    ("status", 10),
    ("hard", 4),
    ("bord", 4),
    ("max_mw", 8),
)


class StudyMemoryIOError(Exception):
    """Persistence failed; the caller should warn and continue the turn."""


@dataclass(frozen=True)
class StudyRecord:
    id: int
    timestamp: str
    session_id: str
    case_name: str
    bus: int
    p_mw: float
    ctype: str
    status: str  # approve | reject | borderline
    hard_count: int
    borderline_count: int
    kind: str  # cia | max_capacity
    summary: str
    max_mw: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def new_study(
    session_id: str,
    case_name: str,
    bus: int,
    p_mw: float,
    ctype: str,
    status: str,
    hard_count: int = 0,
    borderline_count: int = 0,
    kind: str = "cia",
    summary: str = "",
    max_mw: float | None = None,
) -> StudyRecord:
    """Build an unnumbered record; append_study assigns id and timestamp."""
    return StudyRecord(
        id=0,
        timestamp="",
        session_id=session_id,
        case_name=case_name,
        bus=bus,
        p_mw=p_mw,
        ctype=ctype,
        status=status,
        hard_count=hard_count,
        borderline_count=borderline_count,
        kind=kind,
        summary=summary,
        max_mw=max_mw,
    )


class StudyMemory:
    """Durable, append-only store of assessment outcomes."""

    def __init__(self, path: str | Path, ledger_path: str | Path | None = None):
        self.path = Path(path)
        self.ledger_path = (
            Path(ledger_path) if ledger_path else self.path.with_name("ledger.txt")
        )
        self._lock = threading.Lock()
        self._records: list[StudyRecord] = []
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self._records.append(StudyRecord(**json.loads(line)))

    def append_study(self, record: StudyRecord) -> int:
        """Persist a record; returns its assigned id.

        Raises StudyMemoryIOError on storage failure so the caller can keep
        answering with a persistence warning.
        """
        with self._lock:
            assigned = replace(
                record,
                id=(self._records[-1].id + 1) if self._records else 1,
                timestamp=record.timestamp
                or datetime.now(timezone.utc).isoformat(timespec="seconds"),
            )
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(assigned.to_dict()) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                logger.warning("study memory append failed: %s", exc)
                raise StudyMemoryIOError(str(exc)) from exc
            self._records.append(assigned)
            self._write_ledger()
            return assigned.id

    def records(self) -> list[StudyRecord]:
        with self._lock:
            return list(self._records)

    def recall(self, mode: str, **args) -> list[StudyRecord]:
        """Recall studies newest-first.

        by_bus(case_name, bus) / by_case(case_name) / keyword(keyword) /
        max_capacity(case_name, bus) -> latest capacity record for the bus.
        """
        if mode not in RECALL_MODES:
            raise ValueError(f"mode must be one of {RECALL_MODES}")
        records = self.records()[::-1]  # newest first
        if mode == "by_bus":
            case_name, bus = args["case_name"], args["bus"]
            return [r for r in records if r.case_name == case_name and r.bus == bus]
        if mode == "by_case":
            return [r for r in records if r.case_name == args["case_name"]]
        if mode == "keyword":
            needle = args["keyword"].lower()
            return [r for r in records if needle in r.summary.lower()]
        case_name, bus = args["case_name"], args["bus"]
        return [
            r
            for r in records
            if r.kind == "max_capacity" and r.case_name == case_name and r.bus == bus
        ][:1]

    def regenerate_ledger(self) -> str:
        with self._lock:
            return self._write_ledger()

    def _write_ledger(self) -> str:
        header = "  ".join(name.ljust(width) for name, width in LEDGER_COLUMNS)
        lines = [header, "-" * len(header)]
        for r in self._records:
            fields = {
                "id": r.id,
                "timestamp": r.timestamp,
                "case": r.case_name,
                "bus": r.bus,
                "p_mw": f"{r.p_mw:g}",
                "ctype": r.ctype,
                "kind": r.kind,
                "status": r.status,
                "hard": r.hard_count,
                "bord": r.borderline_count,
                "max_mw": "" if r.max_mw is None else f"{r.max_mw:g}",
            }
            row = "  ".join(
                str(fields[name]).ljust(width) for name, width in LEDGER_COLUMNS
            )
            lines.append(f"{row}  {r.summary}")
        text = "\n".join(lines) + "\n"
        try:
            self.ledger_path.parent.mkdir(parents=True, exist_ok=True)
            self.ledger_path.write_text(text, encoding="utf-8")
        except OSError as exc:
            logger.warning("ledger write failed: %s", exc)
        return text


def rank_relevant(
    records: list[StudyRecord], case_name: str | None, bus: int | None
) -> list[StudyRecord]:
    """Order records for prompt injection: exact (case, bus) matches first,
    then same-case, then the rest; newest first within each tier."""

    def tier(r: StudyRecord) -> int:
        if case_name and bus is not None and r.case_name == case_name and r.bus == bus:
            return 0
        if case_name and r.case_name == case_name:
            return 1
        return 2

    return sorted(records, key=lambda r: (tier(r), -r.id))
