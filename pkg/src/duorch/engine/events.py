"""Append-only per-instance event logs.

Layout: ``<root>/instances/<instance_id>.log``, one JSON event per line with
fields ``seq``, ``ts``, ``kind`` and ``payload``.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

__all__ = ["EventKind", "InstanceEvent", "EventStore", "CorruptLog"]


class EventKind(str, Enum):
    INSTANTIATED = "instantiated"
    ACTIVITY_READY = "activity_ready"
    ACTIVITY_STARTED = "activity_started"
    ACTIVITY_COMPLETED = "activity_completed"
    ACTIVITY_FAILED = "activity_failed"
    EDGE_FIRED = "edge_fired"
    VARIABLES_UPDATED = "variables_updated"
    COMPENSATION_STARTED = "compensation_started"
    COMPENSATION_DONE = "compensation_done"
    INSTANCE_COMPLETED = "instance_completed"
    INSTANCE_FAILED = "instance_failed"


@dataclass(frozen=True)
class InstanceEvent:
    seq: int
    instance_id: str
    ts: float
    kind: EventKind
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "instance": self.instance_id, "ts": self.ts, "kind": self.kind.value, "payload": self.payload},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str, instance_id: str | None = None) -> "InstanceEvent":
        doc = json.loads(line)
        return cls(int(doc["seq"]), doc.get("instance", instance_id), float(doc["ts"]), EventKind(doc["kind"]), doc.get("payload") or {})


class CorruptLog(Exception):
    def __init__(self, instance_id: str, reason: str):
        super().__init__(f"instance {instance_id}: {reason}")
        self.instance_id = instance_id
        self.reason = reason


class EventStore:
    """Durable event logs; with ``root=None`` everything stays in memory.

    ``fsync`` forces each append to disk before it returns, which is what
    makes an event durable before its side effect becomes visible.
    """

    def __init__(self, root: str | Path | None = None, *, fsync: bool = False):
        self.root = Path(root) if root is not None else None
        self.fsync = fsync
        self._memory: dict[str, list[str]] = {}
        self._last: dict[str, int] = {}
        self._lock = threading.RLock()
        if self.root is not None:
            (self.root / "instances").mkdir(parents=True, exist_ok=True)

    def _path(self, instance_id: str) -> Path:
        return self.root / "instances" / f"{instance_id}.log"

    def append(self, event: InstanceEvent) -> None:
        with self._lock:
            last = self._last.get(event.instance_id)
            if last is None and self.root is not None and self._path(event.instance_id).exists():
                last = self._scan_last(event.instance_id)
            if last is not None and event.seq <= last:
                raise CorruptLog(event.instance_id, f"sequence {event.seq} does not follow {last}")
            line = event.to_json()
            if self.root is None:
                self._memory.setdefault(event.instance_id, []).append(line)
            else:
                with open(self._path(event.instance_id), "a") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            self._last[event.instance_id] = event.seq

    def _scan_last(self, instance_id: str) -> int | None:
        events = self.read(instance_id)
        return events[-1].seq if events else None

    def _lines(self, instance_id: str) -> list[str]:
        if self.root is None:
            if instance_id not in self._memory:
                raise KeyError(instance_id)
            return list(self._memory[instance_id])
        path = self._path(instance_id)
        if not path.exists():
            raise KeyError(instance_id)
        text = path.read_text()
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        elif lines:
            # torn final write: the event never became durable, so cut it off
            # before anything else is appended behind it
            logger.warning("dropping incomplete trailing record in %s", path)
            torn = lines.pop()
            with self._lock, open(path, "r+b") as fh:
                fh.truncate(len(text.encode()) - len(torn.encode()))
        return lines

    def read(self, instance_id: str) -> list[InstanceEvent]:
        events = []
        prev = 0
        for n, line in enumerate(self._lines(instance_id), 1):
            try:
                ev = InstanceEvent.from_json(line, instance_id)
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptLog(instance_id, f"line {n} unreadable: {exc}") from None
            if ev.seq <= prev:
                raise CorruptLog(instance_id, f"non-monotonic sequence {ev.seq} after {prev}")
            prev = ev.seq
            events.append(ev)
        return events

    def instance_ids(self) -> list[str]:
        if self.root is None:
            return sorted(self._memory)
        return sorted(p.stem for p in (self.root / "instances").glob("*.log"))

    def exists(self, instance_id: str) -> bool:
        if self.root is None:
            return instance_id in self._memory
        return self._path(instance_id).exists()

    def remove(self, instance_id: str) -> None:
        with self._lock:
            self._last.pop(instance_id, None)
            if self.root is None:
                self._memory.pop(instance_id, None)
            else:
                self._path(instance_id).unlink(missing_ok=True)

    def quarantine(self, instance_id: str, reason: str) -> None:
        with self._lock:
            self._last.pop(instance_id, None)
            if self.root is None:
                self._memory.pop(instance_id, None)
                return
            qdir = self.root / "quarantine"
            qdir.mkdir(exist_ok=True)
            shutil.move(str(self._path(instance_id)), qdir / f"{instance_id}.log")
            (qdir / f"{instance_id}.reason").write_text(reason + "\n")

    def write_raw(self, instance_id: str, lines: list[str]) -> None:
        """Replace a log wholesale; used by crash harnesses to stage truncated logs."""
        with self._lock:
            self._last.pop(instance_id, None)
            if self.root is None:
                self._memory[instance_id] = list(lines)
            else:
                self._path(instance_id).write_text("".join(line + "\n" for line in lines))
