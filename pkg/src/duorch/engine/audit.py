"""Audit trail: finished instances are moved here from the runtime store."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..model.conditions import render
from .events import EventKind, InstanceEvent

__all__ = ["AuditRecord", "AuditStore", "build_record"]


@dataclass
class AuditRecord:
    instance_id: str
    model_id: str
    status: str
    started_at: float
    finished_at: float | None
    params: dict[str, Any]
    variables: dict[str, Any]
    events: list[dict[str, Any]]
    activities: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    edges: list[dict[str, Any]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def durations(self) -> dict[str, float]:
        return {a: sum(run["duration"] or 0 for run in runs) for a, runs in self.activities.items()}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AuditRecord":
        return cls(**doc)


def build_record(events: list[InstanceEvent], variables: dict[str, Any], status: str, model=None) -> AuditRecord:
    first = events[0]
    runs: dict[str, list[dict[str, Any]]] = {}
    open_runs: dict[str, dict[str, Any]] = {}
    edges = []
    notes = []
    for ev in events:
        p = ev.payload
        if ev.kind is EventKind.ACTIVITY_STARTED:
            run = {"token": p["token"], "started": ev.ts, "finished": None, "duration": None,
                   "inputs": p.get("inputs", {}), "outputs": None, "outcome": "running"}
            if p.get("compensates"):
                run["compensates"] = p["compensates"]
            open_runs[p["token"]] = run
            runs.setdefault(p["activity"], []).append(run)
        elif ev.kind in (EventKind.ACTIVITY_COMPLETED, EventKind.ACTIVITY_FAILED):
            run = open_runs.pop(p["token"], None)
            if run is not None:
                run["finished"] = ev.ts
                run["duration"] = ev.ts - run["started"]
                if ev.kind is EventKind.ACTIVITY_COMPLETED:
                    run["outputs"] = p.get("outputs", {})
                    run["outcome"] = "completed"
                else:
                    run["outcome"] = "failed"
                    run["error"] = p.get("reason")
        elif ev.kind is EventKind.EDGE_FIRED:
            for idx, state in sorted(p.get("edges", {}).items(), key=lambda kv: int(kv[0])):
                entry = {"edge": int(idx), "source": p["source"], "result": state, "ts": ev.ts}
                if model is not None:
                    e = model.edges[int(idx)]
                    entry.update(target=e.target, condition=render(e.condition), loop_back=e.loop_back)
                if p.get("values"):
                    entry["values"] = p["values"]
                edges.append(entry)
        elif ev.kind is EventKind.COMPENSATION_STARTED:
            for member in p.get("skipped", []):
                notes.append(f"{member} has no compensator; skipped")
    last = events[-1]
    return AuditRecord(
        instance_id=first.instance_id,
        model_id=first.payload["model_id"],
        status=status,
        started_at=first.ts,
        finished_at=last.ts,
        params=first.payload.get("params", {}),
        variables=variables,
        events=[json.loads(e.to_json()) for e in events],
        activities=runs,
        edges=edges,
        notes=notes,
    )


class AuditStore:
    """Records live in ``<root>/<model_id>/<instance_id>.json``; ``root=None`` keeps them in memory."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._memory: dict[str, AuditRecord] = {}
        self._lock = threading.Lock()
        self.fail_writes = False

    def write(self, record: AuditRecord) -> None:
        if self.fail_writes:
            raise OSError("audit store is not writable")
        with self._lock:
            if self.root is None:
                self._memory[record.instance_id] = record
                return
            d = self.root / record.model_id
            d.mkdir(parents=True, exist_ok=True)
            tmp = d / f".{record.instance_id}.tmp"
            tmp.write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
            os.replace(tmp, d / f"{record.instance_id}.json")

    def _all(self) -> Iterable[AuditRecord]:
        if self.root is None:
            return list(self._memory.values())
        out = []
        for f in sorted(self.root.glob("*/*.json")):
            out.append(AuditRecord.from_dict(json.loads(f.read_text())))
        return out

    def get(self, instance_id: str) -> AuditRecord | None:
        if self.root is None:
            return self._memory.get(instance_id)
        for f in self.root.glob(f"*/{instance_id}.json"):
            return AuditRecord.from_dict(json.loads(f.read_text()))
        return None

    def query(self, model: str | None = None, instance: str | None = None,
              since: float | None = None, until: float | None = None) -> list[AuditRecord]:
        out = []
        for r in self._all():
            if model is not None and r.model_id != model:
                continue
            if instance is not None and r.instance_id != instance:
                continue
            if since is not None and r.started_at < since:
                continue
            if until is not None and (r.finished_at or r.started_at) > until:
                continue
            out.append(r)
        return sorted(out, key=lambda r: (r.started_at, r.instance_id))
