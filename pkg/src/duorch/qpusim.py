"""Simulated QPU on a discrete-event clock.

Shared-queue jobs pay the queue wait ``W`` each; a session pays ``W`` once to
acquire exclusive access and its jobs then bypass the queue. Results are
synthetic measurement histograms drawn from a generator keyed by the job
payload, so a run is reproducible and independent of timing.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any

logger = logging.getLogger(__name__)

__all__ = [
    "Clock",
    "LatencyModel",
    "QpuJob",
    "QpuSession",
    "QpuCompletion",
    "QpuError",
    "SessionDenied",
    "StaleSession",
    "QpuOffline",
    "SimulatedQpu",
    "pseudo_measurement",
]


class Clock:
    """Millisecond clock, either simulated (advanced explicitly) or wall."""

    def __init__(self, mode: str = "simulated", start: float = 0.0):
        if mode not in ("simulated", "wall"):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._now = float(start)
        self._origin = time.monotonic()
        self._lock = threading.Lock()

    @property
    def simulated(self) -> bool:
        return self.mode == "simulated"

    def now(self) -> float:
        if self.simulated:
            return self._now
        return (time.monotonic() - self._origin) * 1000.0

    def advance_to(self, t: float) -> None:
        if not self.simulated:
            raise RuntimeError("cannot advance a wall clock")
        with self._lock:
            self._now = max(self._now, float(t))

    def sleep(self, ms: float) -> None:
        if self.simulated:
            self.advance_to(self._now + ms)
        else:
            time.sleep(ms / 1000.0)


@dataclass(frozen=True)
class LatencyModel:
    queue_wait_ms: float = 500.0
    exec_base_ms: float = 100.0
    per_shot_us: float = 0.0

    def __post_init__(self):
        for name in ("queue_wait_ms", "exec_base_ms", "per_shot_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def exec_ms(self, shots: int) -> float:
        return self.exec_base_ms + self.per_shot_us * shots / 1000.0


@dataclass
class QpuJob:
    payload: dict[str, Any]
    shots: int = 1024
    correlation: Any = None
    instance_id: str | None = None
    session_id: str | None = None
    job_id: str = ""
    submitted_at: float = 0.0


@dataclass
class QpuSession:
    session_id: str
    holder: str
    requested_at: float
    granted_at: float
    closed_at: float | None = None

    @property
    def open(self) -> bool:
        return self.closed_at is None


@dataclass(frozen=True)
class QpuCompletion:
    job_id: str
    correlation: Any
    time: float
    result: dict[str, Any]
    session_id: str | None = None


class QpuError(Exception):
    code = "qpu_error"


class SessionDenied(QpuError):
    code = "session_denied"


class StaleSession(QpuError):
    code = "stale_session"


class QpuOffline(QpuError):
    code = "qpu_offline"


def pseudo_measurement(payload: Any, shots: int, seed: int = 0) -> dict[str, Any]:
    """Deterministic synthetic histogram for ``payload`` measured ``shots`` times."""
    blob = json.dumps({"seed": seed, "payload": payload, "shots": shots}, sort_keys=True, default=str)
    rng = random.Random(int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "big"))
    qubits = int(payload.get("qubits", 2)) if isinstance(payload, dict) else 2
    outcomes = [format(i, f"0{qubits}b") for i in range(2**qubits)]
    weights = [rng.random() ** 3 for _ in outcomes]
    counts: dict[str, int] = {}
    for bits in rng.choices(outcomes, weights=weights, k=shots):
        counts[bits] = counts.get(bits, 0) + 1
    return {"counts": dict(sorted(counts.items())), "shots": shots}


@dataclass
class _JobRecord:
    job: QpuJob
    exec_ms: float
    due: float
    completed_at: float | None = None


class SimulatedQpu:
    def __init__(self, latency: LatencyModel | None = None, clock: Clock | None = None, *, seed: int = 0, name: str = "qpu0"):
        self.latency = latency or LatencyModel()
        self.clock = clock or Clock()
        self.seed = seed
        self.name = name
        self.offline = False
        self._ids = itertools.count(1)
        self._session_ids = itertools.count(1)
        self._heap: list[tuple[float, str]] = []
        self._jobs: dict[str, _JobRecord] = {}
        self._parked: list[str] = []
        self._session: QpuSession | None = None
        self.sessions: list[QpuSession] = []
        self.log: list[dict[str, Any]] = []
        self._first_seen: dict[str, float] = {}
        self._last_done: dict[str, float] = {}
        self._lock = threading.RLock()

    # -- sessions ---------------------------------------------------------

    @property
    def current_session(self) -> QpuSession | None:
        return self._session

    def open_session(self, instance_id: str) -> QpuSession:
        with self._lock:
            if self._session is not None:
                raise SessionDenied(f"{self.name} is held by {self._session.holder}")
            now = self.clock.now()
            session = QpuSession(f"s{next(self._session_ids)}", instance_id, now, now + self.latency.queue_wait_ms)
            self._session = session
            self.sessions.append(session)
            self._first_seen.setdefault(instance_id, now)
            self.log.append({"t": now, "event": "session_open", "session": session.session_id, "holder": instance_id,
                             "granted_at": session.granted_at})
            return session

    def close_session(self, session: QpuSession) -> None:
        with self._lock:
            if self._session is None or self._session.session_id != session.session_id:
                raise StaleSession(f"session {session.session_id} is not open")
            now = max(self.clock.now(), session.granted_at)
            session.closed_at = now
            self._session = None
            self.log.append({"t": now, "event": "session_close", "session": session.session_id})
            parked, self._parked = self._parked, []
            for job_id in parked:
                rec = self._jobs[job_id]
                rec.due = now + rec.exec_ms
                heapq.heappush(self._heap, (rec.due, job_id))

    # -- jobs -------------------------------------------------------------

    def submit(self, job: QpuJob) -> str:
        with self._lock:
            if self.offline:
                raise QpuOffline(f"{self.name} is offline")
            now = self.clock.now()
            exec_ms = self.latency.exec_ms(job.shots)
            if job.session_id is not None:
                s = self._session
                if s is None or s.session_id != job.session_id or s.holder != job.instance_id:
                    raise StaleSession(f"session {job.session_id} is not open for {job.instance_id}")
                due = max(now, s.granted_at) + exec_ms
            else:
                due = now + self.latency.queue_wait_ms + exec_ms
            job.job_id = f"job-{next(self._ids):06d}"
            job.submitted_at = now
            self._jobs[job.job_id] = _JobRecord(job, exec_ms, due)
            heapq.heappush(self._heap, (due, job.job_id))
            if job.instance_id:
                self._first_seen.setdefault(job.instance_id, now)
            self.log.append({"t": now, "event": "submit", "job": job.job_id, "session": job.session_id, "due": due})
            return job.job_id

    def next_event_time(self) -> float | None:
        with self._lock:
            return self._heap[0][0] if self._heap else None

    def pending(self) -> int:
        with self._lock:
            return len(self._heap) + len(self._parked)

    def _fire_due(self, t: float) -> list[QpuCompletion]:
        done = []
        while self._heap and self._heap[0][0] <= t:
            due, job_id = heapq.heappop(self._heap)
            rec = self._jobs[job_id]
            s = self._session
            if rec.job.session_id is None and s is not None and due >= s.granted_at:
                # exclusive access: shared jobs wait for the session to end
                self._parked.append(job_id)
                continue
            rec.completed_at = due
            job = rec.job
            result = pseudo_measurement(job.payload, job.shots, self.seed)
            if job.instance_id:
                self._last_done[job.instance_id] = max(self._last_done.get(job.instance_id, 0.0), due)
            self.log.append({"t": due, "event": "complete", "job": job_id, "session": job.session_id})
            done.append(QpuCompletion(job_id, job.correlation, due, result, job.session_id))
        return done

    def run_until(self, t: float) -> list[QpuCompletion]:
        """Fire every event due at or before ``t`` in (time, job id) order."""
        if not self.clock.simulated:
            raise RuntimeError("run_until needs a simulated clock")
        with self._lock:
            done = self._fire_due(t)
            self.clock.advance_to(t)
            return done

    def poll(self) -> list[QpuCompletion]:
        with self._lock:
            return self._fire_due(self.clock.now())

    def stats(self) -> dict[str, Any]:
        with self._lock:
            waits = {}
            for job_id, rec in self._jobs.items():
                if rec.completed_at is not None:
                    waits[job_id] = rec.completed_at - rec.job.submitted_at - rec.exec_ms
            makespan = {i: self._last_done[i] - self._first_seen[i] for i in self._last_done}
            return {
                "wait": waits,
                "makespan": makespan,
                "sessions": len(self.sessions),
                "jobs": sum(1 for r in self._jobs.values() if r.completed_at is not None),
            }
