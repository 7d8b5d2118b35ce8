"""Makespan of a hybrid loop with and without a QPU reservation.

Runs the eigenvalue sub-workflow of the sample application as its own
instance, forcing exactly ``n`` loop iterations, once per reservation
setting, on a fresh simulated clock.
"""

from __future__ import annotations

import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .archive import pack_dir
from .fixtures import build_sample_app
from .gateway.policy import ResourcePolicy
from .gateway.runtime import Runtime
from .qpusim import Clock, LatencyModel

__all__ = ["LoopRun", "BenchResult", "run_hybrid_loop", "bench_reservation", "HYBRID_LOOP_WORKFLOW"]

HYBRID_LOOP_WORKFLOW = "compute-eigenvalue"


@dataclass
class LoopRun:
    reservation: str
    makespan_ms: float
    sessions: int
    jobs: int
    variables: dict[str, Any]
    status: str


@dataclass
class BenchResult:
    n: int
    queue_wait_ms: float
    exec_ms: float
    seed: int
    shared: LoopRun
    reserved: LoopRun
    saving_ms: float = field(init=False)

    def __post_init__(self):
        self.saving_ms = self.shared.makespan_ms - self.reserved.makespan_ms

    @property
    def variables_match(self) -> bool:
        return self.shared.variables == self.reserved.variables

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["variables_match"] = self.variables_match
        return doc


_ARCHIVES: dict[str, bytes] = {}


def _sample_archive() -> bytes:
    if "sample" not in _ARCHIVES:
        with tempfile.TemporaryDirectory() as tmp:
            _ARCHIVES["sample"] = pack_dir(build_sample_app(Path(tmp) / "clustering"))
    return _ARCHIVES["sample"]


def run_hybrid_loop(n: int, queue_wait_ms: float, exec_ms: float, *, reservation: str, seed: int = 0,
                    archive: bytes | None = None) -> LoopRun:
    if n < 1:
        raise ValueError("the loop needs at least one iteration")
    clock = Clock("simulated")
    runtime = Runtime(clock=clock, latency=LatencyModel(queue_wait_ms, exec_ms, 0), seed=seed,
                      policy=ResourcePolicy(qpu_reservation=reservation))
    try:
        runtime.deploy(archive or _sample_archive())
        # tol = -1 keeps the convergence test true so the loop runs exactly n times
        handle = runtime.run(HYBRID_LOOP_WORKFLOW, {"max_iter": n, "tol": -1})
        result = handle.result()
        stats = runtime.qpu.stats()
        return LoopRun(reservation, stats["makespan"].get(handle.instance_id, 0.0), stats["sessions"], stats["jobs"],
                       result["variables"], result["status"])
    finally:
        runtime.stop()


def bench_reservation(n: int = 10, queue_wait_ms: float = 500, exec_ms: float = 100, seed: int = 0) -> BenchResult:
    shared = run_hybrid_loop(n, queue_wait_ms, exec_ms, reservation="off", seed=seed)
    reserved = run_hybrid_loop(n, queue_wait_ms, exec_ms, reservation="auto", seed=seed)
    return BenchResult(n, queue_wait_ms, exec_ms, seed, shared, reserved)


def sweep(n_max: int, queue_wait_ms: float, exec_ms: float, seed: int = 0) -> list[BenchResult]:
    return [bench_reservation(n, queue_wait_ms, exec_ms, seed) for n in range(1, n_max + 1)]
