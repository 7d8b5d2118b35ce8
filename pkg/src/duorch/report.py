"""Files written by ``bench-reservation``: a CSV table and a makespan figure."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchResult  # noqa: E402

__all__ = ["COLUMNS", "rows", "write_csv", "plot_makespans"]

COLUMNS = ("n", "queue_wait_ms", "exec_ms", "shared_ms", "reserved_ms", "saving_ms", "sessions")


def rows(results: Sequence[BenchResult]) -> list[dict[str, float]]:
    return [
        {"n": r.n, "queue_wait_ms": r.queue_wait_ms, "exec_ms": r.exec_ms, "shared_ms": r.shared.makespan_ms,
         "reserved_ms": r.reserved.makespan_ms, "saving_ms": r.saving_ms, "sessions": r.reserved.sessions}
        for r in results
    ]


def write_csv(results: Sequence[BenchResult], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows(results))
    return path


def plot_makespans(results: Sequence[BenchResult], path: str | Path) -> Path:
    """Makespan against loop iterations for both policies, with the saving shaded."""
    path = Path(path)
    ns = [r.n for r in results]
    shared = [r.shared.makespan_ms for r in results]
    reserved = [r.reserved.makespan_ms for r in results]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, shared, marker="o", label="shared queue")
    ax.plot(ns, reserved, marker="s", label="reserved session")
    ax.fill_between(ns, reserved, shared, alpha=0.15, label="saving")
    last = results[-1]
    ax.set_title(f"hybrid loop makespan (W={last.queue_wait_ms:g} ms, exec={last.exec_ms:g} ms)")
    ax.set_xlabel("loop iterations N")
    ax.set_ylabel("makespan [ms]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
