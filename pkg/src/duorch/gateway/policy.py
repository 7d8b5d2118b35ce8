"""Resource-manager policy: environment lifecycle and QPU reservation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from ..model.workflow import HybridLoop, WorkflowModel, detect_hybrid_loops

__all__ = ["ResourcePolicy", "ReservationDirective", "decide_reservation"]

LIFECYCLES = ("per_run", "keep_alive")
RESERVATIONS = ("off", "auto")
PROVISIONING = ("auto", "eager", "lazy")
SCOPES = ("loop", "run")


@dataclass(frozen=True)
class ResourcePolicy:
    """How the runtime manages environments and the QPU.

    ``provisioning="auto"`` installs the whole topology up front under
    ``keep_alive`` and provisions fragments on demand under ``per_run``.
    ``reservation_scope`` picks whether a session spans one loop entry or
    the rest of the instance once it first enters a hybrid loop.
    """

    lifecycle: str = "keep_alive"
    qpu_reservation: str = "auto"
    provisioning: str = "auto"
    reservation_scope: str = "loop"

    def __post_init__(self):
        for value, allowed, name in (
            (self.lifecycle, LIFECYCLES, "lifecycle"),
            (self.qpu_reservation, RESERVATIONS, "qpu_reservation"),
            (self.provisioning, PROVISIONING, "provisioning"),
            (self.reservation_scope, SCOPES, "reservation_scope"),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {', '.join(allowed)}, not {value!r}")

    def lazy_for(self, lifecycle: str) -> bool:
        if self.provisioning == "auto":
            return lifecycle == "per_run"
        return self.provisioning == "lazy"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> "ResourcePolicy":
        doc = dict(doc or {})
        unknown = sorted(set(doc) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown policy keys: {', '.join(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class ReservationDirective:
    """Reserve the QPU around one hybrid loop.

    A session opens on the first dispatch of any activity in ``open_on``
    and closes once every edge in ``close_on`` has fired false.
    """

    loop: HybridLoop
    open_on: frozenset[str]
    close_on: tuple[int, ...]


def decide_reservation(model: WorkflowModel, policy: ResourcePolicy) -> list[ReservationDirective]:
    if policy.qpu_reservation == "off":
        return []
    return [ReservationDirective(loop, loop.quantum, loop.back_edges) for loop in detect_hybrid_loops(model)]
