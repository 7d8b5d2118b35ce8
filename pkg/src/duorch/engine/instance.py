"""Workflow instance state and the event-application function.

``apply`` is the only code that mutates an instance. The live engine and the
recovery path both run every event through it, so replaying a log rebuilds
exactly the state the engine had when it wrote that log.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from ..model.workflow import WorkflowModel
from .events import CorruptLog, EventKind, InstanceEvent

__all__ = [
    "ActivityState",
    "EdgeState",
    "InstanceStatus",
    "WorkflowInstance",
    "apply",
    "replay",
    "loop_region",
]


class ActivityState(str, Enum):
    INACTIVE = "inactive"
    READY = "ready"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    COMPENSATING = "compensating"
    COMPENSATED = "compensated"
    SKIPPED = "skipped"


class EdgeState(str, Enum):
    UNEVALUATED = "unevaluated"
    FIRED_TRUE = "fired_true"
    FIRED_FALSE = "fired_false"
    DEAD = "dead"


class InstanceStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    COMPENSATED = "compensated"


TERMINAL = frozenset({InstanceStatus.COMPLETED, InstanceStatus.FAILED, InstanceStatus.COMPENSATED})


@dataclass
class Compensation:
    unit: str
    failed_activity: str
    reason: str
    queue: list[tuple[str, str]]
    current: tuple[str, str] | None = None
    skipped: list[str] = field(default_factory=list)


@dataclass
class WorkflowInstance:
    instance_id: str
    model_id: str
    variables: dict[str, Any] = field(default_factory=dict)
    activity_states: dict[str, ActivityState] = field(default_factory=dict)
    edge_states: list[EdgeState] = field(default_factory=list)
    loop_iteration_counts: dict[str, int] = field(default_factory=dict)
    status: InstanceStatus = InstanceStatus.RUNNING
    # live dispatch token -> activity id
    tokens: dict[str, str] = field(default_factory=dict)
    issued_tokens: set[str] = field(default_factory=set)
    completion_order: list[str] = field(default_factory=list)
    pending_navigation: list[str] = field(default_factory=list)
    compensation: Compensation | None = None
    errors: list[str] = field(default_factory=list)
    parent: dict[str, Any] | None = None
    app: str | None = None
    created_at: float = 0.0
    finished_at: float | None = None
    last_seq: int = 0

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL

    def states(self, *wanted: ActivityState) -> list[str]:
        return [a for a, s in self.activity_states.items() if s in wanted]

    def token_for(self, activity_id: str) -> str | None:
        for tok, act in self.tokens.items():
            if act == activity_id:
                return tok
        return None

    def snapshot(self) -> dict[str, Any]:
        """Comparable view of the whole state (used by replay checks)."""
        return {
            "instance_id": self.instance_id,
            "model_id": self.model_id,
            "variables": copy.deepcopy(self.variables),
            "activity_states": {k: v.value for k, v in self.activity_states.items()},
            "edge_states": [e.value for e in self.edge_states],
            "loop_iteration_counts": dict(self.loop_iteration_counts),
            "status": self.status.value,
            "tokens": dict(self.tokens),
            "completion_order": list(self.completion_order),
            "pending_navigation": list(self.pending_navigation),
            "compensation": None if self.compensation is None else copy.deepcopy(self.compensation.__dict__),
            "errors": list(self.errors),
            "last_seq": self.last_seq,
        }


def loop_region(model: WorkflowModel, target: str) -> tuple[set[str], set[int]]:
    """Activities reachable from ``target`` over non-loop edges, and their outgoing edges."""
    region = {target}
    todo = [target]
    while todo:
        src = todo.pop()
        for i in model.outgoing(src):
            e = model.edges[i]
            if not e.loop_back and e.target not in region:
                region.add(e.target)
                todo.append(e.target)
    edges = {i for i, e in enumerate(model.edges) if e.source in region}
    return region, edges


def apply(inst: WorkflowInstance | None, event: InstanceEvent, model: WorkflowModel) -> WorkflowInstance:
    kind, p = event.kind, event.payload
    if kind is EventKind.INSTANTIATED:
        if inst is not None:
            raise CorruptLog(event.instance_id, "second instantiated event")
        inst = WorkflowInstance(
            instance_id=event.instance_id,
            model_id=p["model_id"],
            variables=dict(p.get("params", {})),
            activity_states={a.id: ActivityState.INACTIVE for a in model.activities},
            edge_states=[EdgeState.UNEVALUATED] * len(model.edges),
            parent=p.get("parent"),
            app=p.get("app"),
            created_at=event.ts,
        )
        for s in sorted(model.start_activities):
            inst.activity_states[s] = ActivityState.READY
        inst.last_seq = event.seq
        return inst
    if inst is None:
        raise CorruptLog(event.instance_id, "log does not start with instantiated")
    if event.seq <= inst.last_seq:
        raise CorruptLog(event.instance_id, f"non-monotonic sequence {event.seq} after {inst.last_seq}")
    inst.last_seq = event.seq

    if kind is EventKind.ACTIVITY_READY:
        inst.activity_states[p["activity"]] = ActivityState.READY
    elif kind is EventKind.ACTIVITY_STARTED:
        act, tok = p["activity"], p["token"]
        for stale in [t for t, a in inst.tokens.items() if a == act]:
            del inst.tokens[stale]
        inst.tokens[tok] = act
        inst.issued_tokens.add(tok)
        inst.activity_states[act] = ActivityState.RUNNING
        if p.get("compensates"):
            inst.activity_states[p["compensates"]] = ActivityState.COMPENSATING
            if inst.compensation is not None:
                inst.compensation.current = (p["compensates"], act)
                if inst.compensation.queue and inst.compensation.queue[0] == (p["compensates"], act):
                    inst.compensation.queue.pop(0)
    elif kind is EventKind.ACTIVITY_COMPLETED:
        act = p["activity"]
        inst.tokens.pop(p["token"], None)
        inst.variables.update(p.get("variables", {}))
        inst.activity_states[act] = ActivityState.COMPLETED
        comp = inst.compensation
        if comp is not None and comp.current is not None and comp.current[1] == act:
            inst.activity_states[comp.current[0]] = ActivityState.COMPENSATED
            comp.current = None
        else:
            inst.completion_order.append(act)
            inst.pending_navigation.append(act)
    elif kind is EventKind.ACTIVITY_FAILED:
        inst.tokens.pop(p["token"], None)
        inst.activity_states[p["activity"]] = ActivityState.FAILED
        inst.errors.append(f"{p['activity']}: {p.get('reason', '')}")
    elif kind is EventKind.EDGE_FIRED:
        src = p["source"]
        if src in inst.pending_navigation:
            inst.pending_navigation.remove(src)
        if p.get("skipped"):
            inst.activity_states[src] = ActivityState.SKIPPED
        for idx, state in sorted(p.get("edges", {}).items(), key=lambda kv: int(kv[0])):
            i = int(idx)
            inst.edge_states[i] = EdgeState(state)
            edge = model.edges[i]
            if edge.loop_back and inst.edge_states[i] is EdgeState.FIRED_TRUE:
                region, region_edges = loop_region(model, edge.target)
                for a in region:
                    if inst.activity_states[a] is not ActivityState.RUNNING:
                        inst.activity_states[a] = ActivityState.INACTIVE
                    if a in inst.pending_navigation:
                        inst.pending_navigation.remove(a)
                for j in region_edges:
                    inst.edge_states[j] = EdgeState.UNEVALUATED
                inst.loop_iteration_counts[edge.target] = inst.loop_iteration_counts.get(edge.target, 0) + 1
                inst.activity_states[edge.target] = ActivityState.READY
    elif kind is EventKind.VARIABLES_UPDATED:
        inst.variables.update(p.get("variables", {}))
    elif kind is EventKind.COMPENSATION_STARTED:
        inst.compensation = Compensation(
            unit=p["unit"],
            failed_activity=p["failed"],
            reason=p.get("reason", ""),
            queue=[tuple(x) for x in p.get("order", [])],
            skipped=list(p.get("skipped", [])),
        )
        inst.errors.append(f"{p['failed']}: {p.get('reason', '')}")
        # in-flight work outside the compensation is abandoned
        for tok, act in list(inst.tokens.items()):
            del inst.tokens[tok]
            inst.activity_states[act] = ActivityState.SKIPPED
        inst.pending_navigation.clear()
    elif kind is EventKind.COMPENSATION_DONE:
        inst.status = InstanceStatus.COMPENSATED
        inst.finished_at = event.ts
    elif kind is EventKind.INSTANCE_COMPLETED:
        inst.status = InstanceStatus.COMPLETED
        inst.finished_at = event.ts
    elif kind is EventKind.INSTANCE_FAILED:
        inst.status = InstanceStatus.FAILED
        inst.finished_at = event.ts
        for r in p.get("reasons", []):
            if r not in inst.errors:
                inst.errors.append(r)
        for tok, act in list(inst.tokens.items()):
            del inst.tokens[tok]
    return inst


def replay(events: Iterable[InstanceEvent], model: WorkflowModel) -> WorkflowInstance:
    inst = None
    for ev in events:
        inst = apply(inst, ev, model)
    if inst is None:
        raise ValueError("empty event log")
    return inst
