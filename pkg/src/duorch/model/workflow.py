"""Workflow models: activities joined by condition-guarded control edges."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .conditions import TRUE, ConditionExpr, ConditionSyntaxError, parse_condition, render
from .diagnostics import Diagnostic, ModelError

__all__ = [
    "ActivityKind",
    "BindingKind",
    "ImplementationBinding",
    "Activity",
    "ControlEdge",
    "UnitOfWork",
    "Param",
    "WorkflowModel",
    "HybridLoop",
    "parse_workflow",
    "workflow_from_dict",
    "workflow_to_dict",
    "serialize_workflow",
    "validate_workflow",
    "detect_hybrid_loops",
    "strongly_connected_components",
]


class ActivityKind(str, Enum):
    CLASSICAL = "classical"
    QUANTUM = "quantum"
    SUBWORKFLOW = "subworkflow"


class BindingKind(str, Enum):
    IN_PROCESS = "in_process"
    PROCESS_EXEC = "process_exec"
    QPU_JOB = "qpu_job"
    SUBWORKFLOW = "subworkflow"


@dataclass(frozen=True)
class ImplementationBinding:
    kind: BindingKind
    target: str
    topology_node: str | None = None


@dataclass(frozen=True)
class Activity:
    id: str
    kind: ActivityKind
    implementation: ImplementationBinding
    # (variable name, input field name)
    input_mapping: tuple[tuple[str, str], ...] = ()
    # (output field name, variable name)
    output_mapping: tuple[tuple[str, str], ...] = ()
    compensator: str | None = None
    annotations: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def inputs_from(self, variables: Mapping[str, Any]) -> dict[str, Any]:
        return {fld: variables.get(var) for var, fld in self.input_mapping}

    def variables_from(self, outputs: Mapping[str, Any]) -> dict[str, Any]:
        return {var: outputs[fld] for fld, var in self.output_mapping if fld in outputs}


@dataclass(frozen=True)
class ControlEdge:
    source: str
    target: str
    condition: ConditionExpr = TRUE
    loop_back: bool = False


@dataclass(frozen=True)
class UnitOfWork:
    id: str
    members: frozenset[str]


@dataclass(frozen=True)
class Param:
    name: str
    required: bool = True
    default: Any = None


@dataclass(frozen=True)
class WorkflowModel:
    id: str
    activities: tuple[Activity, ...]
    edges: tuple[ControlEdge, ...]
    units_of_work: tuple[UnitOfWork, ...] = ()
    start_activities: frozenset[str] = frozenset()
    params: tuple[Param, ...] = ()

    @property
    def input_params(self) -> list[str]:
        return [p.name for p in self.params]

    def activity(self, activity_id: str) -> Activity:
        for a in self.activities:
            if a.id == activity_id:
                return a
        raise KeyError(activity_id)

    @property
    def activity_ids(self) -> list[str]:
        return [a.id for a in self.activities]

    def incoming(self, activity_id: str) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.target == activity_id]

    def outgoing(self, activity_id: str) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.source == activity_id]

    def unit_of(self, activity_id: str) -> UnitOfWork | None:
        for u in self.units_of_work:
            if activity_id in u.members:
                return u
        return None

    @property
    def compensators(self) -> frozenset[str]:
        return frozenset(a.compensator for a in self.activities if a.compensator)

    @property
    def navigable(self) -> list[str]:
        """Activities reached by navigation (compensator-only activities excluded)."""
        targets = {e.target for e in self.edges}
        return [
            a.id
            for a in self.activities
            if not (a.id in self.compensators and a.id not in targets and a.id not in self.start_activities)
        ]

    def subworkflow_targets(self) -> set[str]:
        return {a.implementation.target for a in self.activities if a.kind is ActivityKind.SUBWORKFLOW}


@dataclass(frozen=True)
class HybridLoop:
    activities: frozenset[str]
    quantum: frozenset[str]
    back_edges: tuple[int, ...]

    @property
    def key(self) -> str:
        return min(self.activities)


# ---------------------------------------------------------------------------
# text format


def _mapping(entries: Iterable[Any], where: str, diags: list[Diagnostic]) -> tuple[tuple[str, str], ...]:
    out = []
    for entry in entries or ():
        if isinstance(entry, str):
            left, sep, right = entry.partition("->")
            left, right = left.strip(), right.strip()
            out.append((left, right if sep else left))
        elif isinstance(entry, (list, tuple)) and len(entry) == 2:
            out.append((str(entry[0]), str(entry[1])))
        else:
            diags.append(Diagnostic("bad_mapping", f"{where}: cannot read mapping entry {entry!r}"))
    return tuple(out)


def workflow_from_dict(doc: Mapping[str, Any]) -> WorkflowModel:
    """Build a model from the decoded JSON document, raising :class:`ModelError` on any problem."""
    diags: list[Diagnostic] = []
    if not isinstance(doc, Mapping):
        raise ModelError([Diagnostic("syntax", "workflow document must be a JSON object")])
    wf_id = doc.get("id")
    if not wf_id or not isinstance(wf_id, str):
        diags.append(Diagnostic("missing_field", "workflow needs a string 'id'"))
        wf_id = "?"

    params = []
    for p in doc.get("params", []) or []:
        if isinstance(p, str):
            params.append(Param(p))
        elif isinstance(p, Mapping) and "name" in p:
            params.append(Param(p["name"], "default" not in p, p.get("default")))
        else:
            diags.append(Diagnostic("bad_param", f"cannot read parameter {p!r}"))

    activities = []
    for raw in doc.get("activities", []) or []:
        aid = raw.get("id") if isinstance(raw, Mapping) else None
        if not aid:
            diags.append(Diagnostic("missing_field", f"activity without id: {raw!r}"))
            continue
        try:
            kind = ActivityKind(raw.get("kind", "classical"))
        except ValueError:
            diags.append(Diagnostic("bad_kind", f"activity {aid}: unknown kind {raw.get('kind')!r}", aid))
            continue
        impl = raw.get("impl") or {}
        default_bkind = {
            ActivityKind.QUANTUM: "qpu_job",
            ActivityKind.SUBWORKFLOW: "subworkflow",
        }.get(kind, "in_process")
        try:
            bkind = BindingKind(impl.get("kind", default_bkind))
        except ValueError:
            diags.append(Diagnostic("bad_binding", f"activity {aid}: unknown impl kind {impl.get('kind')!r}", aid))
            continue
        binding = ImplementationBinding(bkind, str(impl.get("target", "")), impl.get("topology_node"))
        activities.append(
            Activity(
                id=aid,
                kind=kind,
                implementation=binding,
                input_mapping=_mapping(raw.get("in"), f"activity {aid} in", diags),
                output_mapping=_mapping(raw.get("out"), f"activity {aid} out", diags),
                compensator=raw.get("compensator"),
                annotations=dict(raw.get("annotations", {}) or {}),
            )
        )

    edges = []
    for n, raw in enumerate(doc.get("edges", []) or []):
        if not isinstance(raw, Mapping) or "from" not in raw or "to" not in raw:
            diags.append(Diagnostic("bad_edge", f"edge #{n} needs 'from' and 'to'"))
            continue
        try:
            cond = parse_condition(raw.get("cond", "true"))
        except ConditionSyntaxError as exc:
            diags.append(Diagnostic("syntax", f"edge {raw['from']}->{raw['to']}: condition {exc}"))
            continue
        edges.append(ControlEdge(raw["from"], raw["to"], cond, bool(raw.get("loop_back", False))))

    units = []
    for raw in doc.get("units", []) or []:
        if isinstance(raw, Mapping):
            uid, members = raw.get("id", f"unit{len(units)}"), raw.get("members", [])
        else:
            uid, members = f"unit{len(units)}", raw
        if len(set(members)) != len(members):
            diags.append(Diagnostic("duplicate_member", f"unit {uid} lists a member twice"))
        units.append(UnitOfWork(uid, frozenset(members)))

    if "start" in doc:
        start = frozenset(doc["start"])
    else:
        non_loop_targets = {e.target for e in edges if not e.loop_back}
        comps = {a.compensator for a in activities if a.compensator}
        start = frozenset(a.id for a in activities if a.id not in non_loop_targets and a.id not in comps)

    if diags:
        raise ModelError(diags)
    model = WorkflowModel(wf_id, tuple(activities), tuple(edges), tuple(units), start, tuple(params))
    problems = validate_workflow(model)
    if problems:
        raise ModelError(problems)
    return model


def parse_workflow(document: str | bytes) -> WorkflowModel:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ModelError(
            [Diagnostic("syntax", f"syntax error at line {exc.lineno} column {exc.colno} (offset {exc.pos}): {exc.msg}")]
        ) from None
    return workflow_from_dict(doc)


def _mapping_out(pairs) -> list[str]:
    return [a if a == b else f"{a}->{b}" for a, b in pairs]


def workflow_to_dict(model: WorkflowModel) -> dict[str, Any]:
    acts = []
    for a in model.activities:
        impl: dict[str, Any] = {"kind": a.implementation.kind.value, "target": a.implementation.target}
        if a.implementation.topology_node is not None:
            impl["topology_node"] = a.implementation.topology_node
        entry: dict[str, Any] = {
            "id": a.id,
            "kind": a.kind.value,
            "impl": impl,
            "in": _mapping_out(a.input_mapping),
            "out": _mapping_out(a.output_mapping),
        }
        if a.compensator:
            entry["compensator"] = a.compensator
        if a.annotations:
            entry["annotations"] = dict(a.annotations)
        acts.append(entry)
    edges = []
    for e in model.edges:
        entry = {"from": e.source, "to": e.target, "cond": render(e.condition)}
        if e.loop_back:
            entry["loop_back"] = True
        edges.append(entry)
    params: list[Any] = []
    for p in model.params:
        params.append(p.name if p.required else {"name": p.name, "default": p.default})
    return {
        "id": model.id,
        "params": params,
        "activities": acts,
        "edges": edges,
        "units": [{"id": u.id, "members": sorted(u.members)} for u in model.units_of_work],
        "start": sorted(model.start_activities),
    }


def serialize_workflow(model: WorkflowModel) -> str:
    return json.dumps(workflow_to_dict(model), indent=2) + "\n"


# ---------------------------------------------------------------------------
# static analysis


def validate_workflow(model: WorkflowModel) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    ids = [a.id for a in model.activities]
    known = set(ids)
    if len(known) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        diags.append(Diagnostic("duplicate_activity", f"duplicate activity ids: {', '.join(dupes)}"))
    for e in model.edges:
        if e.source not in known:
            diags.append(Diagnostic("unknown_activity", f"unknown source {e.source}", e.source))
        if e.target not in known:
            diags.append(Diagnostic("unknown_activity", f"unknown target {e.target}", e.target))
    for s in sorted(model.start_activities):
        if s not in known:
            diags.append(Diagnostic("unknown_activity", f"unknown start activity {s}", s))
        elif any(not e.loop_back and e.target == s for e in model.edges):
            diags.append(Diagnostic("start_has_incoming", f"start activity {s} has incoming edges", s))
    by_id = {a.id: a for a in model.activities}
    for a in model.activities:
        if a.kind is ActivityKind.QUANTUM and a.implementation.kind is not BindingKind.QPU_JOB:
            diags.append(Diagnostic("bad_binding", f"quantum activity {a.id} must bind a qpu_job", a.id))
        if a.kind is ActivityKind.SUBWORKFLOW and not a.implementation.target:
            diags.append(Diagnostic("bad_binding", f"sub-workflow activity {a.id} names no model", a.id))
        if a.compensator is not None:
            comp = by_id.get(a.compensator)
            if comp is None:
                diags.append(Diagnostic("unknown_activity", f"unknown compensator {a.compensator}", a.id))
            elif comp.kind is not ActivityKind.CLASSICAL:
                diags.append(Diagnostic("bad_compensator", f"compensator {comp.id} of {a.id} must be classical", a.id))
    seen: dict[str, str] = {}
    for u in model.units_of_work:
        for m in sorted(u.members):
            if m not in known:
                diags.append(Diagnostic("unknown_activity", f"unknown unit member {m}", m))
            if m in seen:
                diags.append(Diagnostic("overlapping_units", f"units {seen[m]} and {u.id} overlap on {m}", m))
            seen[m] = u.id
    if not diags:
        forward = {a: [] for a in known}
        for e in model.edges:
            if not e.loop_back:
                forward[e.source].append(e.target)
        for comp in strongly_connected_components(sorted(known), forward):
            if len(comp) > 1 or any(t == comp[0] for t in forward[comp[0]]):
                diags.append(
                    Diagnostic("unflagged_cycle", f"cycle without loop_back edge through {', '.join(sorted(comp))}")
                )
    return diags


def strongly_connected_components(nodes: list[str], succ: Mapping[str, list[str]]) -> list[list[str]]:
    """Tarjan's algorithm, iterative so deep graphs do not hit the recursion limit."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    result: list[list[str]] = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                result.append(comp)
    return result


def detect_hybrid_loops(model: WorkflowModel) -> list[HybridLoop]:
    succ: dict[str, list[str]] = {a.id: [] for a in model.activities}
    for e in model.edges:
        succ[e.source].append(e.target)
    kinds = {a.id: a.kind for a in model.activities}
    loops = []
    for comp in strongly_connected_components(sorted(succ), succ):
        members = frozenset(comp)
        back = tuple(
            i for i, e in enumerate(model.edges) if e.loop_back and e.source in members and e.target in members
        )
        if not back:
            continue
        quantum = frozenset(m for m in members if kinds[m] is ActivityKind.QUANTUM)
        if quantum:
            loops.append(HybridLoop(members, quantum, back))
    return sorted(loops, key=lambda lp: lp.key)
