"""Topology models: deployable artifacts and the dependencies between them.

Edges point from the dependent artifact to its dependency, so a Java program
is ``hosted_on`` its JVM and the JVM is ``hosted_on`` its server.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .diagnostics import Diagnostic, ModelError
from .workflow import WorkflowModel, strongly_connected_components

__all__ = [
    "Relation",
    "TopologyNode",
    "TopologyEdge",
    "TopologyModel",
    "TopologyFragment",
    "parse_topology",
    "topology_from_dict",
    "topology_to_dict",
    "serialize_topology",
    "validate_topology",
    "fragment_for",
    "fragment_of_node",
]


class Relation(str, Enum):
    HOSTED_ON = "hosted_on"
    CONNECTS_TO = "connects_to"


@dataclass(frozen=True)
class TopologyNode:
    id: str
    artifact_type: str
    installer: str
    properties: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class TopologyEdge:
    source: str
    target: str
    relation: Relation


@dataclass(frozen=True)
class TopologyModel:
    id: str
    nodes: tuple[TopologyNode, ...] = ()
    edges: tuple[TopologyEdge, ...] = ()

    def node(self, node_id: str) -> TopologyNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def hosted_on(self, node_id: str) -> list[str]:
        return [e.target for e in self.edges if e.source == node_id and e.relation is Relation.HOSTED_ON]

    def connects_to(self, node_id: str) -> list[str]:
        return [e.target for e in self.edges if e.source == node_id and e.relation is Relation.CONNECTS_TO]

    def edges_of(self, relation: Relation) -> list[TopologyEdge]:
        return [e for e in self.edges if e.relation is relation]


@dataclass(frozen=True)
class TopologyFragment:
    activity_id: str
    node_ids: frozenset[str]


def topology_from_dict(doc: Mapping[str, Any], *, check: bool = True) -> TopologyModel:
    diags: list[Diagnostic] = []
    if not isinstance(doc, Mapping):
        raise ModelError([Diagnostic("syntax", "topology document must be a JSON object")])
    nodes = []
    for raw in doc.get("nodes", []) or []:
        if not isinstance(raw, Mapping) or "id" not in raw:
            diags.append(Diagnostic("missing_field", f"node without id: {raw!r}"))
            continue
        nodes.append(
            TopologyNode(raw["id"], raw.get("type", ""), raw.get("installer", ""), dict(raw.get("properties", {}) or {}))
        )
    edges = []
    for raw in doc.get("edges", []) or []:
        try:
            rel = Relation(raw.get("relation"))
        except (ValueError, AttributeError):
            diags.append(Diagnostic("bad_relation", f"unknown relation in edge {raw!r}"))
            continue
        edges.append(TopologyEdge(raw.get("from"), raw.get("to"), rel))
    if diags:
        raise ModelError(diags)
    model = TopologyModel(doc.get("id", "topology"), tuple(nodes), tuple(edges))
    if check:
        problems = validate_topology(model)
        if problems:
            raise ModelError(problems)
    return model


def parse_topology(document: str | bytes, *, check: bool = True) -> TopologyModel:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ModelError(
            [Diagnostic("syntax", f"syntax error at line {exc.lineno} column {exc.colno} (offset {exc.pos}): {exc.msg}")]
        ) from None
    return topology_from_dict(doc, check=check)


def topology_to_dict(model: TopologyModel) -> dict[str, Any]:
    return {
        "id": model.id,
        "nodes": [
            {"id": n.id, "type": n.artifact_type, "installer": n.installer, "properties": dict(n.properties)}
            for n in model.nodes
        ],
        "edges": [{"from": e.source, "to": e.target, "relation": e.relation.value} for e in model.edges],
    }


def serialize_topology(model: TopologyModel) -> str:
    return json.dumps(topology_to_dict(model), indent=2) + "\n"


def validate_topology(model: TopologyModel) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    ids = model.node_ids
    known = set(ids)
    if len(known) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        diags.append(Diagnostic("duplicate_node", f"duplicate node ids: {', '.join(dupes)}"))
    for e in model.edges:
        for end in (e.source, e.target):
            if end not in known:
                diags.append(Diagnostic("unknown_node", f"edge {e.source}->{e.target} references unknown node {end}", end))
    if diags:
        return diags
    succ = {n: model.hosted_on(n) for n in ids}
    for comp in strongly_connected_components(sorted(ids), succ):
        if len(comp) > 1 or comp[0] in succ[comp[0]]:
            diags.append(Diagnostic("hosted_on_cycle", f"hosted_on cycle through {', '.join(sorted(comp))}"))
    return diags


def _hosting_closure(model: TopologyModel, start: str) -> set[str]:
    seen = {start}
    todo = [start]
    while todo:
        for nxt in model.hosted_on(todo.pop()):
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def fragment_of_node(model: TopologyModel, node_id: str) -> frozenset[str]:
    """Node, its hosting stack, the peers it connects to and their hosting stacks."""
    if node_id not in model.node_ids:
        raise KeyError(f"unknown topology node {node_id}")
    result = _hosting_closure(model, node_id)
    # peers of peers are followed too, so the fragment of any member stays inside
    todo = list(result)
    while todo:
        for peer in model.connects_to(todo.pop()):
            if peer not in result:
                added = _hosting_closure(model, peer) - result
                result |= added
                todo.extend(added)
    return frozenset(result)


def fragment_for(workflow: WorkflowModel, topology: TopologyModel, activity_id: str) -> TopologyFragment:
    activity = workflow.activity(activity_id)
    node = activity.implementation.topology_node
    if not node:
        raise ValueError(f"activity {activity_id} has no topology binding")
    return TopologyFragment(activity_id, fragment_of_node(topology, node))
