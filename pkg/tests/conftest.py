from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from duorch.archive import pack_dir  # noqa: E402
from duorch.fixtures import build_sample_app  # noqa: E402
from duorch.model.conditions import TRUE  # noqa: E402
from duorch.model.topology import Relation, TopologyEdge, TopologyModel, TopologyNode  # noqa: E402
from duorch.model.workflow import (  # noqa: E402
    Activity,
    ActivityKind,
    BindingKind,
    ControlEdge,
    ImplementationBinding,
    WorkflowModel,
    detect_hybrid_loops,
    workflow_from_dict,
)


@pytest.fixture(scope="session")
def sample_dir(tmp_path_factory) -> Path:
    return build_sample_app(tmp_path_factory.mktemp("sample") / "clustering")


@pytest.fixture(scope="session")
def sample_qaa(sample_dir) -> bytes:
    return pack_dir(sample_dir)


def graph_model(g, name: str = "g") -> WorkflowModel:
    """A workflow model whose shape is an oracle ``Graph``; nodes are named n0, n1, ..."""
    acts = []
    for i in range(g.n):
        if i in g.quantum:
            kind, binding = ActivityKind.QUANTUM, ImplementationBinding(BindingKind.QPU_JOB, "c", "Q")
        else:
            kind, binding = ActivityKind.CLASSICAL, ImplementationBinding(BindingKind.IN_PROCESS, "builtin:identity", "H")
        acts.append(Activity(f"n{i}", kind, binding))
    edges = tuple(ControlEdge(f"n{s}", f"n{t}", TRUE, lb) for s, t, lb in g.edges)
    return WorkflowModel(name, tuple(acts), edges)


def make_topology(nodes, hosted=(), connects=(), installer: str = "mock") -> TopologyModel:
    return TopologyModel(
        "t",
        tuple(TopologyNode(n, n, installer) for n in nodes),
        tuple(TopologyEdge(s, t, Relation.HOSTED_ON) for s, t in hosted)
        + tuple(TopologyEdge(s, t, Relation.CONNECTS_TO) for s, t in connects),
    )


@st.composite
def topologies(draw, max_nodes: int = 8):
    """Random topologies whose hosted_on edges form a DAG, plus a few connects_to edges."""
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    names = draw(st.permutations([f"N{i}" for i in range(n)]))
    hosted = [(names[i], names[j]) for i in range(n) for j in range(i) if draw(st.booleans())]
    pairs = [(names[i], names[j]) for i in range(n) for j in range(n) if i != j]
    connects = draw(st.lists(st.sampled_from(pairs), max_size=3, unique=True)) if pairs else []
    return make_topology(names, hosted, connects)


class ActivityFailure(Exception):
    """Raised by a scripted behaviour to make the activity fail."""


def drive(engine, instance_id: str, behaviour=None, *, on_dispatch=None, limit: int = 10_000) -> list:
    """Run an instance to its end on the calling thread.

    ``behaviour`` maps activity ids to ``inputs -> outputs`` callables; missing
    entries echo their inputs. Returns every dispatch request in order.
    """
    behaviour = behaviour or {}
    seen = []
    for _ in range(limit):
        if instance_id not in {i.instance_id for i in engine.instances()}:
            return seen
        inst = engine.instance(instance_id)
        if inst.terminal:
            return seen
        requests = engine.step(instance_id)
        if not requests and (inst.terminal or instance_id not in {i.instance_id for i in engine.instances()}):
            return seen
        for req in requests:
            seen.append(req)
            if on_dispatch is not None:
                on_dispatch(req)
            fn = behaviour.get(req.key.activity_id, dict)
            try:
                outputs = fn(dict(req.inputs))
            except ActivityFailure as exc:
                engine.fail_activity(req.key, str(exc))
            else:
                engine.complete_activity(req.key, outputs)
    raise AssertionError("instance did not finish")


def _act(aid: str, **extra):
    return {"id": aid, "impl": {"target": "builtin:identity", "topology_node": "H"}, **extra}


def six_workflow() -> WorkflowModel:
    """A -> (B, C) -> D -> E -> F; every activity adds its letter to the trail."""
    acts = [_act("A", **{"in": ["seed"], "out": ["trail"]})]
    acts += [_act(a, **{"in": ["trail"], "out": [f"trail->{a.lower()}"]}) for a in "BC"]
    acts += [_act("D", **{"in": ["b->left", "c->right"], "out": ["trail"]})]
    acts += [_act(a, **{"in": ["trail"], "out": ["trail"]}) for a in "EF"]
    edges = [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D"), ("D", "E"), ("E", "F")]
    return workflow_from_dict({
        "id": "six",
        "params": ["seed"],
        "activities": acts,
        "edges": [{"from": s, "to": t} for s, t in edges],
    })


SIX_BEHAVIOUR = {
    "A": lambda i: {"trail": i["seed"] + "A"},
    "B": lambda i: {"trail": i["trail"] + "B"},
    "C": lambda i: {"trail": i["trail"] + "C"},
    "D": lambda i: {"trail": i["left"] + "|" + i["right"] + "D"},
    "E": lambda i: {"trail": i["trail"] + "E"},
    "F": lambda i: {"trail": i["trail"] + "F"},
}


def package_loops(g):
    """``detect_hybrid_loops`` on an oracle graph, in the oracle's notation."""
    return [
        (frozenset(int(a[1:]) for a in lp.activities), frozenset(int(a[1:]) for a in lp.quantum), lp.back_edges)
        for lp in detect_hybrid_loops(graph_model(g))
    ]


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
