"""Ready-made models and applications for tests, benchmarks and demos.

The clustering application lives as a plain directory tree next to this
module (``sample_app/``); :func:`build_sample_app` copies it somewhere
writable and stamps a canonical manifest onto the copy.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Any

from ..archive import pack_dir, write_manifest
from ..model.topology import TopologyModel, topology_from_dict
from ..model.workflow import WorkflowModel, workflow_from_dict

__all__ = [
    "SAMPLE_APP_DIR",
    "FIG3_NODES",
    "build_sample_app",
    "sample_archive",
    "fig3_topology",
    "diamond_workflow",
    "unit_of_work_workflow",
    "counting_loop_workflow",
    "minimal_app",
]

SAMPLE_APP_DIR = Path(__file__).parent / "sample_app"

FIG3_NODES = ("VM", "Server", "Linux", "JVM", "DB2", "CustomerDB", "RetrieveData")


def build_sample_app(dest: str | Path, *, lifecycle: str | None = None) -> Path:
    """Copy the clustering application to ``dest`` and write its manifest."""
    dest = Path(dest)
    if dest.exists():
        shutil.rmtree(dest)
    shutil.copytree(SAMPLE_APP_DIR, dest, ignore=shutil.ignore_patterns("__pycache__", "*.pyc"))
    if lifecycle is not None:
        doc = json.loads((dest / "manifest.json").read_text())
        doc["lifecycle"] = lifecycle
        (dest / "manifest.json").write_text(json.dumps(doc))
    write_manifest(dest)
    return dest


def sample_archive(workdir: str | Path, **kwargs: Any) -> bytes:
    return pack_dir(build_sample_app(Path(workdir) / "clustering", **kwargs))


def fig3_topology() -> TopologyModel:
    """The seven-node data-retrieval environment: a Java program on a server talking to a DB2 database on a VM."""
    installers = {"VM": "compute", "Server": "compute", "Linux": "os", "JVM": "runtime",
                  "DB2": "database", "CustomerDB": "database", "RetrieveData": "program"}
    return topology_from_dict({
        "id": "retrieve-data",
        "nodes": [{"id": n, "type": n, "installer": installers[n]} for n in FIG3_NODES],
        "edges": [
            {"from": "RetrieveData", "to": "JVM", "relation": "hosted_on"},
            {"from": "JVM", "to": "Server", "relation": "hosted_on"},
            {"from": "DB2", "to": "Linux", "relation": "hosted_on"},
            {"from": "Linux", "to": "VM", "relation": "hosted_on"},
            {"from": "CustomerDB", "to": "DB2", "relation": "hosted_on"},
            {"from": "RetrieveData", "to": "CustomerDB", "relation": "connects_to"},
        ],
    })


def _classical(aid: str, target: str = "builtin:identity", node: str = "Host", **extra: Any) -> dict[str, Any]:
    return {"id": aid, "kind": "classical", "impl": {"kind": "in_process", "target": target, "topology_node": node}, **extra}


def diamond_workflow() -> WorkflowModel:
    """A -> (B | C) -> D where the branch is picked by ``$x``."""
    return workflow_from_dict({
        "id": "diamond",
        "params": ["x"],
        "activities": [_classical(a) for a in "ABCD"],
        "edges": [
            {"from": "A", "to": "B", "cond": "$x > 0"},
            {"from": "A", "to": "C", "cond": "$x <= 0"},
            {"from": "B", "to": "D"},
            {"from": "C", "to": "D"},
        ],
    })


def unit_of_work_workflow(*, compensators: tuple[str, ...] = ("A", "B", "C")) -> WorkflowModel:
    """A -> B -> C -> D with {A, B, C} as one unit of work; D is the one expected to fail."""
    acts = []
    for a in "ABCD":
        extra = {"compensator": f"undo_{a}"} if a in compensators else {}
        acts.append(_classical(a, **extra))
    acts += [_classical(f"undo_{a}") for a in compensators]
    return workflow_from_dict({
        "id": "unit-of-work",
        "activities": acts,
        "edges": [{"from": "A", "to": "B"}, {"from": "B", "to": "C"}, {"from": "C", "to": "D"}],
        "units": [{"id": "abcd", "members": ["A", "B", "C", "D"]}],
    })


def counting_loop_workflow(*, quantum: bool = True) -> WorkflowModel:
    """init -> body -> step, looping back to body while ``$i < $n``."""
    body = ({"id": "body", "kind": "quantum", "impl": {"kind": "qpu_job", "target": "circuit", "topology_node": "Host"}}
            if quantum else _classical("body"))
    return workflow_from_dict({
        "id": "counting-loop",
        "params": ["n", {"name": "start", "default": 0}],
        "activities": [
            _classical("init", **{"in": ["start->i"], "out": ["i"]}),
            body,
            _classical("step", "builtin:increment", **{"in": ["i"], "out": ["i"]}),
            _classical("done"),
        ],
        "edges": [
            {"from": "init", "to": "body"},
            {"from": "body", "to": "step"},
            {"from": "step", "to": "body", "loop_back": True, "cond": "$i < $n"},
            {"from": "step", "to": "done", "cond": "$i >= $n"},
        ],
    })


def minimal_app(dest: str | Path, workflow: dict[str, Any] | None = None, *, topology: dict[str, Any] | None = None,
                extra_files: dict[str, str] | None = None, lifecycle: str | None = None) -> Path:
    """Write a one-workflow application directory bound to a single ``Host`` node."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    workflow = workflow or {
        "id": "sort",
        "params": ["text"],
        "activities": [_classical("sort", "builtin:sort-lines", **{"in": ["text"], "out": ["text"]})],
    }
    topology = topology or {"id": "host", "nodes": [{"id": "Host", "type": "Host", "installer": "mock"}], "edges": []}
    (dest / "workflows").mkdir(exist_ok=True)
    (dest / "topology").mkdir(exist_ok=True)
    (dest / "workflows" / f"{workflow['id']}.json").write_text(json.dumps(workflow, indent=1))
    (dest / "topology" / "topology.json").write_text(json.dumps(topology, indent=1))
    programs = []
    for rel, text in sorted((extra_files or {}).items()):
        p = dest / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        programs.append({"path": rel, "kind": "classical"})
    manifest = {
        "name": workflow["id"],
        "version": "1",
        "entry_workflow": workflow["id"],
        "workflows": [f"workflows/{workflow['id']}.json"],
        "topology": "topology/topology.json",
        "programs": programs,
        "data": [],
    }
    if lifecycle:
        manifest["lifecycle"] = lifecycle
    (dest / "manifest.json").write_text(json.dumps(manifest))
    write_manifest(dest)
    return dest
