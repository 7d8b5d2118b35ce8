"""Provisioning engine: installs a topology bottom-up through pluggable installers."""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
import sys
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .model.topology import Relation, TopologyFragment, TopologyModel, TopologyNode
from .model.workflow import strongly_connected_components
from .qpusim import Clock

logger = logging.getLogger(__name__)

__all__ = [
    "NodeState",
    "DeploymentPlan",
    "ProvisionState",
    "InstallerBinding",
    "InstallerRegistry",
    "InstallerError",
    "UnknownInstaller",
    "Provisioner",
    "plan",
    "DEFAULT_INSTALLERS",
]


class NodeState(str, Enum):
    PENDING = "pending"
    INSTALLING = "installing"
    INSTALLED = "installed"
    FAILED = "failed"
    REMOVED = "removed"


@dataclass(frozen=True)
class DeploymentPlan:
    stages: tuple[tuple[str, ...], ...]
    connections: tuple[tuple[str, str], ...] = ()

    @property
    def nodes(self) -> list[str]:
        return [n for stage in self.stages for n in stage]

    def stage_of(self, node: str) -> int:
        for i, stage in enumerate(self.stages):
            if node in stage:
                return i
        raise KeyError(node)

    def to_dict(self) -> dict[str, Any]:
        return {"stages": [list(s) for s in self.stages], "connections": [list(c) for c in self.connections]}


def plan(topology: TopologyModel, nodes: Iterable[str] | None = None) -> DeploymentPlan:
    """Stage the nodes so every dependency is installed in an earlier stage.

    A ``hosted_on`` target always precedes its source. The source of a
    ``connects_to`` edge is also held back until the peer is up, unless that
    would close a cycle; the connection itself is established after all stages.
    """
    selected = set(topology.node_ids if nodes is None else nodes)
    deps: dict[str, set[str]] = {n: set() for n in selected}
    for e in topology.edges_of(Relation.HOSTED_ON):
        if e.source in selected and e.target in selected:
            deps[e.source].add(e.target)
    for e in sorted(topology.edges_of(Relation.CONNECTS_TO), key=lambda e: (e.source, e.target)):
        if e.source in selected and e.target in selected and e.source != e.target:
            deps[e.source].add(e.target)
            succ = {n: sorted(d) for n, d in deps.items()}
            if any(len(c) > 1 for c in strongly_connected_components(sorted(selected), succ)):
                deps[e.source].discard(e.target)

    level: dict[str, int] = {}
    remaining = set(selected)
    stages: list[tuple[str, ...]] = []
    while remaining:
        ready = sorted(n for n in remaining if deps[n] <= set(level))
        if not ready:
            raise ValueError("hosted_on cycle among " + ", ".join(sorted(remaining)))
        for n in ready:
            level[n] = len(stages)
        stages.append(tuple(ready))
        remaining -= set(ready)
    connections = tuple(
        sorted(
            (e.source, e.target)
            for e in topology.edges_of(Relation.CONNECTS_TO)
            if e.source in selected and e.target in selected
        )
    )
    return DeploymentPlan(tuple(stages), connections)


# ---------------------------------------------------------------------------
# installers


class InstallerError(Exception):
    pass


class UnknownInstaller(InstallerError):
    pass


@dataclass
class InstallerBinding:
    """A named way of installing artifacts.

    ``install`` receives the node and its artifact directory and returns an
    opaque handle; ``uninstall`` receives the node, directory and handle.
    """

    name: str
    kind: str
    install: Callable[[TopologyNode, Path], Any]
    uninstall: Callable[[TopologyNode, Path, Any], None]
    idempotent: bool = True
    params: Mapping[str, Any] = field(default_factory=dict)
    calls: int = 0


def _mock_binding(name: str, params: Mapping[str, Any]) -> InstallerBinding:
    state = {"failures_left": int(params.get("fail_times", 0))}
    fail_nodes = set(params.get("fail_nodes", ()))
    lock = threading.Lock()

    def install(node: TopologyNode, where: Path) -> Any:
        with lock:
            if params.get("fail_always") or node.id in fail_nodes:
                raise InstallerError(f"{name}: cannot install {node.id}")
            if state["failures_left"] > 0:
                state["failures_left"] -= 1
                raise InstallerError(f"{name}: transient failure installing {node.id}")
        where.mkdir(parents=True, exist_ok=True)
        handle = {"node": node.id, "type": node.artifact_type, "installer": name}
        (where / "artifact.json").write_text(json.dumps(handle, sort_keys=True))
        return handle

    def uninstall(node: TopologyNode, where: Path, handle: Any) -> None:
        if params.get("fail_uninstall"):
            raise InstallerError(f"{name}: cannot uninstall {node.id}")
        shutil.rmtree(where, ignore_errors=True)

    return InstallerBinding(name, "mock", install, uninstall, bool(params.get("idempotent", True)), dict(params))


def _process_binding(name: str, params: Mapping[str, Any]) -> InstallerBinding:
    def run(action: str, node: TopologyNode, where: Path) -> str:
        template = params.get(action) or params.get("command")
        if not template:
            return ""
        where.mkdir(parents=True, exist_ok=True)
        cmd = shlex.split(template.format(python=shlex.quote(sys.executable), node=node.id, dir=str(where), action=action))
        doc = json.dumps({"action": action, "node": node.id, "type": node.artifact_type, "properties": dict(node.properties)})
        proc = subprocess.run(cmd, input=doc, capture_output=True, text=True, timeout=params.get("timeout", 60))
        if proc.returncode != 0:
            raise InstallerError(f"{name}: {action} {node.id} exited {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout

    def install(node, where):
        return run("install", node, where).strip() or None

    def uninstall(node, where, handle):
        run("uninstall", node, where)
        shutil.rmtree(where, ignore_errors=True)

    return InstallerBinding(name, "process_exec", install, uninstall, bool(params.get("idempotent", True)), dict(params))


_KINDS = {"mock": _mock_binding, "process_exec": _process_binding}

DEFAULT_INSTALLERS: dict[str, dict[str, Any]] = {
    name: {"kind": "mock"}
    for name in ("compute", "os", "runtime", "database", "program", "qpu-access", "circuit", "mock")
}


class InstallerRegistry:
    def __init__(self, bindings: Iterable[InstallerBinding] = ()):
        self._bindings = {b.name: b for b in bindings}

    @classmethod
    def from_config(cls, config: Mapping[str, Mapping[str, Any]] | None = None) -> "InstallerRegistry":
        bindings = []
        merged = dict(DEFAULT_INSTALLERS)
        merged.update(config or {})
        for name, spec in merged.items():
            kind = spec.get("kind", "mock")
            if kind not in _KINDS:
                raise ValueError(f"installer {name}: unknown kind {kind!r}")
            bindings.append(_KINDS[kind](name, spec))
        return cls(bindings)

    def register(self, binding: InstallerBinding) -> None:
        self._bindings[binding.name] = binding

    def get(self, name: str) -> InstallerBinding:
        try:
            return self._bindings[name]
        except KeyError:
            raise UnknownInstaller(f"unknown installer {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._bindings

    def names(self) -> list[str]:
        return sorted(self._bindings)


# ---------------------------------------------------------------------------
# state


@dataclass
class ProvisionState:
    environment_id: str
    nodes: dict[str, NodeState] = field(default_factory=dict)
    connections: dict[tuple[str, str], str] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ProvisionState":
        return ProvisionState(self.environment_id, dict(self.nodes), dict(self.connections), dict(self.errors))

    @property
    def installed(self) -> frozenset[str]:
        return frozenset(n for n, s in self.nodes.items() if s is NodeState.INSTALLED)

    @property
    def failed(self) -> frozenset[str]:
        return frozenset(n for n, s in self.nodes.items() if s is NodeState.FAILED)

    @property
    def ok(self) -> bool:
        return not self.failed

    def __eq__(self, other):
        if not isinstance(other, ProvisionState):
            return NotImplemented
        return (
            self.environment_id == other.environment_id
            and self.nodes == other.nodes
            and self.connections == other.connections
        )


class Provisioner:
    """Owns the provisioning state of one environment.

    All state changes go through this object; installs inside a stage run on
    a thread pool and their outcomes are applied once the stage finishes.
    """

    def __init__(
        self,
        topology: TopologyModel,
        registry: InstallerRegistry | None = None,
        env_dir: str | Path | None = None,
        environment_id: str = "env",
        *,
        retries: int = 3,
        clock: Clock | None = None,
        backoff_ms: float | None = None,
    ):
        self.topology = topology
        self.registry = registry or InstallerRegistry.from_config()
        self.environment_id = environment_id
        self.env_dir = Path(env_dir) if env_dir else None
        self.retries = retries
        self.clock = clock or Clock()
        self.backoff_ms = backoff_ms if backoff_ms is not None else (1.0 if self.clock.simulated else 100.0)
        self.state = ProvisionState(environment_id, {n: NodeState.PENDING for n in topology.node_ids})
        self.refs: dict[str, set[str]] = {n: set() for n in topology.node_ids}
        self.handles: dict[str, Any] = {}
        self.log: list[dict[str, Any]] = []
        self.installer_calls = 0
        self._scratch: Path | None = None
        self._lock = threading.Lock()
        self._full_plan = plan(topology)
        if self.env_dir is not None:
            self.env_dir.mkdir(parents=True, exist_ok=True)
            self._restore()

    @property
    def log_path(self) -> Path | None:
        return self.env_dir / "install.log" if self.env_dir else None

    def _artifact_dir(self, node: str) -> Path:
        if self.env_dir is None and self._scratch is None:
            self._scratch = Path(tempfile.mkdtemp(prefix=f"duorch-{self.environment_id}-"))
        return (self.env_dir or self._scratch) / "artifacts" / node

    def _record(self, node: str, action: str, outcome: str, **extra: Any) -> None:
        entry = {"ts": self.clock.now(), "node": node, "action": action, "outcome": outcome, **extra}
        with self._lock:
            self.log.append(entry)
            if self.log_path is not None:
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _restore(self) -> None:
        if not self.log_path.exists():
            return
        for line in self.log_path.read_text().splitlines():
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("skipping unreadable install log line in %s", self.log_path)
                continue
            node, action, outcome = entry.get("node"), entry.get("action"), entry.get("outcome")
            if action == "install" and outcome == "ok" and node in self.state.nodes:
                self.state.nodes[node] = NodeState.INSTALLED
                self.refs[node].add("restored")
            elif action == "uninstall" and outcome == "ok" and node in self.state.nodes:
                self.state.nodes[node] = NodeState.REMOVED
                self.refs[node].clear()
            elif action == "connect" and "->" in str(node):
                src, dst = node.split("->", 1)
                self.state.connections[(src, dst)] = "established" if outcome == "ok" else "pending"
            self.log.append(entry)

    def plan(self, nodes: Iterable[str] | None = None) -> DeploymentPlan:
        return plan(self.topology, nodes)

    # -- install ----------------------------------------------------------

    def _install_one(self, node_id: str) -> tuple[str, bool, Any]:
        node = self.topology.node(node_id)
        installer = self.registry.get(node.installer)
        attempts = 1 + (self.retries if installer.idempotent else 0)
        self._record(node_id, "install", "started")
        error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._record(node_id, "install", "retry", attempt=attempt)
                self.clock.sleep(self.backoff_ms * 2 ** (attempt - 1))
            try:
                with self._lock:
                    installer.calls += 1
                    self.installer_calls += 1
                handle = installer.install(node, self._artifact_dir(node_id))
                self._record(node_id, "install", "ok")
                return node_id, True, handle
            except Exception as exc:  # installers are third-party code
                error = exc
                logger.warning("install of %s failed (attempt %d/%d): %s", node_id, attempt + 1, attempts, exc)
        self._record(node_id, "install", "failed", error=str(error))
        return node_id, False, str(error)

    def provision(self, deployment: DeploymentPlan | None = None, holder: str = "environment") -> ProvisionState:
        """Execute ``deployment`` stage by stage and return a snapshot of the state.

        Nodes already installed are skipped. A failing stage stops the run;
        nodes of later stages stay pending and the failure is marked.
        """
        deployment = deployment or self._full_plan
        for n in deployment.nodes:
            self.registry.get(self.topology.node(n).installer)
        for stage in deployment.stages:
            todo = [n for n in stage if self.state.nodes[n] is not NodeState.INSTALLED]
            blocked = [n for n in todo if any(self.state.nodes[d] is not NodeState.INSTALLED for d in self.topology.hosted_on(n))]
            if blocked:
                for n in blocked:
                    self.state.errors[n] = "dependency not installed"
                break
            for n in todo:
                self.state.nodes[n] = NodeState.INSTALLING
            results = []
            if todo:
                with ThreadPoolExecutor(max_workers=len(todo)) as pool:
                    results = list(pool.map(self._install_one, todo))
            failed = False
            for node_id, ok, value in results:
                if ok:
                    self.state.nodes[node_id] = NodeState.INSTALLED
                    self.handles[node_id] = value
                    self.state.errors.pop(node_id, None)
                else:
                    self.state.nodes[node_id] = NodeState.FAILED
                    self.state.errors[node_id] = value
                    failed = True
            for n in stage:
                if self.state.nodes[n] is NodeState.INSTALLED:
                    self.refs[n].add(holder)
            if failed:
                return self.state.copy()
        for src, dst in deployment.connections:
            if self.state.connections.get((src, dst)) == "established":
                continue
            if self.state.nodes[src] is NodeState.INSTALLED and self.state.nodes[dst] is NodeState.INSTALLED:
                self.state.connections[(src, dst)] = "established"
                self._record(f"{src}->{dst}", "connect", "ok")
        return self.state.copy()

    def provision_fragment(self, fragment: TopologyFragment | Iterable[str], holder: str | None = None) -> ProvisionState:
        nodes = fragment.node_ids if isinstance(fragment, TopologyFragment) else frozenset(fragment)
        if holder is None:
            holder = fragment.activity_id if isinstance(fragment, TopologyFragment) else "fragment"
        return self.provision(self.plan(nodes), holder=holder)

    def is_installed(self, nodes: Iterable[str]) -> bool:
        return all(self.state.nodes.get(n) is NodeState.INSTALLED for n in nodes)

    # -- uninstall --------------------------------------------------------

    def deprovision(self, scope: str | TopologyFragment | Iterable[str] = "all", holder: str | None = None) -> ProvisionState:
        """Remove ``scope`` in reverse install order, connections first.

        With a ``holder`` only that holder's references are dropped and nodes
        still referenced by someone else stay installed.
        """
        if scope == "all":
            candidates = set(self.topology.node_ids)
        elif isinstance(scope, TopologyFragment):
            candidates = set(scope.node_ids)
        else:
            candidates = set(scope)
        if holder is not None:
            for n in candidates:
                self.refs[n].discard(holder)
            candidates = {n for n in candidates if not self.refs[n]}
        else:
            for n in candidates:
                self.refs[n].clear()
        removing = [n for n in reversed(self._full_plan.nodes) if n in candidates and self.state.nodes[n] is NodeState.INSTALLED]
        if not removing:
            return self.state.copy()
        for (src, dst), status in sorted(self.state.connections.items()):
            if status == "established" and (src in removing or dst in removing):
                self.state.connections[(src, dst)] = "pending"
                self._record(f"{src}->{dst}", "connect", "released")
        for n in removing:
            node = self.topology.node(n)
            try:
                self.registry.get(node.installer).uninstall(node, self._artifact_dir(n), self.handles.get(n))
            except Exception as exc:
                self.state.nodes[n] = NodeState.FAILED
                self.state.errors[n] = str(exc)
                self._record(n, "uninstall", "failed", error=str(exc))
                continue
            self.state.nodes[n] = NodeState.REMOVED
            self.handles.pop(n, None)
            self._record(n, "uninstall", "ok")
        return self.state.copy()
