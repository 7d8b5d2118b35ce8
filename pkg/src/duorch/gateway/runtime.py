"""The runtime behind the gateway: deployments, run handling and the driver loop.

One driver thread owns the engine and every provisioner. Executors run on
their own pools and report back through a queue; the QPU simulator is
advanced by the driver whenever no classical work is outstanding. Callers
on other threads hand work to the driver with :meth:`Runtime.call`.
"""

from __future__ import annotations

import io
import itertools
import json
import logging
import queue
import shutil
import tempfile
import threading
import time
import uuid
import zipfile
from concurrent.futures import Future, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from ..archive import Application, ArchiveError, digest, load_application, unpack, validate_archive
from ..engine import (
    AuditRecord,
    AuditStore,
    CorrelationKey,
    DispatchError,
    DispatchRequest,
    Dispatcher,
    Engine,
    EngineError,
    EventStore,
    InProcessExecutor,
    NoCorrelation,
    ProcessExecutor,
    UnknownModel,
)
from ..engine.instance import EdgeState, InstanceStatus, WorkflowInstance
from ..model.topology import TopologyFragment, fragment_for, parse_topology
from ..model.workflow import BindingKind, WorkflowModel
from ..provisioner import InstallerRegistry, Provisioner, plan
from ..qpusim import Clock, LatencyModel, QpuCompletion, QpuError, QpuJob, QpuSession, SessionDenied, SimulatedQpu
from .policy import ResourcePolicy, ReservationDirective, decide_reservation

logger = logging.getLogger(__name__)

__all__ = ["GatewayError", "DeployedApp", "RunHandle", "Runtime", "STEPS"]

STEPS = ("store", "unpack", "provision", "env_ready", "instantiate", "execute")


class GatewayError(Exception):
    def __init__(self, code: str, detail: str, instance: str | None = None):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail
        self.instance = instance


@dataclass
class DeployedApp:
    name: str
    digest: str
    root: Path
    application: Application
    provisioner: Provisioner
    lifecycle: str
    lazy: bool
    _fragments: dict[tuple[str, str], TopologyFragment] = field(default_factory=dict)

    def fragment(self, model_id: str, activity_id: str) -> TopologyFragment:
        key = (model_id, activity_id)
        if key not in self._fragments:
            model = self.application.workflows[model_id]
            self._fragments[key] = fragment_for(model, self.application.topology, activity_id)
        return self._fragments[key]

    @property
    def holder(self) -> str:
        return f"app:{self.name}"


@dataclass
class RunHandle:
    """The caller's view of one RUN / RUN_ARCHIVE: an id now and a result later."""

    message_id: str
    app: str
    instance_id: str
    holder: str
    runtime: "Runtime" = field(repr=False)
    future: Future = field(default_factory=Future, repr=False)

    def result(self, timeout: float | None = None) -> dict[str, Any]:
        if not self.runtime.threaded:
            self.runtime.run_until_idle()
        return self.future.result(timeout)


class Runtime:
    def __init__(
        self,
        state_dir: str | Path | None = None,
        *,
        clock: Clock | None = None,
        latency: LatencyModel | None = None,
        qpu: SimulatedQpu | None = None,
        policy: ResourcePolicy | None = None,
        installers: InstallerRegistry | Mapping[str, Any] | None = None,
        installer_retries: int = 3,
        deploy_retries: int = 2,
        max_iterations: int = 1000,
        seed: int = 0,
        id_factory: Callable[[], str] | None = None,
    ):
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.clock = clock or (qpu.clock if qpu else Clock())
        self.qpu = qpu or SimulatedQpu(latency, self.clock, seed=seed)
        self.policy = policy or ResourcePolicy()
        self.registry = installers if isinstance(installers, InstallerRegistry) else InstallerRegistry.from_config(installers)
        self.installer_retries = installer_retries
        self.deploy_retries = deploy_retries
        if self.state_dir is not None:
            for sub in ("inbox", "apps", "environments", "runs"):
                (self.state_dir / sub).mkdir(parents=True, exist_ok=True)
        store = EventStore(self.state_dir) if self.state_dir else EventStore()
        audit = AuditStore(self.state_dir / "audit") if self.state_dir else AuditStore()
        self.engine = Engine(self._resolve, store, audit, clock=self.clock, max_iterations=max_iterations,
                             auto_archive=False, id_factory=id_factory)
        self.apps: dict[str, DeployedApp] = {}
        self.inproc = InProcessExecutor(self._root_of)
        self.procs = ProcessExecutor(self._root_of)
        self.dispatcher = Dispatcher(self._deliver, self._guard)
        self.dispatcher.register(BindingKind.IN_PROCESS, self.inproc)
        self.dispatcher.register(BindingKind.PROCESS_EXEC, self.procs)
        self.dispatcher.register(BindingKind.QPU_JOB, self._submit_qpu)
        self.dispatcher.register(BindingKind.SUBWORKFLOW, self._start_child)
        self.gateway_log: list[dict[str, Any]] = []
        self.decisions: list[dict[str, Any]] = []
        self.runs: dict[str, RunHandle] = {}
        self._inbox: queue.Queue = queue.Queue()
        self._commands: queue.Queue = queue.Queue()
        self._wakeup = threading.Event()
        self._inflight: list[Future] = []
        self._dispatch_seq: dict[CorrelationKey, int] = {}
        self._seq = itertools.count(1)
        self._handled: set[str] = set()
        self._directives: dict[tuple[str | None, str], list[ReservationDirective]] = {}
        self._sessions: dict[tuple[str, int], QpuSession] = {}
        self._fallback: set[tuple[str, int]] = set()
        self._driver: threading.Thread | None = None
        self._stop = threading.Event()
        self._log_lock = threading.Lock()

    # -- plumbing ---------------------------------------------------------

    @property
    def threaded(self) -> bool:
        return self._driver is not None and self._driver.is_alive()

    def call(self, fn: Callable[[], Any]) -> Any:
        """Run ``fn`` on the driver thread (directly when there is no driver)."""
        if not self.threaded or threading.current_thread() is self._driver:
            return fn()
        fut: Future = Future()
        self._commands.put((fn, fut))
        self._wakeup.set()
        return fut.result()

    def _resolve(self, model_id: str, app: str | None) -> WorkflowModel:
        candidates = [self.apps[app]] if app in self.apps else list(self.apps.values())
        for dep in candidates:
            if model_id in dep.application.workflows:
                return dep.application.workflows[model_id]
        raise UnknownModel(f"workflow {model_id} is not deployed")

    def _root_of(self, app: str | None) -> Path | None:
        dep = self.apps.get(app) if app else None
        return dep.root if dep else None

    def _gateway_event(self, message_id: str, step: str, outcome: str = "ok", **extra: Any) -> None:
        entry = {"ts": self.clock.now(), "msg": message_id, "step": step, "outcome": outcome, **extra}
        with self._log_lock:
            self.gateway_log.append(entry)
            if self.state_dir is not None:
                with open(self.state_dir / "gateway.log", "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def steps_of(self, message_id: str) -> list[dict[str, Any]]:
        return [e for e in self.gateway_log if e["msg"] == message_id]

    # -- deployment -------------------------------------------------------

    def _app_dir(self, name: str) -> Path:
        if self.state_dir is None:
            return Path(tempfile.mkdtemp(prefix="duorch-app-")) / name
        return self.state_dir / "apps" / name

    def _register(self, root: Path, sha: str) -> DeployedApp:
        application = load_application(root)
        name = application.manifest.name
        lifecycle = application.manifest.lifecycle or self.policy.lifecycle
        existing = self.apps.get(name)
        if existing is not None and existing.digest == sha:
            return existing
        env_dir = self.state_dir / "environments" / name if self.state_dir else None
        prov = Provisioner(application.topology, self.registry, env_dir, name, retries=self.installer_retries,
                           clock=self.clock)
        dep = DeployedApp(name, sha, root, application, prov, lifecycle, self.policy.lazy_for(lifecycle))
        self.apps[name] = dep
        self._directives = {k: v for k, v in self._directives.items() if k[0] != name}
        if self.state_dir is not None:
            (root / ".deployment.json").write_text(json.dumps({"name": name, "digest": sha, "lifecycle": lifecycle}))
        return dep

    def deploy(self, archive: bytes, *, message_id: str | None = None) -> DeployedApp:
        """Validate, store, unpack and provision an archive without running it."""
        return self.call(lambda: self._deploy(archive, message_id or uuid.uuid4().hex))

    def _deploy(self, archive: bytes, message_id: str, run_holder: str | None = None,
                params: Mapping[str, Any] | None = None) -> DeployedApp:
        diags = validate_archive(archive)
        if diags:
            raise GatewayError("invalid_archive", "; ".join(f"{d.code}: {d.message}" for d in diags))
        sha = digest(archive)
        # step 1: keep the archive so a failed deployment can be retried from it
        stored = self._store(message_id, archive, params)
        self._gateway_event(message_id, "store")
        # step 2
        name = json.loads(_manifest_bytes(archive))["name"]
        existing = self.apps.get(name)
        if existing is not None and existing.digest == sha:
            dep = existing
            self._gateway_event(message_id, "unpack", app=name, reused=True)
        else:
            root = self._app_dir(name)
            if root.exists():
                shutil.rmtree(root)
            unpack(archive, root)
            dep = self._register(root, sha)
            self._gateway_event(message_id, "unpack", app=name)
        # step 3: plan, and install unless fragments are provisioned on demand
        holder = dep.holder if dep.lifecycle == "keep_alive" else (run_holder or dep.holder)
        attempt = 1
        while True:
            # every attempt re-reads the topology from the stored copy, never from the caller
            deployment = plan(parse_topology(_member(stored(), dep.application.manifest.topology)))
            prov = dep.provisioner
            if dep.lazy:
                self._gateway_event(message_id, "provision", attempt=attempt, mode="plan", stages=len(deployment.stages))
                break
            state = prov.provision(deployment, holder=holder)
            if state.ok and prov.is_installed(deployment.nodes):
                self._gateway_event(message_id, "provision", attempt=attempt, mode="install",
                                    stages=len(deployment.stages))
                break
            detail = "; ".join(f"{n}: {e}" for n, e in sorted(state.errors.items())) or "installation incomplete"
            if attempt > self.deploy_retries:
                self._gateway_event(message_id, "provision", "failed", attempt=attempt, error=detail)
                self._drop_stored(message_id)
                raise GatewayError("provisioning_failed", detail)
            self._gateway_event(message_id, "provision", "retry", attempt=attempt, error=detail)
            attempt += 1
        self._gateway_event(message_id, "env_ready", app=name)
        return dep

    def _store(self, message_id: str, archive: bytes, params: Mapping[str, Any] | None) -> Callable[[], bytes]:
        """Persist the archive (and the run parameters) in the inbox; returns a loader for the stored copy."""
        if self.state_dir is None:
            return lambda: archive
        path = self.state_dir / "inbox" / f"{message_id}.qaa"
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(archive)
        tmp.replace(path)
        if params is not None:
            path.with_suffix(".json").write_text(json.dumps({"params": dict(params)}, sort_keys=True))
        return path.read_bytes

    def _drop_stored(self, message_id: str) -> None:
        if self.state_dir is not None:
            for suffix in (".qaa", ".json"):
                (self.state_dir / "inbox" / f"{message_id}{suffix}").unlink(missing_ok=True)

    # -- RUN / RUN_ARCHIVE ------------------------------------------------

    def run_archive(self, archive: bytes, params: Mapping[str, Any] | None = None, *,
                    message_id: str | None = None) -> RunHandle:
        message_id = message_id or uuid.uuid4().hex
        return self.call(lambda: self._run_archive(archive, dict(params or {}), message_id))

    def _run_archive(self, archive: bytes, params: dict[str, Any], message_id: str) -> RunHandle:
        holder = f"run:{message_id}"
        try:
            dep = self._deploy(archive, message_id, run_holder=holder, params=params)
        except GatewayError:
            self._drop_stored(message_id)
            raise
        return self._start_run(dep, dep.application.manifest.entry_workflow, params, message_id)

    def run(self, workflow: str, params: Mapping[str, Any] | None = None, *, message_id: str | None = None) -> RunHandle:
        message_id = message_id or uuid.uuid4().hex
        return self.call(lambda: self._run(workflow, dict(params or {}), message_id))

    def _run(self, workflow: str, params: dict[str, Any], message_id: str) -> RunHandle:
        if not workflow:
            raise GatewayError("bad_params", "RUN needs a workflow name")
        for dep in reversed(list(self.apps.values())):
            if workflow in dep.application.workflows:
                return self._start_run(dep, workflow, params, message_id)
        raise GatewayError("not_deployed", f"workflow {workflow} is not deployed")

    def _start_run(self, dep: DeployedApp, workflow: str, params: dict[str, Any], message_id: str) -> RunHandle:
        holder = dep.holder if dep.lifecycle == "keep_alive" else f"run:{message_id}"
        if dep.lifecycle == "per_run" and not dep.lazy:
            state = dep.provisioner.provision(holder=holder)
            if not state.ok:
                dep.provisioner.deprovision("all", holder=holder)
                raise GatewayError("provisioning_failed", "; ".join(f"{n}: {e}" for n, e in sorted(state.errors.items())))
        try:
            inst = self.engine.instantiate(workflow, params, app=dep.name)
        except EngineError as exc:
            if dep.lifecycle == "per_run":
                dep.provisioner.deprovision("all", holder=holder)
            self._drop_stored(message_id)
            raise GatewayError(getattr(exc, "code", "bad_params"), str(exc)) from None
        self._gateway_event(message_id, "instantiate", instance=inst.instance_id, workflow=workflow)
        handle = RunHandle(message_id, dep.name, inst.instance_id, holder, self)
        self.runs[inst.instance_id] = handle
        self._save_run(handle)
        # step 6: the driver dispatches the first activities on its next pass
        self._gateway_event(message_id, "execute", instance=inst.instance_id)
        self._wakeup.set()
        return handle

    def _save_run(self, handle: RunHandle) -> None:
        if self.state_dir is not None:
            doc = {"message": handle.message_id, "app": handle.app, "instance": handle.instance_id, "holder": handle.holder}
            (self.state_dir / "runs" / f"{handle.instance_id}.json").write_text(json.dumps(doc, sort_keys=True))

    # -- queries ----------------------------------------------------------

    def status(self, instance_id: str) -> dict[str, Any]:
        return self.call(lambda: self._status(instance_id))

    def _status(self, instance_id: str) -> dict[str, Any]:
        state = self.engine.lookup(instance_id)
        if state is None:
            raise GatewayError("unknown_instance", f"no instance {instance_id}")
        if state == "archived":
            rec = self.engine.audit.get(instance_id)
            return {"instance": instance_id, "status": rec.status if rec else "archived", "archived": True,
                    "variables": rec.variables if rec else {}}
        inst = self.engine.instance(instance_id)
        return {"instance": instance_id, "status": inst.status.value, "archived": False,
                "activities": {a: s.value for a, s in inst.activity_states.items()}, "variables": dict(inst.variables)}

    def audit(self, model: str | None = None, instance: str | None = None) -> list[AuditRecord]:
        return self.call(lambda: self.engine.query_audit(model=model, instance=instance))

    def installed_nodes(self, app: str) -> frozenset[str]:
        return self.apps[app].provisioner.state.installed

    # -- dispatch ---------------------------------------------------------

    def _root_instance(self, inst: WorkflowInstance) -> str:
        seen = set()
        while inst.parent and inst.instance_id not in seen:
            seen.add(inst.instance_id)
            parent_id = inst.parent["instance"]
            try:
                inst = self.engine.instance(parent_id)
            except NoCorrelation:
                return inst.parent.get("root", parent_id)
        return inst.instance_id

    def _holder_for(self, instance_id: str, dep: DeployedApp) -> str:
        if dep.lifecycle == "keep_alive":
            return dep.holder
        root = self._root_instance(self.engine.instance(instance_id))
        run = self.runs.get(root)
        return run.holder if run else f"run:{root}"

    def _guard(self, req: DispatchRequest) -> bool:
        if req.binding.kind is BindingKind.SUBWORKFLOW:
            return True
        dep = self.apps.get(req.app)
        if dep is None:
            return False
        return dep.provisioner.is_installed(dep.fragment(req.model_id, req.key.activity_id).node_ids)

    def _dispatch(self, req: DispatchRequest) -> None:
        self._dispatch_seq[req.key] = next(self._seq)
        if req.binding.kind is not BindingKind.SUBWORKFLOW:
            dep = self.apps.get(req.app)
            if dep is not None and dep.lazy:
                frag = dep.fragment(req.model_id, req.key.activity_id)
                dep.provisioner.provision_fragment(frag, holder=self._holder_for(req.key.instance_id, dep))
        try:
            fut = self.dispatcher.dispatch(req)
        except (DispatchError, QpuError, OSError, ValueError) as exc:
            logger.warning("dispatch of %s failed: %s", req.key.activity_id, exc)
            self.engine.fail_activity(req.key, f"dispatch failed: {exc}")
            return
        if isinstance(fut, Future):
            self._inflight.append(fut)

    def _deliver(self, key: CorrelationKey, outputs: dict[str, Any] | None, error: str | None) -> None:
        self._inbox.put((key, outputs, error))
        self._wakeup.set()

    def _start_child(self, req: DispatchRequest, deliver) -> None:
        parent = self.engine.instance(req.key.instance_id)
        for inst in self.engine.instances():
            p = inst.parent or {}
            if p.get("instance") == parent.instance_id and p.get("activity") == req.key.activity_id and not inst.terminal:
                # recovered run: the child is still going and will report to the current token
                return None
        link = {"instance": parent.instance_id, "activity": req.key.activity_id, "token": req.key.token,
                "root": self._root_instance(parent)}
        try:
            self.engine.instantiate(req.binding.target, req.inputs, app=req.app, parent=link)
        except EngineError as exc:
            raise DispatchError(f"sub-workflow {req.binding.target}: {exc}") from None
        return None

    # -- QPU --------------------------------------------------------------

    def _directives_for(self, app: str | None, model_id: str) -> list[ReservationDirective]:
        key = (app, model_id)
        if key not in self._directives:
            self._directives[key] = decide_reservation(self._resolve(model_id, app), self.policy)
        return self._directives[key]

    def _decide(self, event: str, instance_id: str, loop: int, **extra: Any) -> None:
        entry = {"t": self.clock.now(), "event": event, "instance": instance_id, "loop": loop, **extra}
        self.decisions.append(entry)
        logger.info("reservation %s for %s loop %d", event, instance_id, loop)

    def _session_for(self, req: DispatchRequest) -> QpuSession | None:
        iid = req.key.instance_id
        for idx, d in enumerate(self._directives_for(req.app, req.model_id)):
            if req.key.activity_id not in d.open_on:
                continue
            k = (iid, idx)
            if k in self._sessions:
                return self._sessions[k]
            if k in self._fallback:
                return None
            try:
                session = self.qpu.open_session(iid)
            except SessionDenied as exc:
                self._fallback.add(k)
                self._decide("fallback_shared", iid, idx, reason=str(exc))
                return None
            self._sessions[k] = session
            self._decide("session_open", iid, idx, session=session.session_id)
            return session
        return None

    def _submit_qpu(self, req: DispatchRequest, deliver) -> None:
        target = req.binding.target
        descriptor: dict[str, Any] = {"name": target}
        dep = self.apps.get(req.app)
        if dep is not None and (dep.root / target).is_file():
            descriptor = json.loads((dep.root / target).read_text())
        shots = int(req.inputs.get("shots") or descriptor.get("shots", 1024))
        payload = {"program": descriptor.get("name", target), "circuit": descriptor.get("circuit"),
                   "qubits": int(descriptor.get("qubits", 2)), "inputs": req.inputs}
        session = self._session_for(req)
        job = QpuJob(payload, shots, correlation=req.key, instance_id=req.key.instance_id,
                     session_id=session.session_id if session else None)
        self.qpu.submit(job)
        return None

    def _close_exited_sessions(self, inst: WorkflowInstance) -> None:
        iid = inst.instance_id
        keys = [k for k in list(self._sessions) + list(self._fallback) if k[0] == iid]
        if not keys:
            return
        dirs = self._directives_for(inst.app, inst.model_id)
        for k in keys:
            d = dirs[k[1]]
            exited = all(inst.edge_states[b] in (EdgeState.FIRED_FALSE, EdgeState.DEAD) for b in d.close_on)
            if inst.terminal or (exited and self.policy.reservation_scope == "loop"):
                if k in self._sessions:
                    session = self._sessions.pop(k)
                    self.qpu.close_session(session)
                    self._decide("session_close", iid, k[1], session=session.session_id)
                self._fallback.discard(k)

    def _qpu_done(self, completion: QpuCompletion) -> None:
        key = completion.correlation
        try:
            self.engine.complete_activity(key, completion.result)
        except NoCorrelation as exc:
            logger.warning("QPU result %s dropped: %s", completion.job_id, exc)

    # -- driver -----------------------------------------------------------

    def _run_commands(self) -> bool:
        ran = False
        while True:
            try:
                fn, fut = self._commands.get_nowait()
            except queue.Empty:
                return ran
            ran = True
            try:
                fut.set_result(fn())
            except BaseException as exc:
                fut.set_exception(exc)

    def _apply_inbox(self) -> bool:
        items = []
        while True:
            try:
                items.append(self._inbox.get_nowait())
            except queue.Empty:
                break
        items.sort(key=lambda it: self._dispatch_seq.get(it[0], 0))
        for key, outputs, error in items:
            self._dispatch_seq.pop(key, None)
            try:
                if error is None:
                    self.engine.complete_activity(key, outputs)
                else:
                    self.engine.fail_activity(key, error)
            except NoCorrelation as exc:
                logger.warning("completion dropped: %s", exc)
        return bool(items)

    def _step_all(self) -> bool:
        progressed = False
        for inst in self.engine.instances():
            if inst.terminal:
                continue
            before = inst.last_seq
            for req in self.engine.step(inst.instance_id):
                self._dispatch(req)
            self._close_exited_sessions(inst)
            progressed |= inst.last_seq != before
        return progressed

    def _finish_terminal(self) -> bool:
        progressed = False
        for inst in self.engine.instances():
            if not inst.terminal or inst.instance_id in self._handled:
                continue
            self._handled.add(inst.instance_id)
            progressed = True
            self._close_exited_sessions(inst)
            if inst.parent:
                self._report_to_parent(inst)
            self.engine.archive_to_audit(inst.instance_id)
            run = self.runs.get(inst.instance_id)
            if run is not None:
                self._finish_run(run, inst)
        return progressed

    def _report_to_parent(self, child: WorkflowInstance) -> None:
        link = child.parent
        try:
            parent = self.engine.instance(link["instance"])
        except NoCorrelation:
            logger.warning("parent %s of %s is gone", link["instance"], child.instance_id)
            return
        token = parent.token_for(link["activity"])
        if token is None:
            logger.warning("parent %s no longer waits for %s", parent.instance_id, link["activity"])
            return
        key = CorrelationKey(parent.instance_id, link["activity"], token)
        if child.status is InstanceStatus.COMPLETED:
            self.engine.complete_activity(key, dict(child.variables))
        else:
            reason = "; ".join(child.errors) or child.status.value
            self.engine.fail_activity(key, f"sub-workflow {child.model_id} {child.status.value}: {reason}")

    def _finish_run(self, run: RunHandle, inst: WorkflowInstance) -> None:
        dep = self.apps.get(run.app)
        if dep is not None and dep.lifecycle == "per_run":
            dep.provisioner.deprovision("all", holder=run.holder)
        self._drop_stored(run.message_id)
        if self.state_dir is not None:
            (self.state_dir / "runs" / f"{inst.instance_id}.json").unlink(missing_ok=True)
        result = {"instance": inst.instance_id, "status": inst.status.value, "variables": dict(inst.variables),
                  "errors": list(inst.errors)}
        if not run.future.done():
            run.future.set_result(result)

    def pump(self) -> bool:
        """One pass of the driver loop; False once nothing is left to do right now."""
        progressed = self._run_commands()
        progressed |= self._apply_inbox()
        progressed |= self._step_all()
        progressed |= self._finish_terminal()
        if progressed:
            return True
        if self._inflight:
            wait(self._inflight)
            self._inflight = [f for f in self._inflight if not f.done()]
            return True
        t = self.qpu.next_event_time()
        if t is not None:
            if self.clock.simulated:
                done = self.qpu.run_until(t)
            else:
                if self.clock.now() < t:
                    return False
                done = self.qpu.poll()
            for completion in done:
                self._qpu_done(completion)
            return True
        if self.qpu.pending():
            # only parked shared jobs remain behind a session nobody will close
            for k, session in sorted(self._sessions.items()):
                logger.warning("closing idle session %s held by %s", session.session_id, k[0])
                self.qpu.close_session(session)
                self._decide("session_close", k[0], k[1], session=session.session_id, forced=True)
            self._sessions.clear()
            return True
        return False

    def run_until_idle(self, max_passes: int = 1_000_000) -> None:
        if self.threaded and threading.current_thread() is not self._driver:
            raise RuntimeError("run_until_idle is for the unthreaded runtime; the driver thread is running")
        for _ in range(max_passes):
            if not self.pump():
                if self.clock.simulated or not self.qpu.pending():
                    return
                time.sleep(max(0.0, min(0.05, (self.qpu.next_event_time() or 0) - self.clock.now()) / 1000.0))
        raise RuntimeError("runtime did not become idle")

    def start(self) -> None:
        if self.threaded:
            return
        self._stop.clear()
        self._driver = threading.Thread(target=self._drive, name="duorch-driver", daemon=True)
        self._driver.start()

    def _drive(self) -> None:
        while not self._stop.is_set():
            try:
                busy = self.pump()
            except Exception:
                logger.exception("driver pass failed")
                busy = False
            if not busy:
                self._wakeup.wait(0.02)
                self._wakeup.clear()

    def stop(self) -> None:
        self._stop.set()
        self._wakeup.set()
        if self._driver is not None:
            self._driver.join(timeout=5)
        self._driver = None
        self.inproc.shutdown()
        self.procs.shutdown()

    # -- restart ----------------------------------------------------------

    def recover(self) -> list[str]:
        """Reload deployed apps, resume logged instances and restart stored deployments."""
        return self.call(self._recover)

    def _recover(self) -> list[str]:
        if self.state_dir is None:
            return []
        for meta in sorted((self.state_dir / "apps").glob("*/.deployment.json")):
            doc = json.loads(meta.read_text())
            try:
                self._register(meta.parent, doc["digest"])
            except ArchiveError as exc:
                logger.warning("cannot reload app %s: %s", meta.parent.name, exc)
        for f in sorted((self.state_dir / "runs").glob("*.json")):
            doc = json.loads(f.read_text())
            self.runs[doc["instance"]] = RunHandle(doc["message"], doc["app"], doc["instance"], doc["holder"], self)
        resumed = [inst.instance_id for inst in self.engine.recover()]
        started = {h.message_id for h in self.runs.values()}
        for qaa in sorted((self.state_dir / "inbox").glob("*.qaa")):
            msg = qaa.stem
            if msg in started:
                continue
            meta = qaa.with_suffix(".json")
            params = json.loads(meta.read_text())["params"] if meta.exists() else {}
            try:
                handle = self._run_archive(qaa.read_bytes(), params, msg)
                resumed.append(handle.instance_id)
            except GatewayError as exc:
                logger.warning("stored message %s could not be resumed: %s", msg, exc)
        return resumed


def _manifest_bytes(archive: bytes) -> bytes:
    return _member(archive, "manifest.json")


def _member(archive: bytes, name: str) -> bytes:
    with zipfile.ZipFile(io.BytesIO(archive)) as zf:
        return zf.read(name)
