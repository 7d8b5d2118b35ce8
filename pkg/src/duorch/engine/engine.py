"""The workflow engine: navigation, correlation, compensation and recovery."""

from __future__ import annotations

import itertools
import logging
import threading
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from ..model.conditions import ConditionEvalError, eval_condition, variables_of
from ..model.workflow import ActivityKind, UnitOfWork, WorkflowModel
from ..qpusim import Clock
from .audit import AuditRecord, AuditStore, build_record
from .events import CorruptLog, EventKind, EventStore, InstanceEvent
from .instance import ActivityState, EdgeState, InstanceStatus, WorkflowInstance, apply

logger = logging.getLogger(__name__)

__all__ = [
    "CorrelationKey",
    "DispatchRequest",
    "Engine",
    "EngineError",
    "MissingParameter",
    "UnknownModel",
    "NoCorrelation",
    "ModelResolver",
]


class EngineError(Exception):
    code = "engine_error"


class MissingParameter(EngineError):
    code = "bad_params"


class UnknownModel(EngineError):
    code = "not_deployed"


class NoCorrelation(EngineError):
    code = "no_correlation"


@dataclass(frozen=True)
class CorrelationKey:
    instance_id: str
    activity_id: str
    token: str


@dataclass(frozen=True)
class DispatchRequest:
    key: CorrelationKey
    model_id: str
    activity: Any
    inputs: dict[str, Any]
    app: str | None = None
    compensates: str | None = None
    attempt: int = 1

    @property
    def binding(self):
        return self.activity.implementation


ModelResolver = Callable[[str, "str | None"], WorkflowModel]


def _resolver(models) -> ModelResolver:
    if callable(models):
        return models
    table: dict[str, WorkflowModel] = {}
    for m in models.values() if isinstance(models, Mapping) else models:
        table[m.id] = m

    def resolve(model_id: str, app: str | None = None) -> WorkflowModel:
        try:
            return table[model_id]
        except KeyError:
            raise UnknownModel(f"model {model_id} not found") from None

    return resolve


@dataclass
class _Live:
    inst: WorkflowInstance
    model: WorkflowModel
    redispatch: set[str] = field(default_factory=set)


class Engine:
    """Drives workflow instances through their models.

    Every state change is first appended to the event store and only then
    applied in memory (and only then made visible as a dispatch request).
    Navigation of one instance is serialised by the engine lock.
    """

    def __init__(
        self,
        models: ModelResolver | Mapping[str, WorkflowModel] | Iterable[WorkflowModel],
        store: EventStore | None = None,
        audit: AuditStore | None = None,
        *,
        clock: Clock | None = None,
        max_iterations: int = 1000,
        auto_archive: bool = True,
        id_factory: Callable[[], str] | None = None,
        token_factory: Callable[[], str] | None = None,
    ):
        self.resolve = _resolver(models)
        self.store = store or EventStore()
        self.audit = audit or AuditStore()
        self.clock = clock or Clock()
        self.max_iterations = max_iterations
        self.auto_archive = auto_archive
        self._new_id = id_factory or (lambda: uuid.uuid4().hex[:12])
        counter = itertools.count(1)
        self._new_token = token_factory or (lambda: f"{uuid.uuid4().hex[:8]}-{next(counter)}")
        self._live: dict[str, _Live] = {}
        self._archived: set[str] = set()
        self.pending_archival: set[str] = set()
        self.quarantined: dict[str, str] = {}
        self.warnings: list[str] = []
        self._lock = threading.RLock()

    # -- persistence ------------------------------------------------------

    def _emit(self, live: _Live | None, instance_id: str, kind: EventKind, payload: dict[str, Any], model=None) -> InstanceEvent:
        seq = live.inst.last_seq + 1 if live else 1
        event = InstanceEvent(seq, instance_id, self.clock.now(), kind, payload)
        self.store.append(event)
        if live is None:
            return event
        apply(live.inst, event, live.model)
        return event

    def _get(self, instance_id: str) -> _Live:
        try:
            return self._live[instance_id]
        except KeyError:
            raise NoCorrelation(f"no live instance {instance_id}") from None

    def instance(self, instance_id: str) -> WorkflowInstance:
        return self._get(instance_id).inst

    def model_of(self, instance_id: str) -> WorkflowModel:
        return self._get(instance_id).model

    def instances(self) -> list[WorkflowInstance]:
        with self._lock:
            return [lv.inst for lv in self._live.values()]

    def lookup(self, instance_id: str) -> str | None:
        """``"running"``/terminal status for live instances, ``"archived"`` once moved."""
        with self._lock:
            if instance_id in self._live:
                return self._live[instance_id].inst.status.value
            if instance_id in self._archived or self.audit.get(instance_id) is not None:
                return "archived"
            return None

    # -- instantiate ------------------------------------------------------

    def instantiate(self, model: WorkflowModel | str, params: Mapping[str, Any] | None = None, *,
                    app: str | None = None, parent: Mapping[str, Any] | None = None,
                    instance_id: str | None = None) -> WorkflowInstance:
        if isinstance(model, str):
            model = self.resolve(model, app)
        params = dict(params or {})
        declared = {p.name for p in model.params}
        for p in model.params:
            if p.name not in params:
                if p.required:
                    raise MissingParameter(f"missing parameter {p.name}")
                params[p.name] = p.default
        unknown = sorted(set(params) - declared)
        if unknown and declared:
            raise MissingParameter(f"unknown parameter {', '.join(unknown)}")
        with self._lock:
            iid = instance_id or self._new_id()
            payload = {"model_id": model.id, "params": params}
            if app:
                payload["app"] = app
            if parent:
                payload["parent"] = dict(parent)
            event = self._emit(None, iid, EventKind.INSTANTIATED, payload)
            live = _Live(apply(None, event, model), model)
            self._live[iid] = live
            return live.inst

    # -- navigation -------------------------------------------------------

    def _dispatch(self, live: _Live, activity_id: str, compensates: str | None = None, attempt: int = 1) -> DispatchRequest:
        activity = live.model.activity(activity_id)
        inputs = activity.inputs_from(live.inst.variables)
        token = self._new_token()
        payload = {"activity": activity_id, "token": token, "inputs": inputs}
        if compensates:
            payload["compensates"] = compensates
        if attempt > 1:
            payload["attempt"] = attempt
        self._emit(live, live.inst.instance_id, EventKind.ACTIVITY_STARTED, payload)
        return DispatchRequest(
            CorrelationKey(live.inst.instance_id, activity_id, token),
            live.model.id,
            activity,
            inputs,
            live.inst.app,
            compensates,
            attempt,
        )

    def _fail_instance(self, live: _Live, reasons: list[str]) -> None:
        self._emit(live, live.inst.instance_id, EventKind.INSTANCE_FAILED, {"reasons": reasons})
        self._finished(live)

    def _evaluate_edges(self, live: _Live, source: str) -> None:
        inst, model = live.inst, live.model
        out = model.outgoing(source)
        loops = [i for i in out if model.edges[i].loop_back]
        results: dict[str, str] = {}
        values: dict[str, Any] = {}
        for i in loops + [i for i in out if not model.edges[i].loop_back]:
            e = model.edges[i]
            if not e.loop_back and any(results.get(str(j)) == EdgeState.FIRED_TRUE.value for j in loops):
                # the loop continues; exits are decided on the final iteration
                continue
            for name in variables_of(e.condition):
                if name in inst.variables:
                    values[name] = inst.variables[name]
            ok = eval_condition(e.condition, inst.variables)
            if ok and e.loop_back and inst.loop_iteration_counts.get(e.target, 0) + 1 >= self.max_iterations:
                raise ConditionEvalError(f"loop at {e.target} exceeded max_iterations={self.max_iterations}")
            results[str(i)] = (EdgeState.FIRED_TRUE if ok else EdgeState.FIRED_FALSE).value
        payload: dict[str, Any] = {"source": source, "edges": results}
        if values:
            payload["values"] = values
        self._emit(live, inst.instance_id, EventKind.EDGE_FIRED, payload)

    def step(self, instance_id: str) -> list[DispatchRequest]:
        """Advance one instance as far as possible and return the work to dispatch."""
        with self._lock:
            live = self._live.get(instance_id)
            if live is None or live.inst.terminal:
                return []
            inst, model = live.inst, live.model
            requests: list[DispatchRequest] = []

            if inst.compensation is not None:
                comp = inst.compensation
                if comp.current is not None:
                    member, comp_act = comp.current
                    if comp_act in live.redispatch:
                        live.redispatch.discard(comp_act)
                        requests.append(self._dispatch(live, comp_act, compensates=member, attempt=2))
                    return requests
                if comp.queue:
                    member, comp_act = comp.queue[0]
                    requests.append(self._dispatch(live, comp_act, compensates=member))
                    return requests
                self._emit(live, instance_id, EventKind.COMPENSATION_DONE, {"unit": comp.unit})
                self._finished(live)
                return requests

            for act in sorted(live.redispatch):
                if inst.activity_states.get(act) is ActivityState.RUNNING:
                    requests.append(self._dispatch(live, act, attempt=2))
            live.redispatch.clear()

            navigable = model.navigable
            try:
                changed = True
                while changed:
                    changed = False
                    while inst.pending_navigation:
                        self._evaluate_edges(live, inst.pending_navigation[0])
                        changed = True
                    for a in navigable:
                        if inst.activity_states[a] is not ActivityState.INACTIVE or a in model.start_activities:
                            continue
                        incoming = [i for i in model.incoming(a) if not model.edges[i].loop_back]
                        if not incoming:
                            continue
                        states = [inst.edge_states[i] for i in incoming]
                        if any(s is EdgeState.UNEVALUATED for s in states):
                            continue
                        if any(s is EdgeState.FIRED_TRUE for s in states):
                            self._emit(live, instance_id, EventKind.ACTIVITY_READY, {"activity": a})
                        else:
                            dead = {str(i): EdgeState.DEAD.value for i in model.outgoing(a)}
                            self._emit(live, instance_id, EventKind.EDGE_FIRED, {"source": a, "skipped": True, "edges": dead})
                        changed = True
            except ConditionEvalError as exc:
                self._fail_instance(live, [f"condition evaluation failed: {exc}"])
                return requests

            for a in navigable:
                if inst.activity_states[a] is ActivityState.READY:
                    requests.append(self._dispatch(live, a))

            busy = inst.states(ActivityState.READY, ActivityState.RUNNING)
            if not busy and not inst.pending_navigation and not requests:
                self._emit(live, instance_id, EventKind.INSTANCE_COMPLETED, {"variables": dict(inst.variables)})
                self._finished(live)
            return requests

    # -- completions ------------------------------------------------------

    def _correlate(self, key: CorrelationKey) -> _Live | None:
        live = self._live.get(key.instance_id)
        if live is None:
            if key.instance_id in self._archived:
                self._warn(f"late completion for archived instance {key.instance_id} ignored")
                return None
            raise NoCorrelation(f"no correlation for {key.instance_id}/{key.activity_id}/{key.token}")
        if key.token in live.inst.tokens and live.inst.tokens[key.token] == key.activity_id:
            return live
        if key.token in live.inst.issued_tokens:
            self._warn(f"duplicate or stale completion {key.token} for {key.activity_id} ignored")
            return None
        raise NoCorrelation(f"no correlation for {key.instance_id}/{key.activity_id}/{key.token}")

    def _warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def complete_activity(self, key: CorrelationKey, outputs: Mapping[str, Any] | None = None) -> bool:
        """Record a completion; returns False when it was a duplicate and got ignored."""
        with self._lock:
            live = self._correlate(key)
            if live is None:
                return False
            outputs = dict(outputs or {})
            activity = live.model.activity(key.activity_id)
            self._emit(
                live,
                key.instance_id,
                EventKind.ACTIVITY_COMPLETED,
                {"activity": key.activity_id, "token": key.token, "outputs": outputs,
                 "variables": activity.variables_from(outputs)},
            )
            return True

    def fail_activity(self, key: CorrelationKey, reason: str) -> bool:
        with self._lock:
            live = self._correlate(key)
            if live is None:
                return False
            inst, model = live.inst, live.model
            comp = inst.compensation
            self._emit(live, key.instance_id, EventKind.ACTIVITY_FAILED,
                       {"activity": key.activity_id, "token": key.token, "reason": str(reason)})
            if comp is not None:
                self._fail_instance(live, [f"{comp.failed_activity}: {comp.reason}",
                                           f"compensator {key.activity_id}: {reason}"])
                return True
            unit = model.unit_of(key.activity_id)
            if unit is None:
                self._fail_instance(live, [f"{key.activity_id}: {reason}"])
            else:
                self.compensate(key.instance_id, unit, failed=key.activity_id, reason=str(reason))
            return True

    def compensate(self, instance_id: str, unit: UnitOfWork | str, *, failed: str = "", reason: str = "") -> None:
        """Start undoing ``unit``: compensators of its completed members, newest first."""
        with self._lock:
            live = self._get(instance_id)
            model = live.model
            if isinstance(unit, str):
                unit = next(u for u in model.units_of_work if u.id == unit)
            order, skipped, seen = [], [], set()
            for member in reversed(live.inst.completion_order):
                if member not in unit.members or member in seen:
                    continue
                seen.add(member)
                comp = model.activity(member).compensator
                if comp:
                    order.append([member, comp])
                else:
                    skipped.append(member)
            self._emit(live, instance_id, EventKind.COMPENSATION_STARTED,
                       {"unit": unit.id, "failed": failed, "reason": reason, "order": order, "skipped": skipped})

    # -- lifecycle --------------------------------------------------------

    def _finished(self, live: _Live) -> None:
        if self.auto_archive:
            self.archive_to_audit(live.inst.instance_id)

    def archive_to_audit(self, instance_id: str) -> AuditRecord | None:
        """Move a finished instance from the runtime store to the audit trail."""
        with self._lock:
            live = self._get(instance_id)
            if not live.inst.terminal:
                raise EngineError(f"instance {instance_id} is still {live.inst.status.value}")
            events = self.store.read(instance_id)
            record = build_record(events, dict(live.inst.variables), live.inst.status.value, live.model)
            try:
                self.audit.write(record)
            except OSError as exc:
                self._warn(f"audit write for {instance_id} failed ({exc}); will retry")
                self.pending_archival.add(instance_id)
                return None
            self.pending_archival.discard(instance_id)
            self.store.remove(instance_id)
            del self._live[instance_id]
            self._archived.add(instance_id)
            return record

    def retry_archival(self) -> list[AuditRecord]:
        done = []
        for iid in sorted(self.pending_archival):
            rec = self.archive_to_audit(iid)
            if rec is not None:
                done.append(rec)
        return done

    def query_audit(self, model: str | None = None, instance: str | None = None,
                    since: float | None = None, until: float | None = None) -> list[AuditRecord]:
        return self.audit.query(model=model, instance=instance, since=since, until=until)

    def recover(self) -> list[WorkflowInstance]:
        """Rebuild every instance in the store by replay.

        Activities that were started without a recorded outcome are queued for
        re-dispatch on the next :meth:`step`. Unreadable logs are quarantined.
        """
        recovered = []
        with self._lock:
            for iid in self.store.instance_ids():
                if iid in self._live:
                    continue
                try:
                    events = self.store.read(iid)
                    if not events or events[0].kind is not EventKind.INSTANTIATED:
                        raise CorruptLog(iid, "log does not start with instantiated")
                    head = events[0].payload
                    model = self.resolve(head["model_id"], head.get("app"))
                    inst = None
                    for ev in events:
                        inst = apply(inst, ev, model)
                except (CorruptLog, KeyError, ValueError, UnknownModel) as exc:
                    self._warn(f"quarantining {iid}: {exc}")
                    self.quarantined[iid] = str(exc)
                    self.store.quarantine(iid, str(exc))
                    continue
                live = _Live(inst, model)
                live.redispatch = set(inst.tokens.values())
                self._live[iid] = live
                recovered.append(inst)
                if inst.terminal:
                    self._finished(live)
        return recovered
