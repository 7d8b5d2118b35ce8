"""Activity executors and the dispatcher that picks one per binding kind.

Executors never call back into the engine directly. They hand their outcome
to a ``deliver(key, outputs, error)`` callback, which the owner of the engine
drains on its own thread.
"""

from __future__ import annotations

import importlib.util
import inspect
import json
import logging
import shlex
import subprocess
import sys
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Mapping

from ..model.workflow import BindingKind
from .engine import CorrelationKey, DispatchRequest

logger = logging.getLogger(__name__)

__all__ = [
    "Deliver",
    "Dispatcher",
    "DispatchError",
    "NoExecutor",
    "FragmentNotProvisioned",
    "InProcessExecutor",
    "ProcessExecutor",
    "BUILTINS",
]

Deliver = Callable[[CorrelationKey, "dict[str, Any] | None", "str | None"], None]


class DispatchError(Exception):
    pass


class NoExecutor(DispatchError):
    pass


class FragmentNotProvisioned(DispatchError):
    """Dispatch attempted while part of the activity's topology fragment is missing."""


def _identity(inputs: dict[str, Any]) -> dict[str, Any]:
    return dict(inputs)


def _sort_lines(inputs: dict[str, Any]) -> dict[str, Any]:
    return {"text": "".join(sorted(str(inputs.get("text", "")).splitlines(keepends=True)))}


def _increment(inputs: dict[str, Any]) -> dict[str, Any]:
    return {k: v + 1 for k, v in inputs.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}


def _fail(inputs: dict[str, Any]) -> dict[str, Any]:
    raise RuntimeError(inputs.get("reason", "requested failure"))


BUILTINS: dict[str, Callable[..., dict[str, Any]]] = {
    "identity": _identity,
    "sort-lines": _sort_lines,
    "increment": _increment,
    "fail": _fail,
}


def _call(fn: Callable[..., Any], inputs: dict[str, Any], context: dict[str, Any]) -> dict[str, Any]:
    try:
        accepts_ctx = "ctx" in inspect.signature(fn).parameters
    except (TypeError, ValueError):
        accepts_ctx = False
    result = fn(inputs, ctx=context) if accepts_ctx else fn(inputs)
    if result is None:
        return {}
    if not isinstance(result, Mapping):
        raise TypeError(f"activity implementation returned {type(result).__name__}, expected a mapping")
    return dict(result)


class InProcessExecutor:
    """Runs Python callables on a thread pool.

    Targets are ``builtin:<name>``, a name registered with :meth:`register`,
    or ``<path>.py:<function>`` relative to the application root.
    """

    def __init__(self, roots: Callable[[str | None], Path | None] | None = None, *, workers: int = 8):
        self.functions: dict[str, Callable[..., Any]] = {f"builtin:{k}": v for k, v in BUILTINS.items()}
        self.roots = roots or (lambda app: None)
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="inproc")
        self._modules: dict[Path, Any] = {}
        self._lock = threading.Lock()

    def register(self, name: str, fn: Callable[..., Any]) -> None:
        self.functions[name] = fn

    def resolve(self, target: str, app: str | None) -> Callable[..., Any]:
        if target in self.functions:
            return self.functions[target]
        path, _, func = target.partition(":")
        if path.endswith(".py"):
            root = self.roots(app)
            if root is None:
                raise NoExecutor(f"no application root to load {path}")
            file = (root / path).resolve()
            with self._lock:
                module = self._modules.get(file)
                if module is None:
                    spec = importlib.util.spec_from_file_location(f"duorch_app_{file.stem}_{abs(hash(file))}", file)
                    if spec is None or spec.loader is None:
                        raise NoExecutor(f"cannot load {file}")
                    module = importlib.util.module_from_spec(spec)
                    spec.loader.exec_module(module)
                    self._modules[file] = module
            return getattr(module, func or "run")
        raise NoExecutor(f"unknown in-process target {target!r}")

    def __call__(self, request: DispatchRequest, deliver: Deliver) -> Future:
        fn = self.resolve(request.binding.target, request.app)
        root = self.roots(request.app)
        ctx = {"root": root, "activity": request.key.activity_id, "instance": request.key.instance_id}

        def run():
            try:
                outputs = _call(fn, dict(request.inputs), ctx)
            except Exception as exc:  # activity code is arbitrary
                deliver(request.key, None, f"{type(exc).__name__}: {exc}")
            else:
                deliver(request.key, outputs, None)

        return self.pool.submit(run)

    def shutdown(self) -> None:
        self.pool.shutdown(wait=True)


class ProcessExecutor:
    """Runs a command, feeding the inputs as JSON on stdin and reading JSON outputs from stdout.

    The target is a command template; ``{python}`` expands to the current
    interpreter and ``{root}`` to the application root.
    """

    def __init__(self, roots: Callable[[str | None], Path | None] | None = None, *, workers: int = 4, timeout: float = 120.0):
        self.roots = roots or (lambda app: None)
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="procexec")
        self.timeout = timeout

    def command(self, request: DispatchRequest) -> list[str]:
        root = self.roots(request.app)
        text = request.binding.target.format(python=shlex.quote(sys.executable), root=shlex.quote(str(root or ".")))
        return shlex.split(text)

    def __call__(self, request: DispatchRequest, deliver: Deliver) -> Future:
        cmd = self.command(request)
        root = self.roots(request.app)

        def run():
            try:
                proc = subprocess.run(cmd, input=json.dumps(request.inputs), capture_output=True, text=True,
                                      timeout=self.timeout, cwd=str(root) if root else None)
                if proc.returncode != 0:
                    deliver(request.key, None, f"exit {proc.returncode}: {proc.stderr.strip()[-500:]}")
                    return
                out = proc.stdout.strip()
                deliver(request.key, json.loads(out) if out else {}, None)
            except Exception as exc:
                deliver(request.key, None, f"{type(exc).__name__}: {exc}")

        return self.pool.submit(run)

    def shutdown(self) -> None:
        self.pool.shutdown(wait=True)


class Dispatcher:
    """Routes each dispatch request to exactly one executor.

    ``guard`` is asked before every dispatch whether the activity's topology
    fragment is installed; a negative answer is an invariant violation and is
    counted in :attr:`violations`.
    """

    def __init__(self, deliver: Deliver, guard: Callable[[DispatchRequest], bool] | None = None):
        self.deliver = deliver
        self.guard = guard
        self.executors: dict[BindingKind, Callable[[DispatchRequest, Deliver], Any]] = {}
        self.violations = 0
        self.dispatched = 0
        self.log: list[CorrelationKey] = []

    def register(self, kind: BindingKind | str, executor: Callable[[DispatchRequest, Deliver], Any]) -> None:
        self.executors[BindingKind(kind)] = executor

    def dispatch(self, request: DispatchRequest) -> Any:
        if self.guard is not None and not self.guard(request):
            self.violations += 1
            raise FragmentNotProvisioned(
                f"{request.key.activity_id}: topology fragment of {request.binding.topology_node} is not provisioned"
            )
        executor = self.executors.get(request.binding.kind)
        if executor is None:
            raise NoExecutor(f"no executor for binding kind {request.binding.kind.value}")
        self.dispatched += 1
        self.log.append(request.key)
        return executor(request, self.deliver)
