from .audit import AuditRecord, AuditStore
from .engine import (
    CorrelationKey,
    DispatchRequest,
    Engine,
    EngineError,
    MissingParameter,
    NoCorrelation,
    UnknownModel,
)
from .events import CorruptLog, EventKind, EventStore, InstanceEvent
from .executors import (
    Dispatcher,
    DispatchError,
    FragmentNotProvisioned,
    InProcessExecutor,
    NoExecutor,
    ProcessExecutor,
)
from .instance import ActivityState, EdgeState, InstanceStatus, WorkflowInstance, apply, replay
