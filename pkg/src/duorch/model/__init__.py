from .conditions import (
    ConditionEvalError,
    ConditionSyntaxError,
    TypeMismatch,
    UnboundVariable,
    eval_condition,
    parse_condition,
)
from .diagnostics import Diagnostic, ModelError
from .topology import (
    Relation,
    TopologyEdge,
    TopologyFragment,
    TopologyModel,
    TopologyNode,
    fragment_for,
    fragment_of_node,
    parse_topology,
    serialize_topology,
    topology_from_dict,
    topology_to_dict,
    validate_topology,
)
from .workflow import (
    Activity,
    ActivityKind,
    BindingKind,
    ControlEdge,
    HybridLoop,
    ImplementationBinding,
    Param,
    UnitOfWork,
    WorkflowModel,
    detect_hybrid_loops,
    parse_workflow,
    serialize_workflow,
    validate_workflow,
    workflow_from_dict,
    workflow_to_dict,
)
