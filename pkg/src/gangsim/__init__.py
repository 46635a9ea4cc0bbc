"""Deterministic simulation of gang-scheduled multi-tenant GPU clusters.

The pieces compose bottom-up: `cluster` models nodes and resources,
`workload` describes and generates jobs, `scheduling` places pods or
whole gangs, `kvstore` is the coordination store, `lifecycle` drives job
state and atomic deployment, `engine` ties everything into a
discrete-event simulation, `metrics` summarizes results and `replay`
holds the shipped reference experiments.
"""

from .cluster import (
    Cluster,
    ClusterError,
    GpuClassMismatch,
    InsufficientCapacity,
    Node,
    NodeStatus,
    NodeUnschedulable,
    PodPlacement,
    Reservation,
    ResourceVector,
    UnderflowRelease,
    UnknownNode,
)
from .engine import (
    BatchError,
    ConfigError,
    FaultPlan,
    SimInvariantError,
    SimParams,
    SimResult,
    Simulation,
    run,
    run_batch,
)
from .kvstore import (
    CoordinationStore,
    Lease,
    StoreError,
    UnknownLease,
    ValueTooLarge,
    Watch,
    WatchEvent,
)
from .lifecycle import (
    DeployOutcome,
    GuardianDeploy,
    IllegalTransition,
    JobRecord,
    JobStatus,
    ReplacementRequest,
    component_recovery_delay,
    controller_tick,
    guardian_deploy,
    handle_node_failure,
    take_checkpoint,
)
from .scenario import Scenario, expand_topology, load_scenario
from .scheduling import (
    Assignment,
    DeadlockReport,
    NoFeasibleAssignment,
    PodRequest,
    Policy,
    SchedulerConfig,
    SchedulerQueue,
    SchedulingError,
    Unschedulable,
    detect_deadlocks,
    dispatch,
    schedule_gang,
    schedule_pod,
)
from .workload import (
    Gang,
    JobSpec,
    ParseError,
    ValidationError,
    WorkloadError,
    generate_synthetic,
    load_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
