"""Job lifecycle: status machine, atomic deploys, recovery, checkpoints.

A job moves QUEUED -> DEPLOYING -> DOWNLOADING -> PROCESSING -> STORING
-> COMPLETED, may be halted and resumed by the user, and may fall back to
QUEUED or FAILED from any non-terminal state.  Deployment runs as a
five-step plan where every step has an exact inverse; a crash mid-plan
rolls the completed steps back and the whole deployment is retried a
bounded number of times before the job is marked FAILED.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .cluster import AllocationReceipt, Cluster, PodPlacement
from .kvstore import CoordinationStore
from .workload import JobSpec


class LifecycleError(Exception):
    pass


class IllegalTransition(LifecycleError):
    pass


class UnknownComponent(LifecycleError):
    pass


class JobStatus(Enum):
    QUEUED = "QUEUED"
    DEPLOYING = "DEPLOYING"
    DOWNLOADING = "DOWNLOADING"
    PROCESSING = "PROCESSING"
    STORING = "STORING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    HALTED = "HALTED"
    RESUMED = "RESUMED"


TERMINAL_STATUSES = frozenset({JobStatus.COMPLETED, JobStatus.FAILED})

_FORWARD = {
    JobStatus.QUEUED: {JobStatus.DEPLOYING},
    JobStatus.DEPLOYING: {JobStatus.DOWNLOADING},
    JobStatus.DOWNLOADING: {JobStatus.PROCESSING},
    JobStatus.PROCESSING: {JobStatus.STORING, JobStatus.HALTED},
    JobStatus.STORING: {JobStatus.COMPLETED},
    JobStatus.HALTED: {JobStatus.RESUMED},
    JobStatus.RESUMED: {JobStatus.PROCESSING},
    JobStatus.COMPLETED: set(),
    JobStatus.FAILED: set(),
}


def legal_transition(src: JobStatus, dst: JobStatus) -> bool:
    if src in TERMINAL_STATUSES:
        return False
    # every live state may fail or be pushed back into the queue
    if dst in (JobStatus.FAILED, JobStatus.QUEUED):
        return True
    return dst in _FORWARD[src]


# learner status values written to the coordination store
LEARNER_STARTING = b"STARTING"
LEARNER_DOWNLOADING = b"DOWNLOADING"
LEARNER_PROCESSING = b"PROCESSING"
LEARNER_STORING = b"STORING"
LEARNER_COMPLETED = b"COMPLETED"
LEARNER_FAILED = b"FAILED"


def job_prefix(job_id: str) -> str:
    return f"/jobs/{job_id}/"


def learner_key(job_id: str, index: int) -> str:
    return f"/jobs/{job_id}/learners/{index}/status"


# ---------------------------------------------------------------- records


@dataclass
class JobRecord:
    """Per-job bookkeeping shared by the engine, schedulers and metrics."""

    spec: JobSpec
    status: JobStatus = JobStatus.QUEUED
    status_history: list[tuple[float, JobStatus]] = field(default_factory=list)
    placements: dict[int, str] = field(default_factory=dict)  # learner -> node
    progress: float = 0.0
    last_checkpoint: float = 0.0
    deploy_attempts: int = 0
    restarts: int = 0
    lost_work_total: float = 0.0
    partial_since: float | None = None
    first_fully_placed_at: float | None = None
    completed_at: float | None = None

    def __post_init__(self):
        if not self.status_history:
            self.status_history = [(self.spec.submit_time, self.status)]

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    def transition(self, now: float, dst: JobStatus) -> bool:
        """Move to dst, appending history only on an actual change."""
        if dst is self.status:
            return False
        if not legal_transition(self.status, dst):
            raise IllegalTransition(f"{self.job_id}: {self.status.value} -> {dst.value}")
        self.status = dst
        self.status_history.append((now, dst))
        if dst in TERMINAL_STATUSES:
            self.completed_at = now
        return True

    def placed_count(self) -> int:
        return len(self.placements)

    def is_partially_placed(self) -> bool:
        return 0 < len(self.placements) < self.spec.learners

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        d.update(
            {
                "final_status": self.status.value,
                "status_history": [[t, s.value] for t, s in self.status_history],
                "progress": self.progress,
                "last_checkpoint": self.last_checkpoint,
                "deploy_attempts": self.deploy_attempts,
                "restarts": self.restarts,
                "lost_work_total": self.lost_work_total,
                "first_fully_placed_at": self.first_fully_placed_at,
                "completed_at": self.completed_at,
            }
        )
        return d


# ---------------------------------------------------------------- deploys

DEPLOY_STEP_NAMES = (
    "ReservePlacements",
    "CreateVolumes",
    "CreateHelpers",
    "CreateLearners",
    "ApplyNetworkPolicy",
)

DEFAULT_DEPLOY_STEP_S = 0.5
DEFAULT_MAX_DEPLOY_RETRIES = 3


class DeployOutcome(Enum):
    DEPLOYED = "Deployed"
    ROLLED_BACK_AND_RETRIED = "RolledBackAndRetried"
    FAILED = "Failed"


@dataclass
class DeployResult:
    outcome: DeployOutcome
    attempts: int
    attempt_outcomes: list[DeployOutcome]


class GuardianDeploy:
    """One job's deployment: five steps, each with an exact inverse.

    `materialize` says whether step one must convert the scheduler's
    grant into allocations (gang placement held as reservations) or the
    pods were already allocated one at a time by the scheduler.
    """

    def __init__(
        self,
        record: JobRecord,
        assignment: dict[int, str],
        cluster: Cluster,
        store: CoordinationStore,
        materialize: bool = True,
        max_retries: int = DEFAULT_MAX_DEPLOY_RETRIES,
    ):
        self.record = record
        self.assignment = dict(sorted(assignment.items()))
        self.cluster = cluster
        self.store = store
        self.materialize = materialize
        self.max_retries = max_retries
        self.attempt = 1
        self.next_step = 0
        self._receipts: list[AllocationReceipt] = []

    @property
    def job_id(self) -> str:
        return self.record.job_id

    @property
    def complete(self) -> bool:
        return self.next_step >= len(DEPLOY_STEP_NAMES)

    @property
    def retries_left(self) -> int:
        return self.max_retries - (self.attempt - 1)

    # ------------------------------------------------ steps

    def apply_step(self, now: float) -> str:
        """Apply the next step's effect.  Returns the step name."""
        name = DEPLOY_STEP_NAMES[self.next_step]
        job_id = self.job_id
        if name == "ReservePlacements":
            if self.materialize:
                demand = self.record.spec.demand
                for learner, node_id in self.assignment.items():
                    self._receipts.append(
                        self.cluster.allocate(node_id, demand, job_id, learner)
                    )
        elif name == "CreateVolumes":
            self.store.put(f"{job_prefix(job_id)}volume", b"BOUND", now=now)
        elif name == "CreateHelpers":
            self.store.put(f"{job_prefix(job_id)}helper", b"RUNNING", now=now)
        elif name == "CreateLearners":
            for learner in self.assignment:
                self.store.put(learner_key(job_id, learner), LEARNER_STARTING, now=now)
            self.record.placements = dict(self.assignment)
        elif name == "ApplyNetworkPolicy":
            self.store.put(f"{job_prefix(job_id)}netpol", b"APPLIED", now=now)
        self.next_step += 1
        return name

    def _undo_step(self, index: int) -> None:
        name = DEPLOY_STEP_NAMES[index]
        job_id = self.job_id
        if name == "ReservePlacements":
            for receipt in reversed(self._receipts):
                p = receipt.placement
                if self.cluster.placement(p.gang_id, p.learner_index) is None:
                    continue  # already evicted elsewhere
                self.cluster.release_placement(p)
                if receipt.consumed_reservation and self.cluster.node(p.node_id).schedulable:
                    self.cluster.reserve(p.node_id, p.demand, p.gang_id)
            self._receipts = []
        elif name == "CreateVolumes":
            self.store.delete(f"{job_prefix(job_id)}volume")
        elif name == "CreateHelpers":
            self.store.delete(f"{job_prefix(job_id)}helper")
        elif name == "CreateLearners":
            for learner in self.assignment:
                self.store.delete(learner_key(job_id, learner))
            self.record.placements = {}
        elif name == "ApplyNetworkPolicy":
            self.store.delete(f"{job_prefix(job_id)}netpol")

    def rollback(self) -> None:
        """Undo every completed step, newest first."""
        for index in range(self.next_step - 1, -1, -1):
            self._undo_step(index)
        self.next_step = 0

    def crash(self) -> bool:
        """Roll back after a crash; True if another attempt is allowed."""
        self.rollback()
        self.attempt += 1
        return self.attempt <= self.max_retries + 1

    def abort(self) -> None:
        """Roll back and drop the gang's reservations (no retry follows)."""
        self.rollback()
        self.cluster.cancel_reservations(self.job_id)


def guardian_deploy(
    record: JobRecord,
    assignment: dict[int, str],
    cluster: Cluster,
    store: CoordinationStore,
    crash_plan=None,
    materialize: bool = True,
    max_retries: int = DEFAULT_MAX_DEPLOY_RETRIES,
    now: float = 0.0,
    step_duration: float = DEFAULT_DEPLOY_STEP_S,
) -> DeployResult:
    """Run a whole deployment synchronously, honouring injected crashes.

    crash_plan is a callable (job_id, attempt, step_index) -> bool; a hit
    applies the step's effect and then crashes before it is recorded, so
    the rollback path of every step gets exercised.
    """
    deploy = GuardianDeploy(
        record, assignment, cluster, store, materialize=materialize, max_retries=max_retries
    )
    attempt_outcomes: list[DeployOutcome] = []
    t = now
    while True:
        record.deploy_attempts = deploy.attempt
        crashed = False
        while not deploy.complete:
            step_index = deploy.next_step
            t += step_duration
            deploy.apply_step(t)
            if crash_plan is not None and crash_plan(record.job_id, deploy.attempt, step_index):
                crashed = True
                break
        if not crashed:
            attempt_outcomes.append(DeployOutcome.DEPLOYED)
            return DeployResult(DeployOutcome.DEPLOYED, deploy.attempt, attempt_outcomes)
        if deploy.crash():
            attempt_outcomes.append(DeployOutcome.ROLLED_BACK_AND_RETRIED)
            continue
        deploy.abort()
        attempt_outcomes.append(DeployOutcome.FAILED)
        return DeployResult(DeployOutcome.FAILED, deploy.attempt - 1, attempt_outcomes)


# ---------------------------------------------------------------- controller


def controller_tick(record: JobRecord, store: CoordinationStore, now: float) -> JobStatus:
    """Aggregate learner statuses into a job status.

    Sync jobs only reach PROCESSING once every learner reports it; a
    missing key means the learner is unknown (liveness timers deal with
    it) and a FAILED learner leaves the job status untouched while the
    recovery path runs.  Returns the (possibly unchanged) job status.
    """
    statuses = []
    for i in range(record.spec.learners):
        statuses.append(store.get(learner_key(record.job_id, i)))
    if any(s is None for s in statuses):
        return record.status
    if any(s == LEARNER_FAILED for s in statuses):
        return record.status
    if record.spec.sync:
        all_processing = all(s == LEARNER_PROCESSING for s in statuses)
    else:
        all_processing = any(s == LEARNER_PROCESSING for s in statuses)
    if all_processing and record.status in (JobStatus.DOWNLOADING, JobStatus.RESUMED):
        record.transition(now, JobStatus.PROCESSING)
    return record.status


# ---------------------------------------------------------------- recovery


@dataclass(frozen=True)
class ReplacementRequest:
    """A learner pod to be pushed back through the scheduler."""

    job_id: str
    learner_index: int
    lost_work: float


DEFAULT_REPLACEMENT_GRACE_S = 900.0   # 15 min before the whole job requeues


def handle_node_failure(
    evictions: list[PodPlacement],
    records: dict[str, JobRecord],
    cluster: Cluster,
    store: CoordinationStore,
    now: float,
) -> list[ReplacementRequest]:
    """Release evicted pods and emit replacement requests.

    Progress of each touched job is rewound to its last checkpoint (the
    work since then is lost) and its restart counter goes up once per
    failure event, however many of its learners were hit.  A job already
    storing results keeps its progress: the upload restarts, the
    computed work does not.
    """
    requests: list[ReplacementRequest] = []
    touched: set[str] = set()
    for p in evictions:
        record = records[p.gang_id]
        cluster.release_placement(p)
        record.placements.pop(p.learner_index, None)
        store.put(learner_key(p.gang_id, p.learner_index), LEARNER_FAILED, now=now)
        lost = 0.0
        if p.gang_id not in touched:
            touched.add(p.gang_id)
            record.restarts += 1
            if record.status is not JobStatus.STORING:
                lost = record.progress - record.last_checkpoint
                record.lost_work_total += lost
                record.progress = record.last_checkpoint
        requests.append(ReplacementRequest(p.gang_id, p.learner_index, lost))
    return requests


def take_checkpoint(record: JobRecord, now: float) -> float:
    """Persist current progress as the rollback point."""
    if record.status is JobStatus.PROCESSING or record.status is JobStatus.HALTED:
        record.last_checkpoint = record.progress
    return record.last_checkpoint


# ---------------------------------------------------------------- components

# observed restart latency ranges, seconds
COMPONENT_RECOVERY_RANGES: dict[str, tuple[float, float]] = {
    "API": (3.0, 5.0),
    "LCM": (4.0, 6.0),
    "Guardian": (1.0, 2.0),
    "Helper": (3.0, 4.0),
    "Learner": (10.0, 20.0),
}


def component_recovery_delay(component: str, rng: random.Random) -> float:
    """Seeded draw of a component's restart latency."""
    try:
        lo, hi = COMPONENT_RECOVERY_RANGES[component]
    except KeyError:
        raise UnknownComponent(component) from None
    return rng.uniform(lo, hi)
