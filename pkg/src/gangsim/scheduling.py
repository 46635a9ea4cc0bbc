"""Placement policies: pod-at-a-time Spread/Pack and all-or-nothing gangs.

The pod-at-a-time path mirrors a vanilla kube-scheduler: filter nodes by
predicates, rank survivors, bind one pod.  The gang path adapts biased
sampling to whole gangs: the filter verdicts become sampling weights
(packed nodes weigh more), one greedy best-fit assignment is always in
the sample set, and the cheapest feasible assignment by (newly opened
nodes, leftover GPU fragments) wins.  A gang either gets every pod
placed atomically or nothing at all, so partially scheduled jobs can
never hoard GPUs under the gang policy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .cluster import Cluster, Node, ResourceVector
from .lifecycle import JobRecord
from .workload import Gang

# filter verdict labels, also used in unschedulable summaries
INSUFFICIENT_GPU = "InsufficientGpu"
INSUFFICIENT_CPU = "InsufficientCpu"
INSUFFICIENT_MEM = "InsufficientMem"
GPU_CLASS_MISMATCH = "GpuClassMismatch"
NODE_UNSCHEDULABLE = "NodeUnschedulable"


class Policy(Enum):
    POD_SPREAD = "pod-spread"
    POD_PACK = "pod-pack"
    GANG = "gang"


POD_POLICIES = (Policy.POD_SPREAD, Policy.POD_PACK)

DEFAULT_SAMPLES = 64
DEFAULT_DEADLOCK_TIMEOUT_S = 600.0


class SchedulingError(Exception):
    pass


@dataclass
class SchedulerConfig:
    policy: Policy = Policy.GANG
    samples: int = DEFAULT_SAMPLES
    deadlock_timeout_s: float = DEFAULT_DEADLOCK_TIMEOUT_S
    max_queue_peek: int = 1          # strict FCFS; nothing else is supported
    pod_queue_order: str = "shuffle" # "shuffle" | "round-robin"
    # per-run queue perturbation: with ordered_queue_fraction the queue
    # stays in submission order, otherwise per-pod jitter up to
    # max_shuffle_jitter positions models the nondeterministic order in
    # which pods reach the scheduler
    ordered_queue_fraction: float = 0.24
    max_shuffle_jitter: float = 72.0
    evict_deadlocked_after_s: float | None = None

    def __post_init__(self):
        if isinstance(self.policy, str):
            self.policy = Policy(self.policy)
        if self.samples < 1:
            raise SchedulingError("samples must be >= 1")
        if self.max_queue_peek != 1:
            raise SchedulingError("only strict FCFS (max_queue_peek == 1) is supported")
        if self.pod_queue_order not in ("shuffle", "round-robin"):
            raise SchedulingError(f"unknown pod_queue_order {self.pod_queue_order!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerConfig":
        kwargs = {}
        mapping = {
            "policy": "policy",
            "samples": "samples",
            "deadlock_timeout_s": "deadlock_timeout_s",
            "max_queue_peek": "max_queue_peek",
            "pod_queue_order": "pod_queue_order",
            "ordered_queue_fraction": "ordered_queue_fraction",
            "max_shuffle_jitter": "max_shuffle_jitter",
            "evict_deadlocked_after_s": "evict_deadlocked_after_s",
        }
        for key, attr in mapping.items():
            if key in d:
                kwargs[attr] = d[key]
        unknown = set(d) - set(mapping)
        if unknown:
            raise SchedulingError(f"unknown scheduler config keys: {sorted(unknown)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "samples": self.samples,
            "deadlock_timeout_s": self.deadlock_timeout_s,
            "max_queue_peek": self.max_queue_peek,
            "pod_queue_order": self.pod_queue_order,
            "ordered_queue_fraction": self.ordered_queue_fraction,
            "max_shuffle_jitter": self.max_shuffle_jitter,
            "evict_deadlocked_after_s": self.evict_deadlocked_after_s,
        }


# ---------------------------------------------------------------- pods


@dataclass(frozen=True)
class PodRequest:
    gang_id: str
    learner_index: int
    demand: ResourceVector


@dataclass
class Unschedulable:
    """No node passed the predicates; counts per failing predicate."""

    predicate_counts: dict[str, int]

    def summary(self) -> str:
        parts = [f"{label} ({count})" for label, count in sorted(self.predicate_counts.items())]
        return "no nodes available: " + ", ".join(parts) if parts else "no nodes in cluster"


@dataclass
class NoFeasibleAssignment:
    predicate_counts: dict[str, int]
    reason: str = ""


@dataclass
class Assignment:
    """A feasible mapping of every gang pod onto a node."""

    mapping: dict[int, str]
    objective_value: tuple[int, int]  # (newly opened nodes, leftover free GPUs on touched nodes)


def _verdict(node: Node, demand: ResourceVector) -> str | None:
    """First failing predicate label, or None when the node fits."""
    if not node.schedulable:
        return NODE_UNSCHEDULABLE
    if not demand.class_matches(node.capacity.gpu_class):
        return GPU_CLASS_MISMATCH
    free = node.free
    if demand.gpus > free.gpus:
        return INSUFFICIENT_GPU
    if demand.cpu > free.cpu:
        return INSUFFICIENT_CPU
    if demand.mem > free.mem:
        return INSUFFICIENT_MEM
    return None


def filter_nodes(demand: ResourceVector, cluster: Cluster):
    """Split nodes into candidates and {node_id: failed predicate}."""
    candidates: list[Node] = []
    verdicts: dict[str, str] = {}
    for node in cluster.nodes.values():
        label = _verdict(node, demand)
        if label is None:
            candidates.append(node)
        else:
            verdicts[node.id] = label
    return candidates, verdicts


def rank_nodes(candidates: list[Node], policy: Policy) -> list[Node]:
    """Order candidates by policy score; ties break on ascending node id.

    Pack prefers the most committed node (allocated + reserved GPUs),
    Spread the one with the most free GPUs.
    """
    if policy is Policy.POD_SPREAD:
        return sorted(candidates, key=lambda n: (-n.free.gpus, n.id))
    return sorted(candidates, key=lambda n: (-n.committed.gpus, n.id))


def schedule_pod(pod: PodRequest, cluster: Cluster, policy: Policy) -> str | Unschedulable:
    """Place a single pod now, or explain why no node would take it."""
    candidates, verdicts = filter_nodes(pod.demand, cluster)
    if not candidates:
        counts: dict[str, int] = {}
        for label in verdicts.values():
            counts[label] = counts.get(label, 0) + 1
        return Unschedulable(predicate_counts=counts)
    winner = rank_nodes(candidates, policy)[0]
    cluster.allocate(winner.id, pod.demand, pod.gang_id, pod.learner_index)
    return winner.id


# ---------------------------------------------------------------- gangs


def _slots(free: ResourceVector, demand: ResourceVector) -> int:
    """How many copies of demand fit into free."""
    out = None
    for have, want in ((free.gpus, demand.gpus), (free.cpu, demand.cpu), (free.mem, demand.mem)):
        if want > 0:
            k = have // want
            out = k if out is None else min(out, k)
    return 10**9 if out is None else out


def _sample_assignment_greedy(
    order: list[str],
    committed: dict[str, int],
    free: dict[str, ResourceVector],
    demand: ResourceVector,
    size: int,
) -> list[str] | None:
    """Best-fit: each pod goes to the fullest node that still fits it."""
    remaining = dict(free)
    placed_gpus = {n: 0 for n in order}
    chosen: list[str] = []
    for _ in range(size):
        best = None
        best_score = None
        for n in order:
            if not demand.fits_in(remaining[n]):
                continue
            score = committed[n] + placed_gpus[n]
            if best is None or score > best_score:
                best, best_score = n, score
        if best is None:
            return None
        chosen.append(best)
        remaining[best] = remaining[best] - demand
        placed_gpus[best] += demand.gpus
    return chosen


def _sample_assignment_random(
    order: list[str],
    weights: dict[str, float],
    free: dict[str, ResourceVector],
    demand: ResourceVector,
    size: int,
    rng: random.Random,
) -> list[str] | None:
    remaining = dict(free)
    chosen: list[str] = []
    for _ in range(size):
        feasible = [n for n in order if demand.fits_in(remaining[n])]
        if not feasible:
            return None
        pick = rng.choices(feasible, weights=[weights[n] for n in feasible], k=1)[0]
        chosen.append(pick)
        remaining[pick] = remaining[pick] - demand
    return chosen


def _objective(
    chosen: list[str],
    committed: dict[str, int],
    free: dict[str, ResourceVector],
    demand: ResourceVector,
) -> tuple[int, int]:
    per_node: dict[str, int] = {}
    for n in chosen:
        per_node[n] = per_node.get(n, 0) + 1
    opened = sum(1 for n in per_node if committed[n] == 0)
    fragments = sum(free[n].gpus - per_node[n] * demand.gpus for n in per_node)
    return (opened, fragments)


def schedule_gang(
    gang: Gang,
    cluster: Cluster,
    config: SchedulerConfig,
    rng: random.Random,
    materialized=None,
) -> Assignment | NoFeasibleAssignment:
    """Atomically place a whole gang, or place nothing.

    Draws config.samples candidate assignments: one greedy best-fit plus
    randomized ones where each pod picks a node with probability
    proportional to 1 + committed GPUs (the pack bias), subject to the
    capacity left inside the sample.  The winner minimizes (newly opened
    nodes, total leftover free GPUs on touched nodes); ties keep the
    earliest sample, so the outcome is deterministic for a given rng.

    materialized lists learner indexes whose pods exist right now; their
    resources are allocated, the rest become gang reservations consumed
    when those pods surface.  None means all pods materialize now.
    """
    demand = gang.per_pod_demand
    candidates, verdicts = filter_nodes(demand, cluster)
    counts: dict[str, int] = {}
    for label in verdicts.values():
        counts[label] = counts.get(label, 0) + 1
    if not candidates:
        return NoFeasibleAssignment(predicate_counts=counts, reason="no candidate nodes")

    order = [n.id for n in candidates]
    committed = {n.id: n.committed.gpus for n in candidates}
    free = {n.id: n.free for n in candidates}
    weights = {n: 1.0 + committed[n] for n in order}

    # identical pods each consume exactly one slot, so the slot count is
    # an exact feasibility test and sampling never runs on a lost cause
    if sum(_slots(free[n], demand) for n in order) < gang.gang_size:
        return NoFeasibleAssignment(
            predicate_counts=counts,
            reason=f"cluster has fewer than {gang.gang_size} free slots",
        )

    best: list[str] | None = None
    best_obj: tuple[int, int] | None = None
    for s in range(config.samples):
        if s == 0:
            chosen = _sample_assignment_greedy(order, committed, free, demand, gang.gang_size)
        else:
            chosen = _sample_assignment_random(order, weights, free, demand, gang.gang_size, rng)
        if chosen is None:
            continue
        obj = _objective(chosen, committed, free, demand)
        if best_obj is None or obj < best_obj:
            best, best_obj = chosen, obj
    if best is None:
        return NoFeasibleAssignment(
            predicate_counts=counts,
            reason=f"no feasible assignment for {gang.gang_size} pods in {config.samples} samples",
        )

    # re-check against live node state before mutating anything
    tallies: dict[str, int] = {}
    for n in best:
        tallies[n] = tallies.get(n, 0) + 1
    for n, count in tallies.items():
        if not demand.scaled(count).fits_in(cluster.node(n).free):
            raise SchedulingError(f"sampled assignment no longer fits on {n}")

    if materialized is None:
        materialized = set(range(gang.gang_size))
    mapping = {learner: node_id for learner, node_id in enumerate(best)}
    for learner, node_id in mapping.items():
        if learner in materialized:
            cluster.allocate(node_id, demand, gang.gang_id, learner)
        else:
            cluster.reserve(node_id, demand, gang.gang_id)
    return Assignment(mapping=mapping, objective_value=best_obj)


# ---------------------------------------------------------------- queue


@dataclass(order=True)
class _QueueItem:
    sort_key: tuple
    kind: str = field(compare=False)          # "gang" | "pod" | "replacement"
    job_id: str = field(compare=False)
    learner_index: int = field(compare=False, default=-1)
    demand: ResourceVector = field(compare=False, default=None)  # type: ignore[assignment]
    gang: Gang = field(compare=False, default=None)  # type: ignore[assignment]


class SchedulerQueue:
    """Strict FCFS work queue over gangs and individual pods.

    Replacement pods for evicted learners sort ahead of everything else;
    gangs order by (submit time, larger gang first, job id); trace pods
    order by submit time with either per-pod jitter (modeling the
    nondeterministic order pods reach the scheduler) or an adversarial
    round-robin interleave.
    """

    def __init__(self):
        self._items: list[_QueueItem] = []
        self._dirty = False
        self._arrival_seq = 0
        self._replacement_seq = 0

    def __len__(self):
        return len(self._items)

    def _push(self, item: _QueueItem) -> None:
        self._items.append(item)
        self._dirty = True

    def push_gang(self, gang: Gang, submit_time: float) -> None:
        key = (1, submit_time, 0.0, -gang.gang_size, gang.gang_id, -1)
        self._push(_QueueItem(key, "gang", gang.gang_id, gang=gang))

    def push_pod(
        self,
        job_id: str,
        learner_index: int,
        demand: ResourceVector,
        submit_time: float,
        order_mode: str,
        jitter: float,
    ) -> None:
        self._arrival_seq += 1
        if order_mode == "round-robin":
            key = (1, submit_time, float(learner_index), 0, job_id, learner_index)
        else:
            key = (1, submit_time, self._arrival_seq + jitter, 0, job_id, learner_index)
        self._push(_QueueItem(key, "pod", job_id, learner_index, demand))

    def push_replacement(self, job_id: str, learner_index: int, demand: ResourceVector) -> None:
        self._replacement_seq += 1
        key = (0, float(self._replacement_seq), 0.0, 0, job_id, learner_index)
        self._push(_QueueItem(key, "replacement", job_id, learner_index, demand))

    def _settle(self) -> None:
        if self._dirty:
            self._items.sort()
            self._dirty = False

    def head(self) -> _QueueItem | None:
        self._settle()
        return self._items[0] if self._items else None

    def pop(self) -> _QueueItem:
        self._settle()
        return self._items.pop(0)

    def remove_job(self, job_id: str) -> int:
        before = len(self._items)
        self._items = [it for it in self._items if it.job_id != job_id]
        return before - len(self._items)

    def job_ids(self) -> list[str]:
        self._settle()
        return [it.job_id for it in self._items]


@dataclass(frozen=True)
class PlacementDecision:
    kind: str                 # "gang" | "pod" | "replacement"
    job_id: str
    learner_index: int        # -1 for gangs
    mapping: dict             # learner -> node for gangs, {index: node} otherwise


def dispatch(
    queue: SchedulerQueue,
    cluster: Cluster,
    config: SchedulerConfig,
    now: float,
    rng: random.Random,
    materialized_for=None,
) -> list[PlacementDecision]:
    """Drain the queue head-first until something does not fit.

    Strict FCFS: the head blocks the queue, but a gang that cannot be
    placed holds no resources while it waits.  Gang placements land as
    reservations when materialized_for says the pods are not live yet.
    """
    decisions: list[PlacementDecision] = []
    while len(queue):
        item = queue.head()
        if item.kind == "gang":
            materialized = materialized_for(item.gang) if materialized_for else None
            result = schedule_gang(item.gang, cluster, config, rng, materialized=materialized)
            if isinstance(result, NoFeasibleAssignment):
                break
            queue.pop()
            decisions.append(PlacementDecision("gang", item.job_id, -1, result.mapping))
        else:
            pod = PodRequest(item.job_id, item.learner_index, item.demand)
            policy = config.policy if config.policy in POD_POLICIES else Policy.POD_PACK
            result = schedule_pod(pod, cluster, policy)
            if isinstance(result, Unschedulable):
                break
            queue.pop()
            decisions.append(
                PlacementDecision(item.kind, item.job_id, item.learner_index,
                                  {item.learner_index: result})
            )
    return decisions


# ---------------------------------------------------------------- deadlocks


@dataclass(frozen=True)
class DeadlockReport:
    job_id: str
    stuck_learners: int
    stuck_gpus: int
    partial_since: float


def detect_deadlocks(
    records, now: float, deadlock_timeout_s: float = DEFAULT_DEADLOCK_TIMEOUT_S
) -> list[DeadlockReport]:
    """Sync jobs stuck with a partial gang for longer than the timeout.

    Only meaningful under pod-at-a-time policies; gang placements are
    all-or-nothing so they can never linger here.
    """
    out = []
    for record in records:
        if not record.spec.sync:
            continue
        if not record.is_partially_placed() or record.partial_since is None:
            continue
        if now - record.partial_since > deadlock_timeout_s:
            placed = record.placed_count()
            out.append(
                DeadlockReport(
                    job_id=record.job_id,
                    stuck_learners=placed,
                    stuck_gpus=placed * record.spec.gpus_per_learner,
                    partial_since=record.partial_since,
                )
            )
    out.sort(key=lambda r: r.job_id)
    return out
