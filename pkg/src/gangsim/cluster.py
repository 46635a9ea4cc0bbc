"""Physical cluster state: nodes, multi-dimensional resources, health.

Each node carries a capacity vector (GPUs of a single class, CPU
millicores, memory MB), a running allocation, and a list of per-gang
reservations that hold capacity for pods which have been granted a
placement but have not materialized yet.  GPUs are never overcommitted:
allocated + reserved stays within capacity on every node.  Every
allocation is also recorded as a pod placement so a node failure can
report exactly which pods were lost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

# node-level defaults when a topology entry omits cpu / memory
DEFAULT_CPU_PER_GPU = 32_000   # millicores
DEFAULT_MEM_PER_GPU = 32_768   # MB


class ClusterError(Exception):
    """Base class for cluster-state errors."""


class UnknownNode(ClusterError):
    pass


class InsufficientCapacity(ClusterError):
    pass


class NodeUnschedulable(ClusterError):
    pass


class GpuClassMismatch(ClusterError):
    pass


class UnderflowRelease(ClusterError):
    pass


# ---------------------------------------------------------------- vectors


@dataclass(frozen=True)
class ResourceVector:
    """Non-negative (gpus, cpu millicores, mem MB) tagged with a GPU class.

    The class tag rides along with the GPU count; arithmetic keeps the
    left operand's tag.  Class compatibility is only enforced when the
    demand actually asks for GPUs.
    """

    gpus: int = 0
    gpu_class: str | None = None
    cpu: int = 0
    mem: int = 0

    def __post_init__(self):
        if self.gpus < 0 or self.cpu < 0 or self.mem < 0:
            raise ValueError(f"negative resource component in {self}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(
            self.gpus + other.gpus,
            self.gpu_class or other.gpu_class,
            self.cpu + other.cpu,
            self.mem + other.mem,
        )

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        if other.gpus > self.gpus or other.cpu > self.cpu or other.mem > self.mem:
            raise ValueError(f"resource underflow: {self} - {other}")
        return ResourceVector(
            self.gpus - other.gpus,
            self.gpu_class,
            self.cpu - other.cpu,
            self.mem - other.mem,
        )

    def class_matches(self, node_class: str | None) -> bool:
        # CPU-only demands are class-agnostic
        if self.gpus == 0 or self.gpu_class is None:
            return True
        return self.gpu_class == node_class

    def fits_in(self, avail: "ResourceVector") -> bool:
        return (
            self.gpus <= avail.gpus
            and self.cpu <= avail.cpu
            and self.mem <= avail.mem
            and self.class_matches(avail.gpu_class)
        )

    def scaled(self, n: int) -> "ResourceVector":
        return ResourceVector(self.gpus * n, self.gpu_class, self.cpu * n, self.mem * n)

    def is_zero(self) -> bool:
        return self.gpus == 0 and self.cpu == 0 and self.mem == 0


# ---------------------------------------------------------------- nodes


class NodeStatus(Enum):
    READY = "Ready"
    NOT_READY = "NotReady"
    CORDONED = "Cordoned"


@dataclass(frozen=True)
class Reservation:
    gang_id: str
    vector: ResourceVector


@dataclass
class Node:
    id: str
    capacity: ResourceVector
    allocated: ResourceVector = None  # type: ignore[assignment]
    status: NodeStatus = NodeStatus.READY
    reservations: list[Reservation] = field(default_factory=list)

    def __post_init__(self):
        if self.allocated is None:
            self.allocated = ResourceVector(0, self.capacity.gpu_class, 0, 0)

    @property
    def reserved(self) -> ResourceVector:
        total = ResourceVector(0, self.capacity.gpu_class, 0, 0)
        for r in self.reservations:
            total = total + r.vector
        return total

    @property
    def committed(self) -> ResourceVector:
        return self.allocated + self.reserved

    @property
    def free(self) -> ResourceVector:
        return self.capacity - self.committed

    @property
    def schedulable(self) -> bool:
        return self.status is NodeStatus.READY


@dataclass(frozen=True)
class PodPlacement:
    gang_id: str
    learner_index: int
    node_id: str
    demand: ResourceVector


@dataclass(frozen=True)
class AllocationReceipt:
    placement: PodPlacement
    consumed_reservation: bool


@dataclass(frozen=True)
class NodeFailure:
    """What fell over with the node: running pods and held reservations."""

    evicted: list[PodPlacement]
    reserved_gangs: list[str]


# ---------------------------------------------------------------- cluster


class Cluster:
    """Mutable cluster state plus the pod placement registry."""

    def __init__(self, nodes: list[Node]):
        self.nodes: dict[str, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ValueError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        # (gang_id, learner_index) -> PodPlacement
        self._placements: dict[tuple[str, int], PodPlacement] = {}

    # -------------------------------------------------- construction

    @classmethod
    def from_topology(cls, entries: list[dict]) -> "Cluster":
        """Build a cluster from a list of {id, gpu_class, gpus, ...} dicts."""
        nodes = []
        for e in entries:
            try:
                gpus = int(e["gpus"])
                cap = ResourceVector(
                    gpus=gpus,
                    gpu_class=e["gpu_class"],
                    cpu=int(e.get("cpu_millicores", DEFAULT_CPU_PER_GPU * max(gpus, 1))),
                    mem=int(e.get("mem_mb", DEFAULT_MEM_PER_GPU * max(gpus, 1))),
                )
                nodes.append(Node(id=str(e["id"]), capacity=cap))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"bad topology entry {e!r}: {exc}") from exc
        return cls(nodes)

    # -------------------------------------------------- lookups

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def gpu_classes(self) -> set:
        return {n.capacity.gpu_class for n in self.nodes.values()}

    def total_gpus(self) -> int:
        return sum(n.capacity.gpus for n in self.nodes.values())

    def total_allocated_gpus(self) -> int:
        return sum(n.allocated.gpus for n in self.nodes.values())

    def placements_on(self, node_id: str) -> list[PodPlacement]:
        out = [p for p in self._placements.values() if p.node_id == node_id]
        out.sort(key=lambda p: (p.gang_id, p.learner_index))
        return out

    def placements_of(self, gang_id: str) -> list[PodPlacement]:
        out = [p for p in self._placements.values() if p.gang_id == gang_id]
        out.sort(key=lambda p: p.learner_index)
        return out

    def placement(self, gang_id: str, learner_index: int) -> PodPlacement | None:
        return self._placements.get((gang_id, learner_index))

    # -------------------------------------------------- allocation

    def allocate(
        self,
        node_id: str,
        demand: ResourceVector,
        gang_id: str,
        learner_index: int = 0,
    ) -> AllocationReceipt:
        """Allocate demand on a node for one pod of a gang.

        A reservation already held by the same gang with the same vector
        is consumed (converted to allocation) instead of double-counting
        against free capacity.
        """
        node = self.node(node_id)
        if not node.schedulable:
            raise NodeUnschedulable(f"{node_id} is {node.status.value}")
        if not demand.class_matches(node.capacity.gpu_class):
            raise GpuClassMismatch(
                f"{node_id} offers {node.capacity.gpu_class}, demand wants {demand.gpu_class}"
            )
        key = (gang_id, learner_index)
        if key in self._placements:
            raise ClusterError(f"pod {key} is already placed on {self._placements[key].node_id}")

        consumed = False
        for i, r in enumerate(node.reservations):
            if r.gang_id == gang_id and r.vector == demand:
                del node.reservations[i]
                consumed = True
                break
        if not consumed and not demand.fits_in(node.free):
            raise InsufficientCapacity(
                f"{node_id} free {node.free} cannot hold {demand}"
            )
        node.allocated = node.allocated + demand
        placement = PodPlacement(gang_id, learner_index, node_id, demand)
        self._placements[key] = placement
        return AllocationReceipt(placement=placement, consumed_reservation=consumed)

    def release(
        self,
        node_id: str,
        demand: ResourceVector,
        gang_id: str,
        learner_index: int = 0,
    ) -> None:
        node = self.node(node_id)
        try:
            node.allocated = node.allocated - demand
        except ValueError as exc:
            raise UnderflowRelease(f"{node_id}: {exc}") from exc
        self._placements.pop((gang_id, learner_index), None)

    def release_placement(self, placement: PodPlacement) -> None:
        self.release(
            placement.node_id, placement.demand, placement.gang_id, placement.learner_index
        )

    # -------------------------------------------------- reservations

    def reserve(self, node_id: str, vector: ResourceVector, gang_id: str) -> None:
        node = self.node(node_id)
        if not node.schedulable:
            raise NodeUnschedulable(f"{node_id} is {node.status.value}")
        if not vector.class_matches(node.capacity.gpu_class):
            raise GpuClassMismatch(
                f"{node_id} offers {node.capacity.gpu_class}, demand wants {vector.gpu_class}"
            )
        if not vector.fits_in(node.free):
            raise InsufficientCapacity(f"{node_id} free {node.free} cannot reserve {vector}")
        node.reservations.append(Reservation(gang_id, vector))

    def cancel_reservations(self, gang_id: str) -> int:
        """Drop every reservation held by a gang.  Returns how many."""
        dropped = 0
        for node in self.nodes.values():
            keep = [r for r in node.reservations if r.gang_id != gang_id]
            dropped += len(node.reservations) - len(keep)
            node.reservations = keep
        return dropped

    def reserved_gpus(self) -> int:
        return sum(n.reserved.gpus for n in self.nodes.values())

    # -------------------------------------------------- health

    def cordon(self, node_id: str) -> None:
        self.node(node_id).status = NodeStatus.CORDONED

    def fail(self, node_id: str) -> NodeFailure:
        """Mark a node NotReady and report what was running or held there.

        Idempotent; the caller is responsible for releasing the evicted
        placements and cancelling or requeueing the affected gangs.
        """
        node = self.node(node_id)
        node.status = NodeStatus.NOT_READY
        evicted = self.placements_on(node_id)
        seen: list[str] = []
        for r in node.reservations:
            if r.gang_id not in seen:
                seen.append(r.gang_id)
        return NodeFailure(evicted=evicted, reserved_gangs=seen)

    def recover(self, node_id: str) -> None:
        self.node(node_id).status = NodeStatus.READY

    # -------------------------------------------------- invariants

    def check_invariants(self) -> None:
        """Raise ClusterError if bookkeeping has drifted out of bounds."""
        per_node: dict[str, ResourceVector] = {}
        for p in self._placements.values():
            cur = per_node.get(p.node_id)
            per_node[p.node_id] = p.demand if cur is None else cur + p.demand
        for node in self.nodes.values():
            c = node.committed
            cap = node.capacity
            if c.gpus > cap.gpus or c.cpu > cap.cpu or c.mem > cap.mem:
                raise ClusterError(f"{node.id} overcommitted: {c} > {cap}")
            placed = per_node.get(node.id, ResourceVector(0, cap.gpu_class, 0, 0))
            if placed != node.allocated and (
                placed.gpus != node.allocated.gpus
                or placed.cpu != node.allocated.cpu
                or placed.mem != node.allocated.mem
            ):
                raise ClusterError(
                    f"{node.id} allocation {node.allocated} disagrees with placements {placed}"
                )
