"""Node and resource bookkeeping, including a randomized mirror model."""

import random

import pytest

from gangsim.cluster import (
    DEFAULT_CPU_PER_GPU,
    DEFAULT_MEM_PER_GPU,
    Cluster,
    ClusterError,
    GpuClassMismatch,
    InsufficientCapacity,
    NodeStatus,
    NodeUnschedulable,
    ResourceVector,
    UnderflowRelease,
)


def k80(gpus, cpu=1000, mem=1024):
    return ResourceVector(gpus=gpus, gpu_class="K80", cpu=cpu, mem=mem)


def small_cluster(nodes=2, gpus=4):
    return Cluster.from_topology(
        [{"id": f"n{i}", "gpu_class": "K80", "gpus": gpus} for i in range(nodes)]
    )


# ---------------------------------------------------------------- vectors


def test_vector_addition_keeps_left_class():
    a = ResourceVector(2, "K80", 100, 200)
    b = ResourceVector(1, "V100", 50, 25)
    total = a + b
    assert (total.gpus, total.cpu, total.mem) == (3, 150, 225)
    assert total.gpu_class == "K80"


def test_vector_subtraction_underflow():
    with pytest.raises(ValueError):
        ResourceVector(1, "K80", 10, 10) - ResourceVector(2, "K80", 0, 0)


def test_negative_components_rejected():
    with pytest.raises(ValueError):
        ResourceVector(-1, "K80", 0, 0)


def test_cpu_only_demand_is_class_agnostic():
    demand = ResourceVector(0, None, 2000, 4096)
    assert demand.class_matches("K80")
    assert demand.class_matches(None)
    assert demand.fits_in(ResourceVector(0, "V100", 2000, 4096))


def test_gpu_demand_requires_matching_class():
    demand = k80(1)
    assert demand.class_matches("K80")
    assert not demand.class_matches("V100")
    assert not demand.fits_in(ResourceVector(4, "V100", 9999, 9999))


def test_scaled():
    assert k80(1, 10, 20).scaled(3) == k80(3, 30, 60)


# ---------------------------------------------------------------- topology


def test_from_topology_defaults_scale_with_gpus():
    cluster = Cluster.from_topology([{"id": "a", "gpu_class": "P100", "gpus": 2}])
    cap = cluster.node("a").capacity
    assert cap.cpu == 2 * DEFAULT_CPU_PER_GPU
    assert cap.mem == 2 * DEFAULT_MEM_PER_GPU


def test_from_topology_rejects_garbage():
    with pytest.raises(ValueError):
        Cluster.from_topology([{"id": "a", "gpus": 2}])  # no gpu_class
    with pytest.raises(ValueError):
        Cluster.from_topology([{"id": "a", "gpu_class": "K80", "gpus": "no"}])


def test_duplicate_node_ids_rejected():
    with pytest.raises(ValueError):
        Cluster.from_topology(
            [{"id": "a", "gpu_class": "K80", "gpus": 1},
             {"id": "a", "gpu_class": "K80", "gpus": 1}]
        )


# ---------------------------------------------------------------- allocation


def test_allocate_and_release_round_trip():
    cluster = small_cluster()
    before = cluster.node("n0").free
    cluster.allocate("n0", k80(2), "job-a", 0)
    assert cluster.node("n0").allocated.gpus == 2
    assert cluster.node("n0").free.gpus == before.gpus - 2
    assert cluster.placement("job-a", 0).node_id == "n0"
    cluster.release("n0", k80(2), "job-a", 0)
    assert cluster.node("n0").free == before
    assert cluster.placement("job-a", 0) is None


def test_allocate_rejects_double_placement():
    cluster = small_cluster()
    cluster.allocate("n0", k80(1), "job-a", 0)
    with pytest.raises(ClusterError):
        cluster.allocate("n1", k80(1), "job-a", 0)


def test_allocate_checks_capacity_class_and_health():
    cluster = small_cluster(gpus=2)
    with pytest.raises(InsufficientCapacity):
        cluster.allocate("n0", k80(3), "job-a", 0)
    with pytest.raises(GpuClassMismatch):
        cluster.allocate("n0", ResourceVector(1, "V100", 1, 1), "job-a", 0)
    cluster.cordon("n0")
    with pytest.raises(NodeUnschedulable):
        cluster.allocate("n0", k80(1), "job-a", 0)


def test_release_underflow_detected():
    cluster = small_cluster()
    with pytest.raises(UnderflowRelease):
        cluster.release("n0", k80(1), "ghost", 0)


# ---------------------------------------------------------------- reservations


def test_reservation_holds_capacity_without_allocating():
    cluster = small_cluster(nodes=1, gpus=4)
    cluster.reserve("n0", k80(3), "job-a")
    node = cluster.node("n0")
    assert node.allocated.gpus == 0
    assert node.committed.gpus == 3
    assert node.free.gpus == 1
    # another gang cannot take what is held
    with pytest.raises(InsufficientCapacity):
        cluster.allocate("n0", k80(2), "job-b", 0)


def test_allocation_consumes_matching_reservation():
    cluster = small_cluster(nodes=1, gpus=4)
    cluster.reserve("n0", k80(4), "job-a")
    # the gang's own pod converts the hold instead of double counting
    receipt = cluster.allocate("n0", k80(4), "job-a", 0)
    assert receipt.consumed_reservation
    node = cluster.node("n0")
    assert node.allocated.gpus == 4
    assert node.reserved.gpus == 0
    assert node.free.gpus == 0


def test_cancel_reservations_counts_drops():
    cluster = small_cluster()
    cluster.reserve("n0", k80(1), "job-a")
    cluster.reserve("n1", k80(1), "job-a")
    cluster.reserve("n1", k80(1), "job-b")
    assert cluster.cancel_reservations("job-a") == 2
    assert cluster.reserved_gpus() == 1


# ---------------------------------------------------------------- failures


def test_fail_reports_evictions_and_holds():
    cluster = small_cluster()
    cluster.allocate("n0", k80(1), "job-b", 1)
    cluster.allocate("n0", k80(1), "job-a", 0)
    cluster.reserve("n0", k80(1), "job-c")
    failure = cluster.fail("n0")
    assert [(p.gang_id, p.learner_index) for p in failure.evicted] == [
        ("job-a", 0), ("job-b", 1)
    ]
    assert failure.reserved_gangs == ["job-c"]
    assert cluster.node("n0").status is NodeStatus.NOT_READY
    # evicted placements are NOT auto-released; the recovery path owns that
    assert cluster.node("n0").allocated.gpus == 2
    cluster.recover("n0")
    assert cluster.node("n0").schedulable


# ---------------------------------------------------------------- invariants


def test_check_invariants_catches_drift():
    cluster = small_cluster()
    cluster.allocate("n0", k80(1), "job-a", 0)
    cluster.check_invariants()
    cluster.node("n0").allocated = k80(3)  # corrupt on purpose
    with pytest.raises(ClusterError):
        cluster.check_invariants()


def test_randomized_ops_agree_with_mirror_model():
    """Allocate/release/reserve/cancel against an independent tally."""
    rng = random.Random("cluster-mirror")
    cluster = small_cluster(nodes=4, gpus=4)
    live: dict[tuple, tuple[str, int]] = {}  # (gang, idx) -> (node, gpus)
    reserved: list[tuple[str, str, int]] = []  # (gang, node, gpus)
    seq = 0
    for _ in range(600):
        op = rng.random()
        node_id = f"n{rng.randrange(4)}"
        if op < 0.45:
            gpus = rng.randint(1, 4)
            key = (f"g{seq}", 0)
            seq += 1
            try:
                cluster.allocate(node_id, k80(gpus), key[0], 0)
                live[key] = (node_id, gpus)
            except ClusterError:
                pass
        elif op < 0.7 and live:
            key = rng.choice(sorted(live))
            node_id, gpus = live.pop(key)
            cluster.release(node_id, k80(gpus), key[0], key[1])
        elif op < 0.9:
            gpus = rng.randint(1, 2)
            gang = f"r{seq}"
            seq += 1
            try:
                cluster.reserve(node_id, k80(gpus), gang)
                reserved.append((gang, node_id, gpus))
            except ClusterError:
                pass
        elif reserved:
            gang, _, _ = reserved[rng.randrange(len(reserved))]
            dropped = cluster.cancel_reservations(gang)
            assert dropped == sum(1 for g, _, _ in reserved if g == gang)
            reserved = [r for r in reserved if r[0] != gang]
        cluster.check_invariants()
        for nid in cluster.nodes:
            node = cluster.node(nid)
            want_alloc = sum(g for (n, g) in live.values() if n == nid)
            want_res = sum(g for _, n, g in reserved if n == nid)
            assert node.allocated.gpus == want_alloc
            assert node.reserved.gpus == want_res
            assert node.free.gpus == 4 - want_alloc - want_res
    assert cluster.total_allocated_gpus() == sum(g for _, g in live.values())
