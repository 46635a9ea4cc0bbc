"""Release gate: the ten guarantees this package is sold on.

Each criterion is one test that re-derives its envelope from raw runs
(not from the replay module's own pass/fail verdicts), prints a single
PASS/FAIL line (visible with `pytest -s`, and in the captured output of
any failure), and enforces a wall-clock budget.  Run verbose to get one
line per criterion from pytest itself:

    pytest tests/test_acceptance.py -v -s
"""

import math
import random
import time

import pytest

from gangsim import replay
from gangsim.cluster import Cluster
from gangsim.engine import FaultPlan, SimParams, run_batch
from gangsim.engine import run as engine_run
from gangsim.kvstore import (
    MAX_VALUE_BYTES,
    CoordinationStore,
    UnknownLease,
    ValueTooLarge,
)
from gangsim.lifecycle import (
    DeployOutcome,
    JobRecord,
    guardian_deploy,
    job_prefix,
)
from gangsim.metrics import failure_impact, queued_over_threshold
from gangsim.scheduling import SchedulerConfig
from gangsim.workload import JobSpec


def _verdict(name: str, ok: bool, detail: str, t0: float, budget_s: float) -> None:
    """One line per criterion; fails the test on a bad envelope or a blown budget."""
    elapsed = time.perf_counter() - t0
    status = "PASS" if ok and elapsed <= budget_s else "FAIL"
    print(f"[{status}] {name}: {detail} ({elapsed:.2f}s, budget {budget_s:.0f}s)")
    assert ok, f"{name}: {detail}"
    assert elapsed <= budget_s, f"{name}: {elapsed:.2f}s over the {budget_s:.0f}s budget"


# ------------------------------------------------------------ 1. fragmentation


def test_criterion_01_fragmentation_flips_with_placement_policy():
    t0 = time.perf_counter()
    placed = {}
    for policy in ("pod-spread", "pod-pack"):
        result = replay.fragmentation_scenario(policy).run(seed=0)
        placed[policy] = sum(
            1 for j in result.jobs
            if j["gpus_per_learner"] == 4 and j["first_fully_placed_at"] is not None
        )
    ok = placed["pod-spread"] == 0 and placed["pod-pack"] == 3
    _verdict(
        "criterion-01 fragmentation",
        ok,
        f"4-GPU jobs placed: spread {placed['pod-spread']}/3 (want 0), "
        f"pack {placed['pod-pack']}/3 (want 3)",
        t0, 1.0,
    )


# ------------------------------------------------------------ 2. gang guarantee


def test_criterion_02_gang_scheduling_never_deadlocks_or_idles():
    t0 = time.perf_counter()
    violations = []
    peaks = set()
    for label, (learners, gpus) in replay.GANG_WORKLOADS.items():
        scenario = replay.gang_sweep_scenario(learners, gpus, policy="gang")
        for result in run_batch(scenario, replay.SWEEP_SEEDS):
            if result.peak_deadlocked_learners != 0:
                violations.append(
                    f"{label} seed {result.seed}: "
                    f"{result.peak_deadlocked_learners} deadlocked learners"
                )
            if result.idle_gpu_pct_peak != 0.0:
                violations.append(
                    f"{label} seed {result.seed}: "
                    f"{result.idle_gpu_pct_peak:.1f}% GPUs idle behind partial gangs"
                )
            if label == "2Lx1GPU":
                peaks.add(result.counters["peak_concurrent_fully_placed"])
    ok = not violations and peaks == {30}
    detail = (
        f"3 workloads x {len(replay.SWEEP_SEEDS)} seeds: "
        f"{len(violations)} violations (want 0); "
        f"2Lx1GPU peak concurrent = {sorted(peaks)} (want exactly 30)"
    )
    if violations:
        detail += "; first: " + violations[0]
    _verdict("criterion-02 gang-guarantee", ok, detail, t0, 30.0)


# ------------------------------------------------------------ 3. pod deadlocks


def test_criterion_03_pod_scheduling_wedges_some_seeds():
    t0 = time.perf_counter()
    results = {}
    for label in ("2Lx1GPU", "4Lx1GPU"):
        learners, gpus = replay.GANG_WORKLOADS[label]
        scenario = replay.gang_sweep_scenario(learners, gpus, policy="pod-spread")
        results[label] = run_batch(scenario, replay.SWEEP_SEEDS)
    two = results["2Lx1GPU"]
    p_free = sum(1 for r in two if r.peak_deadlocked_learners == 0) / len(two)
    max_idle = max(r.idle_gpu_pct_peak for r in results["4Lx1GPU"])
    any_deadlock = any(r.peak_deadlocked_learners >= 1 for r in two)
    ok = any_deadlock and 0.2 <= p_free <= 0.6 and max_idle >= 35.0
    _verdict(
        "criterion-03 pod-deadlocks",
        ok,
        f"some 2Lx1GPU seed deadlocks: {any_deadlock}; P(deadlock-free)={p_free:.2f} "
        f"(want [0.2, 0.6]); 4Lx1GPU peak idle {max_idle:.1f}% (want >= 35%)",
        t0, 60.0,
    )


# ------------------------------------------------------------ 4. adversarial order


def test_criterion_04_round_robin_wedges_pods_but_not_gangs():
    t0 = time.perf_counter()
    pod = replay.adversarial_scenario("pod-pack").run(seed=0)
    gang = replay.adversarial_scenario("gang").run(seed=0)
    gang_running = sum(1 for j in gang.jobs if j["first_fully_placed_at"] is not None)
    gang_queued = sum(1 for j in gang.jobs if j["final_status"] == "QUEUED")
    ok = (
        pod.peak_deadlocked_learners == 4
        and pod.total_gpus == 8
        and pod.peak_stuck_gpus == 8
        and gang_running == 2
        and gang_queued == 2
        and gang.peak_deadlocked_learners == 0
    )
    _verdict(
        "criterion-04 adversarial-interleave",
        ok,
        f"pod: {pod.peak_deadlocked_learners} deadlocked learners (want 4), "
        f"{pod.peak_stuck_gpus}/{pod.total_gpus} GPUs stuck (want 8/8); "
        f"gang: {gang_running} running + {gang_queued} queued (want 2 + 2), "
        f"{gang.peak_deadlocked_learners} deadlocked",
        t0, 1.0,
    )


# ------------------------------------------------------------ 5. spread vs pack


def test_criterion_05_packing_halves_long_queueing_on_bursty_week():
    t0 = time.perf_counter()
    late = {}
    for policy in ("pod-spread", "pod-pack"):
        result = replay.spread_vs_pack_scenario(policy).run(seed=0)
        late[policy] = len(
            queued_over_threshold(result.jobs, result.horizon, 900.0)
        )
    spread_late, pack_late = late["pod-spread"], late["pod-pack"]
    ok = spread_late > 0 and pack_late <= 0.5 * spread_late
    _verdict(
        "criterion-05 spread-vs-pack",
        ok,
        f"jobs queued > 15 min: spread {spread_late} (want > 0), "
        f"pack {pack_late} (want <= {0.5 * spread_late:.1f})",
        t0, 120.0,
    )


# ------------------------------------------------------------ 6. deploy atomicity

_DEPLOY_SHAPES = [
    ("atom-0", 1, 1), ("atom-1", 2, 1), ("atom-2", 2, 2), ("atom-3", 3, 1),
    ("atom-4", 4, 1), ("atom-5", 1, 2), ("atom-6", 2, 1), ("atom-7", 3, 1),
    ("atom-8", 4, 1), ("atom-9", 1, 4),
]
_DEPLOY_STEPS = 5
_BYSTANDER = ("/jobs/other/flag", "KEEP")


def _deploy_env(job_id: str, learners: int, gpus: int):
    """Fresh cluster + store + reserved gang, mirroring the engine's gang path."""
    cluster = Cluster.from_topology(
        [{"id": f"n{i}", "gpu_class": "K80", "gpus": 4} for i in range(3)]
    )
    store = CoordinationStore()
    store.put(*_BYSTANDER)
    spec = JobSpec(
        job_id=job_id, submit_time=0.0, learners=learners, gpus_per_learner=gpus,
        gpu_class="K80", cpu_per_learner=4000, mem_per_learner=24_576,
        work_duration=100.0,
    )
    record = JobRecord(spec)
    assignment = {i: f"n{i % 3}" for i in range(learners)}
    baseline = _env_state(cluster, store)
    for node_id in assignment.values():
        cluster.reserve(node_id, spec.demand, job_id)
    return cluster, store, record, assignment, baseline


def _env_state(cluster, store):
    """Everything a rollback must restore, including write revisions."""
    nodes = {
        nid: (n.allocated, n.reserved, [(r.gang_id, r.vector) for r in n.reservations])
        for nid, n in cluster.nodes.items()
    }
    placements = {k: v.node_id for k, v in cluster._placements.items()}
    return (nodes, placements, store.dump())


def _env_shape(cluster, store):
    """Like _env_state but ignoring revisions: retries burn revisions by design."""
    nodes, placements, dump = _env_state(cluster, store)
    return (nodes, placements, {k: (e["value"], e["lease_id"]) for k, e in dump.items()})


def test_criterion_06_deployment_is_atomic_under_crashes():
    t0 = time.perf_counter()
    checked = 0
    for job_id, learners, gpus in _DEPLOY_SHAPES:
        # reference: the same gang deployed with no crash at all
        cluster, store, record, assignment, _ = _deploy_env(job_id, learners, gpus)
        clean = guardian_deploy(record, assignment, cluster, store)
        assert clean.outcome is DeployOutcome.DEPLOYED and clean.attempts == 1
        want_shape = _env_shape(cluster, store)
        want_gpus = learners * gpus

        for step in range(_DEPLOY_STEPS):
            # crash at this step on every attempt: all retries burn, nothing sticks
            cluster, store, record, assignment, baseline = _deploy_env(
                job_id, learners, gpus
            )
            result = guardian_deploy(
                record, assignment, cluster, store,
                crash_plan=lambda j, a, i, s=step: i == s,
            )
            assert result.outcome is DeployOutcome.FAILED
            assert result.attempts == 4 and record.deploy_attempts == 4
            assert result.attempt_outcomes == (
                [DeployOutcome.ROLLED_BACK_AND_RETRIED] * 3 + [DeployOutcome.FAILED]
            )
            assert _env_state(cluster, store) == baseline
            assert store.keys(job_prefix(job_id)) == []
            assert sum(n.allocated.gpus for n in cluster.nodes.values()) == 0
            cluster.check_invariants()

            # crash at this step once: the retry must land indistinguishably
            cluster, store, record, assignment, _ = _deploy_env(job_id, learners, gpus)
            result = guardian_deploy(
                record, assignment, cluster, store,
                crash_plan=lambda j, a, i, s=step: a == 1 and i == s,
            )
            assert result.outcome is DeployOutcome.DEPLOYED and result.attempts == 2
            assert _env_shape(cluster, store) == want_shape
            assert sum(n.allocated.gpus for n in cluster.nodes.values()) == want_gpus
            assert not any(n.reservations for n in cluster.nodes.values())
            cluster.check_invariants()
            checked += 2
    _verdict(
        "criterion-06 deploy-atomicity",
        checked == len(_DEPLOY_SHAPES) * _DEPLOY_STEPS * 2,
        f"{checked} crash deployments over {len(_DEPLOY_SHAPES)} gangs x "
        f"{_DEPLOY_STEPS} steps: zero residue after exhaustion (4 attempts), "
        "recovered deploys match a never-crashed one",
        t0, 5.0,
    )


# ------------------------------------------------------------ 7. checkpoint bound


def test_criterion_07_checkpoints_bound_lost_work():
    t0 = time.perf_counter()
    rng = random.Random(20260825)
    topology = [
        {"id": "n0", "gpu_class": "K80", "gpus": 1},
        {"id": "n1", "gpu_class": "K80", "gpus": 1},
    ]
    worst_err = 0.0
    unchecked = 0
    for trial in range(200):
        interval = rng.choice([0.0, 5.0, 10.0, 15.0, 20.0, 30.0])
        work = rng.uniform(40.0, 200.0)
        # strictly inside the processing window so work is underway
        t_fail = rng.uniform(63.0, 61.5 + work)
        spec = JobSpec(
            job_id="ckpt", submit_time=0.0, learners=2, gpus_per_learner=1,
            gpu_class="K80", cpu_per_learner=4000, mem_per_learner=24_576,
            work_duration=work, checkpoint_interval=interval, sync=True,
        )
        result = engine_run(
            topology, [spec],
            scheduler=SchedulerConfig(policy="gang"),
            fault_plan=FaultPlan(node_failures=[(t_fail, "n1", 0.0)]),
            seed=trial,
            horizon=t_fail + 30.0,
            params=SimParams(capture_events=False),
        )
        lost = result.jobs[0]["lost_work_total"]
        progress_at_fail = t_fail - 62.5
        if interval > 0:
            expected = math.fmod(progress_at_fail, interval)
            assert lost <= interval + 1e-9, (
                f"trial {trial}: lost {lost:.4f}s > interval {interval}s"
            )
        else:
            # no checkpointing: the whole run so far is gone
            expected = progress_at_fail
            unchecked += 1
        assert abs(lost - expected) < 1e-6, (
            f"trial {trial}: lost {lost:.6f}s, want {expected:.6f}s "
            f"(fail at {t_fail:.3f}, interval {interval})"
        )
        worst_err = max(worst_err, abs(lost - expected))
    _verdict(
        "criterion-07 checkpoint-bound",
        True,
        "200 random (work, interval, failure-time) runs: lost work == time "
        f"since last checkpoint, <= one interval (max err {worst_err:.2e}s); "
        f"{unchecked} runs without checkpointing lost exactly their progress",
        t0, 5.0,
    )


# ------------------------------------------------------------ 8. store semantics


def test_criterion_08_store_watch_and_lease_semantics_hold():
    t0 = time.perf_counter()
    rng = random.Random(0xC0FFEE)
    store = CoordinationStore()
    mirror = {}   # key -> value bytes, the expected live view
    holder = {}   # key -> lease_id of the latest write (None if unleased)
    leases = {}   # lease_id -> [granted_at, ttl]
    now = 0.0
    mutations = 0

    watch = store.watch("/", from_revision=1)
    replayed = {}
    drained = 0

    def drain():
        nonlocal drained
        for ev in watch.poll():
            drained += 1
            assert ev.revision == drained  # contiguous, in order, no gaps
            if ev.kind == "put":
                replayed[ev.key] = ev.value
            else:
                assert ev.value is None
                replayed.pop(ev.key, None)

    pool = [f"/acc/{group}/{i}" for group in "abc" for i in range(12)]

    for _ in range(1000):
        now += rng.uniform(0.0, 2.0)
        roll = rng.random()
        if roll < 0.40:
            key = rng.choice(pool)
            value = bytes([rng.randrange(65, 91)]) * rng.randrange(0, 64)
            live = [lid for lid, (granted, ttl) in leases.items() if now < granted + ttl]
            lease_id = rng.choice(live) if live and rng.random() < 0.5 else None
            store.put(key, value, lease_id=lease_id, now=now)
            mirror[key] = value
            holder[key] = lease_id
            mutations += 1
        elif roll < 0.47:
            # oversized writes are refused wholesale: no state, no revision
            before = store.revision
            with pytest.raises(ValueTooLarge):
                store.put(rng.choice(pool), b"x" * (MAX_VALUE_BYTES + 1), now=now)
            assert store.revision == before
        elif roll < 0.54:
            # writes against expired or unknown leases are refused the same way
            dead = [lid for lid, (granted, ttl) in leases.items() if now >= granted + ttl]
            if dead and rng.random() < 0.7:
                lease_id = rng.choice(dead)
            else:
                lease_id = 10_000 + rng.randrange(5)
            before = store.revision
            with pytest.raises(UnknownLease):
                store.put("/acc/refused", b"x", lease_id=lease_id, now=now)
            assert store.revision == before
        elif roll < 0.62:
            key = rng.choice(pool)
            rev = store.delete(key)
            if key in mirror:
                assert rev is not None
                del mirror[key]
                holder.pop(key, None)
                mutations += 1
            else:
                assert rev is None
        elif roll < 0.68:
            prefix = rng.choice(["/acc/a/", "/acc/b/", "/acc/c/1"])
            doomed = sorted(k for k in mirror if k.startswith(prefix))
            assert store.delete_prefix(prefix) == len(doomed)
            for k in doomed:
                del mirror[k]
                holder.pop(k, None)
            mutations += len(doomed)
        elif roll < 0.76:
            ttl = rng.uniform(1.0, 8.0)
            lease_id = store.grant_lease(ttl, now=now)
            assert lease_id not in leases
            leases[lease_id] = [now, ttl]
        elif roll < 0.83:
            if leases:
                # renewing an expired-but-uncollected lease is a legal heartbeat
                lease_id = rng.choice(sorted(leases))
                store.renew_lease(lease_id, now=now)
                leases[lease_id][0] = now
        elif roll < 0.91:
            dead = sorted(
                lid for lid, (granted, ttl) in leases.items() if now >= granted + ttl
            )
            expect = []
            for lid in dead:
                expect.extend(
                    sorted(k for k, h in holder.items() if h == lid and k in mirror)
                )
            assert store.expire_leases(now) == expect
            for lid in dead:
                del leases[lid]
            for k in expect:
                del mirror[k]
                holder.pop(k, None)
            mutations += len(expect)
        else:
            drain()
            assert {k: e["value"].encode() for k, e in store.dump().items()} == mirror
            probe = rng.choice(["/acc/a/", "/acc/", "/acc/b/1"])
            assert store.keys(probe) == sorted(k for k in mirror if k.startswith(probe))

    drain()
    assert store.revision == mutations
    assert replayed == mirror

    # a fresh watch replaying the whole log reconstructs the live view too
    fresh = {}
    for ev in store.watch("/", from_revision=1).poll():
        if ev.kind == "put":
            fresh[ev.key] = ev.value
        else:
            fresh.pop(ev.key, None)
    assert fresh == mirror

    _verdict(
        "criterion-08 store-semantics",
        True,
        f"1000 random ops: revision == {mutations} mutations, watch replay "
        "gap-free and equal to the live view, value cap and lease checks "
        "refused writes without side effects, expiry swept exactly the "
        "expired leases' keys",
        t0, 5.0,
    )


# ------------------------------------------------------------ 9. fault impact


def test_criterion_09_node_outages_stay_contained():
    t0 = time.perf_counter()
    result = replay.fault_scenario().run(seed=0)
    impact = failure_impact(result.counters)
    ok = (
        impact["pods_deleted"] > 0
        and impact["pod_deletion_fraction"] <= 0.05
        and impact["job_requeue_fraction"] <= 0.01
    )
    _verdict(
        "criterion-09 fault-impact",
        ok,
        f"3 node outages over a day: {impact['pods_deleted']} pods deleted "
        f"({100 * impact['pod_deletion_fraction']:.1f}%, want <= 5%), "
        f"requeue fraction {100 * impact['job_requeue_fraction']:.1f}% (want <= 1%)",
        t0, 60.0,
    )


# ------------------------------------------------------------ 10. determinism


def _determinism_cases():
    frag_spread = replay.fragmentation_scenario("pod-spread")
    frag_pack = replay.fragmentation_scenario("pod-pack")
    adv_pod = replay.adversarial_scenario("pod-pack")
    adv_gang = replay.adversarial_scenario("gang")
    # small scenarios also compare full event logs byte for byte
    for scenario in (frag_spread, frag_pack, adv_pod, adv_gang):
        scenario.params.capture_events = True
    return [
        ("fragmentation-spread", frag_spread, 0),
        ("fragmentation-pack", frag_pack, 0),
        ("gang-sweep-2Lx1GPU", replay.gang_sweep_scenario(2, 1, policy="gang"), 7),
        ("pod-sweep-2Lx1GPU", replay.gang_sweep_scenario(2, 1, policy="pod-spread"), 3),
        ("adversarial-pod", adv_pod, 0),
        ("adversarial-gang", adv_gang, 0),
    ]


def test_criterion_10_repeat_runs_are_byte_identical():
    t0 = time.perf_counter()
    compared = []
    for name, scenario, seed in _determinism_cases():
        first = scenario.run(seed=seed)
        second = scenario.run(seed=seed)
        assert first.to_json_bytes() == second.to_json_bytes(), name
        assert first.events_jsonl() == second.events_jsonl(), name
        assert first.statuses_jsonl() == second.statuses_jsonl(), name
        compared.append(name)
    _verdict(
        "criterion-10 determinism",
        len(compared) == 6,
        f"{len(compared)} scenario/seed pairs re-run byte-identical "
        "(results, event logs, status streams)",
        t0, 30.0,
    )
