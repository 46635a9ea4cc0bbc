"""Reference experiments shipped with the package.

Each experiment is a frozen scenario plus the envelope of results it is
expected to reproduce; `checks` in the returned dict says which
expectations held.  The CLI exposes them under `replay-paper` and the
acceptance tests assert the same envelopes.
"""

from __future__ import annotations

import time

from .engine import FaultPlan, SimParams, run_batch
from .metrics import (
    deadlock_free_probability,
    failure_impact,
    queued_over_threshold,
    summarize_batch,
)
from .scenario import Scenario, expand_topology
from .scheduling import SchedulerConfig
from .workload import generate_synthetic

SWEEP_SEEDS = tuple(range(20))

# frozen workload seed: both policies must see the identical trace, and
# the load level keeps the cluster feasible so that long queueing comes
# from fragmentation rather than raw capacity shortfall
_BURSTY_TRACE_SEED = 1
_BURSTY_CONFIG = {
    "scenario": "bursty-days",
    "days": 7,
    "jobs_per_day": 90.0,
    "mix": [
        {"weight": 0.6, "learners": 1, "gpus_per_learner": 1, "gpu_class": "K80",
         "work_duration": [600.0, 3600.0]},
        {"weight": 0.2, "learners": 1, "gpus_per_learner": 2, "gpu_class": "K80",
         "work_duration": [600.0, 3600.0]},
        {"weight": 0.2, "learners": 1, "gpus_per_learner": 4, "gpu_class": "K80",
         "work_duration": [900.0, 5400.0]},
    ],
}

_FAULT_MIX = [
    {"weight": 0.7, "learners": 1, "gpus_per_learner": 1, "gpu_class": "K80",
     "work_duration": [1800.0, 7200.0], "checkpoint_interval": 600.0},
    {"weight": 0.2, "learners": 2, "gpus_per_learner": 1, "gpu_class": "K80",
     "work_duration": [1800.0, 7200.0], "checkpoint_interval": 600.0, "sync": True},
    {"weight": 0.1, "learners": 1, "gpus_per_learner": 2, "gpu_class": "K80",
     "work_duration": [1800.0, 7200.0], "checkpoint_interval": 600.0},
]


def _check(name: str, ok: bool, detail: str) -> dict:
    return {"name": name, "ok": bool(ok), "detail": detail}


def _k80_topology(nodes: int, gpus: int) -> list[dict]:
    return expand_topology({"nodes": nodes, "gpus_per_node": gpus, "gpu_class": "K80"})


# ---------------------------------------------------------------- fragmentation


def fragmentation_scenario(policy: str) -> Scenario:
    """Four 1-GPU jobs then three 4-GPU jobs on four 4-GPU nodes.

    Under Spread the singles land one per node and fragment the cluster
    so no 4-GPU job fits anywhere; under Pack they share one node and
    all three 4-GPU jobs run.
    """
    jobs = []
    for i in range(4):
        jobs.append({"job_id": f"small-{i}", "submit_time": float(i), "learners": 1,
                     "gpus_per_learner": 1, "gpu_class": "K80", "work_duration": 7200.0})
    for i in range(3):
        jobs.append({"job_id": f"large-{i}", "submit_time": 10.0 + i, "learners": 1,
                     "gpus_per_learner": 4, "gpu_class": "K80", "work_duration": 7200.0})
    from .workload import _spec_from_record

    trace = [_spec_from_record(rec, {"K80"}, i + 1) for i, rec in enumerate(jobs)]
    return Scenario(
        topology=_k80_topology(4, 4),
        scheduler=SchedulerConfig(policy=policy),
        faults=FaultPlan(),
        params=SimParams(capture_events=False),
        horizon=120.0,
        name=f"fragmentation-{policy}",
        trace=trace,
    )


def run_fragmentation() -> dict:
    t0 = time.perf_counter()
    placed = {}
    results = {}
    for policy in ("pod-spread", "pod-pack"):
        result = fragmentation_scenario(policy).run(seed=0)
        results[policy] = result
        placed[policy] = sum(
            1 for j in result.jobs
            if j["gpus_per_learner"] == 4 and j["first_fully_placed_at"] is not None
        )
    elapsed = time.perf_counter() - t0
    checks = [
        _check("spread-blocks-4gpu-job", placed["pod-spread"] == 0,
               f"spread placed {placed['pod-spread']} of 3 4-GPU jobs (want 0)"),
        _check("pack-places-all-4gpu-jobs", placed["pod-pack"] == 3,
               f"pack placed {placed['pod-pack']} of 3 4-GPU jobs (want 3)"),
    ]
    return {
        "experiment": "fragmentation",
        "large_jobs_placed": placed,
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
        "results": results,
    }


# ---------------------------------------------------------------- gang sweeps

GANG_WORKLOADS = {
    "2Lx1GPU": (2, 1),
    "2Lx2GPU": (2, 2),
    "4Lx1GPU": (4, 1),
}


def gang_sweep_scenario(
    learners: int,
    gpus_per_learner: int,
    policy: str = "gang",
    order: str = "shuffle",
    horizon: float | None = None,
) -> Scenario:
    """Fifty identical sync jobs racing for 15 nodes x 4 K80."""
    if horizon is None:
        horizon = 18000.0 if policy == "gang" else 9000.0
    return Scenario(
        topology=_k80_topology(15, 4),
        scheduler=SchedulerConfig(policy=policy, pod_queue_order=order),
        faults=FaultPlan(),
        params=SimParams(capture_events=False),
        horizon=horizon,
        name=f"gang-sweep-{learners}x{gpus_per_learner}-{policy}",
        synthetic={
            "scenario": "gang-experiment",
            "n_jobs": 50,
            "learners": learners,
            "gpus_per_learner": gpus_per_learner,
            "work_duration": 3600.0,
        },
    )


def run_gang_policy_sweep(seeds=SWEEP_SEEDS) -> dict:
    """Gang scheduling across every workload shape: no deadlock, ever."""
    t0 = time.perf_counter()
    per_workload = {}
    checks = []
    for label, (learners, gpus) in GANG_WORKLOADS.items():
        scenario = gang_sweep_scenario(learners, gpus, policy="gang")
        results = run_batch(scenario, seeds)
        summary = summarize_batch(results)
        summary["peak_concurrent_per_run"] = [
            r.counters["peak_concurrent_fully_placed"] for r in results
        ]
        per_workload[label] = summary
        checks.append(_check(
            f"gang-{label}-deadlock-free",
            summary["deadlock_free_probability"] == 1.0
            and summary["max_deadlocked_learners"] == 0,
            f"{label}: P(deadlock-free)={summary['deadlock_free_probability']}",
        ))
        checks.append(_check(
            f"gang-{label}-no-idle-holding",
            summary["max_idle_gpu_pct"] == 0.0,
            f"{label}: peak idle {summary['max_idle_gpu_pct']:.1f}% (want 0)",
        ))
    concurrent = set(per_workload["2Lx1GPU"]["peak_concurrent_per_run"])
    checks.append(_check(
        "gang-2Lx1GPU-steady-state-30-jobs",
        concurrent == {30},
        f"peak concurrent fully placed = {sorted(concurrent)} (want exactly 30)",
    ))
    elapsed = time.perf_counter() - t0
    return {
        "experiment": "gang-policy-sweep",
        "workloads": per_workload,
        "seeds": len(seeds),
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
    }


def run_pod_deadlock_sweep(seeds=SWEEP_SEEDS) -> dict:
    """Pod-at-a-time scheduling of the same sync gangs: sometimes the
    queue order wedges partial gangs onto the whole cluster."""
    t0 = time.perf_counter()
    per_workload = {}
    for label in ("2Lx1GPU", "4Lx1GPU"):
        learners, gpus = GANG_WORKLOADS[label]
        scenario = gang_sweep_scenario(learners, gpus, policy="pod-spread")
        results = run_batch(scenario, seeds)
        per_workload[label] = summarize_batch(results)
    p_free = per_workload["2Lx1GPU"]["deadlock_free_probability"]
    max_idle = per_workload["4Lx1GPU"]["max_idle_gpu_pct"]
    any_deadlock = any(
        w["max_deadlocked_learners"] > 0 for w in per_workload.values()
    )
    checks = [
        _check("pod-some-seed-deadlocks", any_deadlock,
               "at least one seed must produce a deadlocked learner"),
        _check("pod-2Lx1GPU-deadlock-free-probability", 0.2 <= p_free <= 0.6,
               f"P(deadlock-free)={p_free:.2f} (want within [0.2, 0.6])"),
        _check("pod-4Lx1GPU-idle-35pct", max_idle >= 35.0,
               f"peak idle GPUs {max_idle:.1f}% (want >= 35% in some seed)"),
    ]
    elapsed = time.perf_counter() - t0
    return {
        "experiment": "pod-deadlock-sweep",
        "workloads": per_workload,
        "seeds": len(seeds),
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
    }


# ---------------------------------------------------------------- adversarial


def adversarial_scenario(policy: str) -> Scenario:
    """Four 2-learner x 2-GPU jobs on four 2-GPU nodes with the pod
    queue interleaved round-robin: every job gets exactly one pod placed
    and the cluster wedges completely."""
    return Scenario(
        topology=_k80_topology(4, 2),
        scheduler=SchedulerConfig(policy=policy, pod_queue_order="round-robin"),
        faults=FaultPlan(),
        params=SimParams(capture_events=False),
        horizon=1500.0,
        name=f"adversarial-{policy}",
        synthetic={
            "scenario": "gang-experiment",
            "n_jobs": 4,
            "learners": 2,
            "gpus_per_learner": 2,
            "work_duration": 3600.0,
        },
    )


def run_adversarial_case() -> dict:
    t0 = time.perf_counter()
    pod = adversarial_scenario("pod-pack").run(seed=0)
    gang = adversarial_scenario("gang").run(seed=0)
    gang_running = sum(1 for j in gang.jobs if j["first_fully_placed_at"] is not None)
    gang_queued = sum(1 for j in gang.jobs if j["final_status"] == "QUEUED")
    checks = [
        _check("pod-wedges-4-learners", pod.peak_deadlocked_learners == 4,
               f"pod policy deadlocked learners = {pod.peak_deadlocked_learners} (want 4)"),
        _check("pod-idles-all-8-gpus", pod.peak_stuck_gpus == 8,
               f"pod policy idle GPUs = {pod.peak_stuck_gpus}/8 (want 8)"),
        _check("gang-places-2-queues-2", gang_running == 2 and gang_queued == 2,
               f"gang policy ran {gang_running}, queued {gang_queued} (want 2 and 2)"),
        _check("gang-never-deadlocks", gang.peak_deadlocked_learners == 0,
               f"gang policy deadlocked learners = {gang.peak_deadlocked_learners}"),
    ]
    elapsed = time.perf_counter() - t0
    return {
        "experiment": "adversarial-interleave",
        "pod": {"deadlocked_learners": pod.peak_deadlocked_learners,
                "stuck_gpus": pod.peak_stuck_gpus,
                "deadlock_peaks": pod.deadlock_peaks},
        "gang": {"running": gang_running, "queued": gang_queued},
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
    }


def run_gang() -> dict:
    """Everything about gang scheduling: the guarantee, the failure mode
    it prevents, and the adversarial worst case."""
    gang = run_gang_policy_sweep()
    pod = run_pod_deadlock_sweep()
    adversarial = run_adversarial_case()
    checks = gang["checks"] + pod["checks"] + adversarial["checks"]
    return {
        "experiment": "gang",
        "gang_policy": gang,
        "pod_policy": pod,
        "adversarial": adversarial,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
    }


# ---------------------------------------------------------------- spread vs pack


def spread_vs_pack_scenario(policy: str) -> Scenario:
    """One week of bursty arrivals against 10 nodes x 4 K80."""
    trace = generate_synthetic(_BURSTY_CONFIG, _BURSTY_TRACE_SEED)
    return Scenario(
        topology=_k80_topology(10, 4),
        scheduler=SchedulerConfig(policy=policy),
        faults=FaultPlan(),
        params=SimParams(capture_events=False),
        horizon=7 * 86400.0,
        name=f"spread-vs-pack-{policy}",
        trace=trace,
    )


def run_spread_vs_pack(threshold_s: float = 900.0) -> dict:
    t0 = time.perf_counter()
    late = {}
    results = {}
    for policy in ("pod-spread", "pod-pack"):
        result = spread_vs_pack_scenario(policy).run(seed=0)
        results[policy] = result
        late[policy] = len(queued_over_threshold(result.jobs, result.horizon, threshold_s))
    spread_late, pack_late = late["pod-spread"], late["pod-pack"]
    checks = [
        _check("spread-produces-queueing", spread_late > 0,
               f"spread left {spread_late} jobs queued > {threshold_s:.0f}s"),
        _check("pack-halves-long-queueing", pack_late <= 0.5 * spread_late,
               f"pack {pack_late} vs spread {spread_late} jobs queued > "
               f"{threshold_s:.0f}s (want pack <= half)"),
    ]
    elapsed = time.perf_counter() - t0
    return {
        "experiment": "spread-vs-pack",
        "threshold_s": threshold_s,
        "jobs": len(results["pod-spread"].jobs),
        "queued_over_threshold": late,
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
        "results": results,
    }


# ---------------------------------------------------------------- faults


def fault_scenario() -> Scenario:
    """A day of Poisson arrivals on 15 nodes x 4 K80 with three node
    outages spread across the day."""
    return Scenario(
        topology=_k80_topology(15, 4),
        scheduler=SchedulerConfig(policy="gang"),
        faults=FaultPlan(node_failures=[
            # low-id nodes carry the most load under the pack bias, so
            # these outages actually evict pods
            (21600.0, "n00", 600.0),
            (50400.0, "n01", 600.0),
            (79200.0, "n02", 600.0),
        ]),
        params=SimParams(capture_events=False),
        horizon=100800.0,
        name="fault-impact",
        synthetic={
            "scenario": "poisson",
            "rate_per_hour": 12.0,
            "duration_s": 86400.0,
            "mix": _FAULT_MIX,
        },
    )


def run_faults(seed: int = 0) -> dict:
    t0 = time.perf_counter()
    result = fault_scenario().run(seed=seed)
    impact = failure_impact(result.counters)
    checks = [
        _check("failures-actually-deleted-pods", impact["pods_deleted"] > 0,
               f"{impact['pods_deleted']} pods deleted by node failures"),
        _check("pod-deletions-at-most-5pct",
               impact["pod_deletion_fraction"] <= 0.05,
               f"deleted fraction {impact['pod_deletion_fraction']:.3f} (want <= 0.05)"),
        _check("whole-job-requeues-at-most-1pct",
               impact["job_requeue_fraction"] <= 0.01,
               f"requeue fraction {impact['job_requeue_fraction']:.3f} (want <= 0.01)"),
    ]
    elapsed = time.perf_counter() - t0
    return {
        "experiment": "faults",
        "impact": impact,
        "counters": result.counters,
        "elapsed_s": elapsed,
        "checks": checks,
        "ok": all(c["ok"] for c in checks),
        "result": result,
    }


EXPERIMENTS = {
    "fragmentation": run_fragmentation,
    "gang": run_gang,
    "spread-vs-pack": run_spread_vs_pack,
    "faults": run_faults,
}
