"""Metrics over one run or a batch of runs.

Everything here consumes the plain-dict job rows and counters carried by
a SimResult, so results round-trip through JSON without losing the
ability to compute metrics on them.
"""

from __future__ import annotations

DEFAULT_QUEUE_THRESHOLD_S = 900.0   # 15 minutes
DAY_S = 86400.0


def wait_time(job: dict, horizon: float) -> float:
    """Seconds from submission until the job was first fully placed.

    A job never fully placed by the end of the run has waited the whole
    remaining window.
    """
    placed_at = job.get("first_fully_placed_at")
    if placed_at is None:
        return max(0.0, horizon - job["submit_time"])
    return placed_at - job["submit_time"]


def wait_times(jobs: list[dict], horizon: float) -> list[float]:
    return [wait_time(j, horizon) for j in jobs]


def queued_over_threshold(
    jobs: list[dict], horizon: float, threshold_s: float = DEFAULT_QUEUE_THRESHOLD_S
) -> list[str]:
    """Ids of jobs that sat in the queue longer than the threshold."""
    return [j["job_id"] for j in jobs if wait_time(j, horizon) > threshold_s]


def queued_over_threshold_by_day(
    jobs: list[dict],
    horizon: float,
    threshold_s: float = DEFAULT_QUEUE_THRESHOLD_S,
    day_s: float = DAY_S,
) -> dict[int, int]:
    """Per-day counts of jobs queued longer than the threshold, keyed by
    the day the job was submitted.  Days with no such jobs are omitted."""
    out: dict[int, int] = {}
    for j in jobs:
        if wait_time(j, horizon) > threshold_s:
            day = int(j["submit_time"] // day_s)
            out[day] = out.get(day, 0) + 1
    return dict(sorted(out.items()))


def failure_impact(counters: dict) -> dict:
    """Fractions describing how disruptive node failures were.

    pod_deletion_fraction: pods deleted by node failures over all pod
    terminations (completed + deleted + otherwise released).
    job_requeue_fraction: jobs requeued from scratch over all arrivals.
    """
    deleted = counters["pods_deleted_node_failure"]
    terminations = (
        counters["pods_completed"]
        + counters["pods_deleted_node_failure"]
        + counters["pods_released_other"]
    )
    arrivals = counters["arrivals"]
    return {
        "pods_deleted": deleted,
        "pod_terminations": terminations,
        "pod_deletion_fraction": deleted / terminations if terminations else 0.0,
        "jobs_requeued": counters["jobs_requeued"],
        "job_requeue_fraction": counters["jobs_requeued"] / arrivals if arrivals else 0.0,
    }


def empirical_cdf(values) -> list[tuple[float, float]]:
    """Empirical CDF as (value, P(X <= value)) pairs over unique values."""
    ordered = sorted(values)
    n = len(ordered)
    if n == 0:
        return []
    out: list[tuple[float, float]] = []
    for i, v in enumerate(ordered, start=1):
        if i == n or ordered[i] != v:
            out.append((v, i / n))
    return out


def cdf_at(cdf: list[tuple[float, float]], x: float) -> float:
    """P(X <= x) for an empirical_cdf list."""
    p = 0.0
    for value, prob in cdf:
        if value <= x:
            p = prob
        else:
            break
    return p


# ---------------------------------------------------------------- batches


def deadlock_free_probability(results) -> float:
    """Fraction of runs that never saw a deadlocked learner."""
    runs = list(results)
    if not runs:
        return 0.0
    free = sum(1 for r in runs if r.peak_deadlocked_learners == 0)
    return free / len(runs)


def summarize_batch(results) -> dict:
    """Cross-seed view of deadlock pressure and idle GPUs."""
    runs = list(results)
    peaks = [r.peak_deadlocked_learners for r in runs]
    idle = [r.idle_gpu_pct_peak for r in runs]
    return {
        "runs": len(runs),
        "deadlock_free_probability": deadlock_free_probability(runs),
        "deadlocked_learners_per_run": peaks,
        "deadlocked_learners_cdf": empirical_cdf(peaks),
        "max_deadlocked_learners": max(peaks, default=0),
        "idle_gpu_pct_per_run": idle,
        "max_idle_gpu_pct": max(idle, default=0.0),
    }


# ---------------------------------------------------------------- usage


def gpu_seconds_allocated(result) -> float:
    """Integrate allocated GPUs over time from the node timeline."""
    last: dict[str, tuple[float, int]] = {}
    total = 0.0
    for t, node_id, gpus in result.node_timeline:
        if node_id in last:
            t0, g0 = last[node_id]
            total += g0 * (t - t0)
        last[node_id] = (t, gpus)
    for t0, g0 in last.values():
        total += g0 * (result.horizon - t0)
    return total


def mean_gpu_utilization(result) -> float:
    denom = result.total_gpus * result.horizon
    return gpu_seconds_allocated(result) / denom if denom else 0.0


def completion_stats(jobs: list[dict]) -> dict:
    done = [j for j in jobs if j["final_status"] == "COMPLETED"]
    spans = [j["completed_at"] - j["submit_time"] for j in done]
    return {
        "jobs": len(jobs),
        "completed": len(done),
        "failed": sum(1 for j in jobs if j["final_status"] == "FAILED"),
        "mean_span_s": sum(spans) / len(spans) if spans else 0.0,
        "max_span_s": max(spans, default=0.0),
        "total_lost_work_s": sum(j["lost_work_total"] for j in jobs),
        "total_restarts": sum(j["restarts"] for j in jobs),
    }
