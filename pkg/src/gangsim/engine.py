"""Deterministic discrete-event simulation of the whole platform.

Events are ordered by (time, insertion sequence) so identical inputs
replay identically, byte for byte.  All randomness flows through named
substreams derived from the run seed: queue shuffling, gang sampling,
component recovery delays and fault realization never share state.

The flow per job: arrival enqueues it, dispatch grants a placement
(whole gang under the gang policy, pod by pod otherwise), a five-step
deployment with rollback-on-crash brings the pods up, then the job
downloads data, processes (with optional checkpoints), stores results
and completes.  Node failures evict pods, push replacement requests to
the head of the queue and rewind progress to the last checkpoint; a
replacement that cannot land within a grace period requeues the whole
job.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from dataclasses import dataclass, field

from .cluster import Cluster, ClusterError
from .kvstore import CoordinationStore
from .lifecycle import (
    DEFAULT_DEPLOY_STEP_S,
    DEFAULT_MAX_DEPLOY_RETRIES,
    DEFAULT_REPLACEMENT_GRACE_S,
    DEPLOY_STEP_NAMES,
    GuardianDeploy,
    JobRecord,
    JobStatus,
    LEARNER_COMPLETED,
    LEARNER_DOWNLOADING,
    LEARNER_PROCESSING,
    LEARNER_STORING,
    component_recovery_delay,
    controller_tick,
    handle_node_failure,
    job_prefix,
    learner_key,
    take_checkpoint,
)
from .scheduling import (
    POD_POLICIES,
    Policy,
    SchedulerConfig,
    SchedulerQueue,
    detect_deadlocks,
    dispatch,
)
from .workload import DEFAULT_DOWNLOAD_S, DEFAULT_STORE_S, JobSpec

log = logging.getLogger("gangsim")

# event kinds
JOB_ARRIVAL = "JobArrival"
DISPATCH_TICK = "DispatchTick"
DEPLOY_STEP = "DeployStep"
PHASE_COMPLETE = "PhaseComplete"
CHECKPOINT_DUE = "CheckpointDue"
NODE_FAIL = "NodeFail"
NODE_RECOVER = "NodeRecover"
LEASE_EXPIRY = "LeaseExpiry"
DEADLOCK_SCAN = "DeadlockScan"
USER_HALT = "UserHalt"
USER_RESUME = "UserResume"
SIM_END = "SimEnd"


class ConfigError(Exception):
    """Inconsistent or unusable run inputs."""


class SimInvariantError(Exception):
    """Internal bookkeeping drifted; the run result cannot be trusted."""


class BatchError(Exception):
    """One or more runs of a batch raised; siblings completed."""

    def __init__(self, errors: dict, results: list):
        super().__init__(
            "batch failed for seeds "
            + ", ".join(f"{s}: {e}" for s, e in sorted(errors.items()))
        )
        self.errors = errors
        self.results = results


@dataclass
class SimParams:
    """Engine knobs that are not scheduler policy."""

    dispatch_period_s: float = 10.0
    deadlock_scan_s: float = 60.0
    deploy_step_s: float = DEFAULT_DEPLOY_STEP_S
    max_deploy_retries: int = DEFAULT_MAX_DEPLOY_RETRIES
    download_s: float = DEFAULT_DOWNLOAD_S
    store_s: float = DEFAULT_STORE_S
    checkpoint_cost_s: float = 0.0
    replacement_grace_s: float = DEFAULT_REPLACEMENT_GRACE_S
    learner_lease_ttl_s: float = 0.0   # 0 disables learner liveness leases
    capture_events: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown engine params: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class FaultPlan:
    """What breaks, and when.

    node_failures are scheduled (t, node_id, down_s) outages; mtbf_s
    adds per-node random outages realized deterministically from the run
    seed; deploy_crashes are (job_id, attempt, step_index) triples that
    crash the deployer right after that step's effect lands.
    """

    node_failures: list[tuple[float, str, float]] = field(default_factory=list)
    deploy_crashes: set = field(default_factory=set)
    mtbf_s: float | None = None
    mtbf_down_s: tuple[float, float] = (120.0, 300.0)

    def deploy_crash(self, job_id: str, attempt: int, step: int) -> bool:
        return (job_id, attempt, step) in self.deploy_crashes

    @classmethod
    def from_entries(cls, entries: list[dict]) -> "FaultPlan":
        plan = cls()
        for e in entries:
            kind = e.get("kind")
            try:
                if kind == "node-fail":
                    plan.node_failures.append(
                        (float(e["t"]), str(e["target"]), float(e.get("down_s", 300.0)))
                    )
                elif kind == "deploy-crash":
                    plan.deploy_crashes.add(
                        (str(e["target"]), int(e.get("attempt", 1)), int(e["step"]))
                    )
                elif kind == "mtbf":
                    plan.mtbf_s = float(e["mtbf_s"])
                    down = e.get("down_s", [120.0, 300.0])
                    plan.mtbf_down_s = (float(down[0]), float(down[1]))
                else:
                    raise ConfigError(f"unknown fault entry kind {kind!r}")
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise ConfigError(f"bad fault entry {e!r}: {exc}") from exc
        return plan


COUNTER_NAMES = (
    "arrivals",
    "jobs_completed",
    "jobs_failed",
    "jobs_requeued",
    "pods_completed",
    "pods_deleted_node_failure",
    "pods_released_other",
    "deploy_rollbacks",
    "node_failures",
    "halts",
    "resumes",
    "lease_expirations",
)


@dataclass
class SimResult:
    seed: int
    horizon: float
    policy: str
    total_gpus: int
    jobs: list[dict]
    counters: dict
    node_timeline: list[tuple[float, str, int]]
    stuck_samples: list[tuple[float, int, int, int, int]]
    deadlock_peaks: dict[str, int]
    event_log: list[dict]
    store_dump: dict | None = None

    # ------------------------------------------------ derived views

    @property
    def peak_deadlocked_learners(self) -> int:
        return max((row[3] for row in self.stuck_samples), default=0)

    @property
    def peak_stuck_gpus(self) -> int:
        return max((row[2] for row in self.stuck_samples), default=0)

    @property
    def idle_gpu_pct_peak(self) -> float:
        if self.total_gpus == 0:
            return 0.0
        return 100.0 * self.peak_stuck_gpus / self.total_gpus

    def job(self, job_id: str) -> dict:
        for j in self.jobs:
            if j["job_id"] == job_id:
                return j
        raise KeyError(job_id)

    # ------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "horizon": self.horizon,
            "policy": self.policy,
            "total_gpus": self.total_gpus,
            "counters": self.counters,
            "peak_deadlocked_learners": self.peak_deadlocked_learners,
            "peak_stuck_gpus": self.peak_stuck_gpus,
            "idle_gpu_pct_peak": self.idle_gpu_pct_peak,
            "deadlock_peaks": self.deadlock_peaks,
            "jobs": self.jobs,
            "node_timeline": self.node_timeline,
            "stuck_samples": self.stuck_samples,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")

    def events_jsonl(self) -> bytes:
        lines = [json.dumps(e, separators=(",", ":")) for e in self.event_log]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    def statuses_jsonl(self) -> bytes:
        lines = []
        for j in self.jobs:
            for t, status in j["status_history"]:
                lines.append(
                    json.dumps({"job_id": j["job_id"], "t": t, "status": status},
                               separators=(",", ":"))
                )
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    def write_exports(self, out_dir, fmt: str = "json") -> list[str]:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        (out / "result.json").write_bytes(self.to_json_bytes())
        written.append("result.json")
        (out / "events.jsonl").write_bytes(self.events_jsonl())
        written.append("events.jsonl")
        (out / "statuses.jsonl").write_bytes(self.statuses_jsonl())
        written.append("statuses.jsonl")
        if self.store_dump is not None:
            (out / "store_dump.json").write_bytes(
                json.dumps(self.store_dump, separators=(",", ":"), sort_keys=True).encode()
            )
            written.append("store_dump.json")
        return [str(out / name) for name in written]


# ---------------------------------------------------------------- runtime


@dataclass
class _JobRuntime:
    record: JobRecord
    epoch: int = 0
    learner_epoch: list[int] = field(default_factory=list)
    deploy: GuardianDeploy | None = None
    rate: float = 0.0
    anchor_t: float = 0.0
    fully_placed: bool = False
    pending_replacements: dict[int, float] = field(default_factory=dict)
    outstanding: set = field(default_factory=set)   # evicted learners not re-placed yet
    grace_deadline: float | None = None
    lease_ids: dict[int, int] = field(default_factory=dict)

    @property
    def spec(self) -> JobSpec:
        return self.record.spec

    def gang(self):
        return self.spec.gang()


class Simulation:
    def __init__(
        self,
        topology: list[dict],
        workload: list[JobSpec],
        scheduler: SchedulerConfig | None = None,
        fault_plan: FaultPlan | None = None,
        seed: int = 0,
        horizon: float = 86400.0,
        params: SimParams | None = None,
        user_events: list[tuple[float, str, str]] | None = None,
    ):
        self.cluster = Cluster.from_topology(topology)
        self.workload = list(workload)
        self.config = scheduler or SchedulerConfig()
        self.faults = fault_plan or FaultPlan()
        self.seed = seed
        self.horizon = float(horizon)
        self.params = params or SimParams()
        self.user_events = list(user_events or [])
        self._validate()

        self.store = CoordinationStore()
        self.queue = SchedulerQueue()
        self.jobs: dict[str, _JobRuntime] = {}
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._rngs: dict[str, random.Random] = {}
        self._jitter_scale: float | None = None
        self._periodic_tick_armed = False
        self._scan_armed = False
        self._concurrent_full = 0
        self._peak_concurrent_full = 0
        self._counters = {name: 0 for name in COUNTER_NAMES}
        self._event_log: list[dict] = []
        self._node_timeline: list[tuple[float, str, int]] = []
        self._stuck_samples: list[tuple[float, int, int, int, int]] = []
        self._deadlock_peaks: dict[str, int] = {}
        self._finished = False

    # ------------------------------------------------ setup

    def _validate(self) -> None:
        if not self.cluster.nodes:
            raise ConfigError("topology has no nodes")
        if not self.workload:
            raise ConfigError("workload is empty")
        classes = self.cluster.gpu_classes()
        max_submit = 0.0
        seen = set()
        for spec in self.workload:
            if spec.job_id in seen:
                raise ConfigError(f"duplicate job_id {spec.job_id!r} in workload")
            seen.add(spec.job_id)
            if spec.gpu_class not in classes:
                raise ConfigError(
                    f"{spec.job_id} wants GPU class {spec.gpu_class!r}, "
                    f"cluster only has {sorted(classes)}"
                )
            max_submit = max(max_submit, spec.submit_time)
        if self.horizon <= max_submit:
            raise ConfigError(
                f"horizon {self.horizon} does not cover last submit time {max_submit}"
            )
        for t, node_id, _down in self.faults.node_failures:
            if node_id not in self.cluster.nodes:
                raise ConfigError(f"fault plan targets unknown node {node_id!r}")
            if t < 0:
                raise ConfigError("fault times must be >= 0")

    def rng(self, name: str) -> random.Random:
        if name not in self._rngs:
            self._rngs[name] = random.Random(f"{self.seed}:{name}")
        return self._rngs[name]

    def _push(self, t: float, kind: str, **payload) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, payload))

    # ------------------------------------------------ main loop

    def run(self) -> SimResult:
        for spec in self.workload:
            self._push(spec.submit_time, JOB_ARRIVAL, job_id=spec.job_id)
        for t, node_id, down_s in sorted(self.faults.node_failures):
            if t < self.horizon:
                self._push(t, NODE_FAIL, node_id=node_id, down_s=down_s)
        self._realize_mtbf_failures()
        for t, kind, job_id in sorted(self.user_events):
            if kind not in ("halt", "resume"):
                raise ConfigError(f"unknown user event kind {kind!r}")
            self._push(t, USER_HALT if kind == "halt" else USER_RESUME, job_id=job_id)
        self._push(self.horizon, SIM_END)

        handlers = {
            JOB_ARRIVAL: self._on_arrival,
            DISPATCH_TICK: self._on_dispatch,
            DEPLOY_STEP: self._on_deploy_step,
            PHASE_COMPLETE: self._on_phase_complete,
            CHECKPOINT_DUE: self._on_checkpoint,
            NODE_FAIL: self._on_node_fail,
            NODE_RECOVER: self._on_node_recover,
            LEASE_EXPIRY: self._on_lease_expiry,
            DEADLOCK_SCAN: self._on_deadlock_scan,
            USER_HALT: self._on_halt,
            USER_RESUME: self._on_resume,
        }
        while self._heap:
            t, seq, kind, payload = heapq.heappop(self._heap)
            self.now = t
            if kind == SIM_END:
                self._log_event(t, seq, kind, {})
                break
            detail = handlers[kind](t, payload) or {}
            self._log_event(t, seq, kind, {**payload, **detail})
        return self._finalize()

    def _log_event(self, t, seq, kind, payload) -> None:
        if not self.params.capture_events:
            return
        row = {"t": t, "seq": seq, "kind": kind}
        for k, v in payload.items():
            if isinstance(v, (str, int, float, bool)) or v is None:
                row[k] = v
        self._event_log.append(row)

    def _realize_mtbf_failures(self) -> None:
        if self.faults.mtbf_s is None:
            return
        rng = self.rng("faults")
        lo, hi = self.faults.mtbf_down_s
        for node_id in sorted(self.cluster.nodes):
            t = rng.expovariate(1.0 / self.faults.mtbf_s)
            while t < self.horizon:
                down = rng.uniform(lo, hi)
                self._push(t, NODE_FAIL, node_id=node_id, down_s=down)
                t += down + rng.expovariate(1.0 / self.faults.mtbf_s)

    # ------------------------------------------------ progress accounting

    def _fold_progress(self, rt: _JobRuntime, now: float) -> None:
        if rt.rate > 0.0:
            elapsed = max(0.0, now - rt.anchor_t)
            rt.record.progress = min(
                rt.spec.work_duration, rt.record.progress + rt.rate * elapsed
            )
        rt.anchor_t = now

    def _current_rate(self, rt: _JobRuntime) -> float:
        if rt.record.status is not JobStatus.PROCESSING:
            return 0.0
        statuses = [
            self.store.get(learner_key(rt.record.job_id, i))
            for i in range(rt.spec.learners)
        ]
        processing = sum(1 for s in statuses if s == LEARNER_PROCESSING)
        if rt.spec.sync:
            return 1.0 if processing == rt.spec.learners else 0.0
        return processing / rt.spec.learners

    def _reschedule_progress(self, rt: _JobRuntime, now: float, resume_at: float | None = None) -> None:
        """Re-derive the progress rate and re-arm completion/checkpoint events."""
        self._fold_progress(rt, now)
        rt.epoch += 1
        rt.rate = self._current_rate(rt)
        if resume_at is not None:
            rt.anchor_t = resume_at
        if rt.rate <= 0.0:
            return
        record = rt.record
        remaining = rt.spec.work_duration - record.progress
        t_done = rt.anchor_t + remaining / rt.rate
        self._push(t_done, PHASE_COMPLETE, job_id=record.job_id, phase="processing",
                   epoch=rt.epoch)
        interval = rt.spec.checkpoint_interval
        if interval > 0:
            k = int(record.progress / interval + 1e-9) + 1
            target = k * interval
            if target < rt.spec.work_duration - 1e-9:
                t_cp = rt.anchor_t + (target - record.progress) / rt.rate
                self._push(t_cp, CHECKPOINT_DUE, job_id=record.job_id, epoch=rt.epoch,
                           target=target)

    # ------------------------------------------------ placement bookkeeping

    def _record_alloc_change(self, now: float, node_ids) -> None:
        for node_id in sorted(set(node_ids)):
            self._node_timeline.append(
                (now, node_id, self.cluster.node(node_id).allocated.gpus)
            )

    def _update_fully_placed(self, rt: _JobRuntime, now: float) -> None:
        record = rt.record
        full = record.placed_count() == rt.spec.learners
        if full and not rt.fully_placed:
            rt.fully_placed = True
            self._concurrent_full += 1
            self._peak_concurrent_full = max(self._peak_concurrent_full, self._concurrent_full)
            if record.first_fully_placed_at is None:
                record.first_fully_placed_at = now
        elif not full and rt.fully_placed:
            rt.fully_placed = False
            self._concurrent_full -= 1
        partial = rt.spec.sync and record.is_partially_placed()
        if partial and record.partial_since is None:
            record.partial_since = now
        elif not partial:
            record.partial_since = None

    def _sample_stuck(self, now: float) -> None:
        stuck_l = stuck_g = dead_l = dead_g = 0
        timeout = self.config.deadlock_timeout_s
        for rt in self.jobs.values():
            record = rt.record
            if not rt.spec.sync or record.partial_since is None:
                continue
            placed = record.placed_count()
            gpus = placed * rt.spec.gpus_per_learner
            stuck_l += placed
            stuck_g += gpus
            if now - record.partial_since > timeout:
                dead_l += placed
                dead_g += gpus
                prev = self._deadlock_peaks.get(record.job_id, 0)
                if placed > prev:
                    self._deadlock_peaks[record.job_id] = placed
        row = (now, stuck_l, stuck_g, dead_l, dead_g)
        if not self._stuck_samples or self._stuck_samples[-1][1:] != row[1:]:
            self._stuck_samples.append(row)
        if stuck_l and not self._scan_armed:
            self._scan_armed = True
            self._push(now + self.params.deadlock_scan_s, DEADLOCK_SCAN)

    # ------------------------------------------------ queueing helpers

    def _enqueue_job(self, rt: _JobRuntime, now: float) -> None:
        spec = rt.spec
        if self.config.policy in POD_POLICIES:
            shuffled = self.config.pod_queue_order == "shuffle"
            jitter_scale = self._jitter_for_run() if shuffled else 0.0
            rng = self.rng("shuffle")
            for i in range(spec.learners):
                jitter = rng.uniform(0.0, jitter_scale) if jitter_scale > 0 else 0.0
                self.queue.push_pod(
                    spec.job_id, i, spec.demand, spec.submit_time,
                    self.config.pod_queue_order, jitter,
                )
        else:
            self.queue.push_gang(rt.gang(), spec.submit_time)

    def _jitter_for_run(self) -> float:
        # drawn once per run: some runs see an orderly queue, others a
        # progressively more scrambled one
        if self._jitter_scale is None:
            rng = self.rng("shuffle")
            if rng.random() < self.config.ordered_queue_fraction:
                self._jitter_scale = 0.0
            else:
                self._jitter_scale = rng.uniform(2.0, self.config.max_shuffle_jitter)
        return self._jitter_scale

    def _arm_periodic_tick(self, now: float) -> None:
        if not self._periodic_tick_armed and len(self.queue):
            self._periodic_tick_armed = True
            self._push(now + self.params.dispatch_period_s, DISPATCH_TICK, periodic=True)

    # ------------------------------------------------ handlers

    def _on_arrival(self, now: float, payload: dict) -> dict:
        job_id = payload["job_id"]
        spec = next(s for s in self.workload if s.job_id == job_id)
        record = JobRecord(spec=spec)
        rt = _JobRuntime(record=record, learner_epoch=[0] * spec.learners)
        self.jobs[job_id] = rt
        self._counters["arrivals"] += 1
        self._enqueue_job(rt, now)
        self._push(now, DISPATCH_TICK)
        return {}

    def _on_dispatch(self, now: float, payload: dict) -> dict:
        if payload.get("periodic"):
            self._periodic_tick_armed = False
        self._expire_graces(now)
        self._mature_replacements(now)
        materialized_for = (lambda gang: set()) if self.config.policy is Policy.GANG else None
        decisions = dispatch(
            self.queue, self.cluster, self.config, now, self.rng("sampling"),
            materialized_for=materialized_for,
        )
        touched_nodes: list[str] = []
        for d in decisions:
            rt = self.jobs[d.job_id]
            if d.kind == "gang":
                # held as reservations; allocation lands with the deploy
                self._on_gang_granted(rt, d.mapping, now)
            else:
                learner, node_id = next(iter(d.mapping.items()))
                self._on_pod_placed(rt, learner, node_id, now,
                                    is_replacement=(d.kind == "replacement"))
                touched_nodes.append(node_id)
        if touched_nodes:
            self._record_alloc_change(now, touched_nodes)
        if decisions:
            self._sample_stuck(now)
        self._arm_periodic_tick(now)
        return {"placed": len(decisions), "queued": len(self.queue)}

    def _expire_graces(self, now: float) -> None:
        for job_id in sorted(self.jobs):
            rt = self.jobs[job_id]
            if rt.grace_deadline is not None and now >= rt.grace_deadline and rt.outstanding:
                log.info("%s: replacement grace expired, requeueing whole job", job_id)
                self._requeue_whole(rt, now, reason="replacement-grace")

    def _mature_replacements(self, now: float) -> None:
        for job_id in sorted(self.jobs):
            rt = self.jobs[job_id]
            ready = sorted(
                i for i, t_avail in rt.pending_replacements.items() if t_avail <= now
            )
            for i in ready:
                del rt.pending_replacements[i]
                self.queue.push_replacement(job_id, i, rt.spec.demand)

    def _on_gang_granted(self, rt: _JobRuntime, mapping: dict, now: float) -> None:
        record = rt.record
        if record.status is JobStatus.QUEUED:
            record.transition(now, JobStatus.DEPLOYING)
        # reservations hold the capacity; deployment materializes them
        rt.deploy = GuardianDeploy(
            record, mapping, self.cluster, self.store,
            materialize=True, max_retries=self.params.max_deploy_retries,
        )
        record.deploy_attempts = 1
        rt.epoch += 1
        self._push(now + self.params.deploy_step_s, DEPLOY_STEP,
                   job_id=record.job_id, epoch=rt.epoch)

    def _on_pod_placed(
        self, rt: _JobRuntime, learner: int, node_id: str, now: float, is_replacement: bool
    ) -> None:
        record = rt.record
        record.placements[learner] = node_id
        if is_replacement:
            rt.outstanding.discard(learner)
            if not rt.outstanding and not rt.pending_replacements:
                rt.grace_deadline = None
            rt.learner_epoch[learner] += 1
            self._restart_learner(rt, learner, now)
        else:
            if record.status is JobStatus.QUEUED:
                record.transition(now, JobStatus.DEPLOYING)
            if record.placed_count() == rt.spec.learners and rt.deploy is None:
                record.deploy_attempts = 1
                rt.deploy = GuardianDeploy(
                    record, dict(record.placements), self.cluster, self.store,
                    materialize=False, max_retries=self.params.max_deploy_retries,
                )
                rt.epoch += 1
                self._push(now + self.params.deploy_step_s, DEPLOY_STEP,
                           job_id=record.job_id, epoch=rt.epoch)
        self._update_fully_placed(rt, now)

    def _restart_learner(self, rt: _JobRuntime, learner: int, now: float) -> None:
        """Bring one replaced learner back through its data phases."""
        job_id = rt.record.job_id
        status = rt.record.status
        if status is JobStatus.STORING:
            self._put_learner(rt, learner, LEARNER_STORING, now)
            # the interrupted result upload restarts in full
            rt.epoch += 1
            self._push(now + self.params.store_s, PHASE_COMPLETE,
                       job_id=job_id, phase="store", epoch=rt.epoch)
        else:
            self._put_learner(rt, learner, LEARNER_DOWNLOADING, now)
            self._push(now + self.params.download_s, PHASE_COMPLETE,
                       job_id=job_id, phase="download", learner=learner,
                       learner_epoch=rt.learner_epoch[learner])

    def _on_deploy_step(self, now: float, payload: dict) -> dict:
        rt = self.jobs[payload["job_id"]]
        if payload["epoch"] != rt.epoch or rt.deploy is None:
            return {"stale": True}
        deploy = rt.deploy
        step_index = deploy.next_step
        attempt = deploy.attempt
        try:
            step_name = deploy.apply_step(now)
        except ClusterError as exc:
            # granted nodes changed under us (failure mid-deploy)
            log.info("%s: deploy aborted (%s)", deploy.job_id, exc)
            deploy.abort()
            rt.deploy = None
            self._requeue_whole(rt, now, reason="deploy-aborted")
            return {"step": step_index, "aborted": True}
        detail = {"step": step_name, "attempt": attempt}
        if self.faults.deploy_crash(deploy.job_id, attempt, step_index):
            self._counters["deploy_rollbacks"] += 1
            detail["crashed"] = True
            if deploy.crash():
                rt.record.deploy_attempts = deploy.attempt
                delay = component_recovery_delay("Guardian", self.rng("recovery"))
                self._push(now + delay, DEPLOY_STEP, job_id=deploy.job_id, epoch=rt.epoch)
            else:
                deploy.abort()
                rt.deploy = None
                self._fail_job(rt, now, reason="deploy retries exhausted")
            return detail
        if deploy.complete:
            self._record_alloc_change(now, set(deploy.assignment.values()))
            rt.deploy = None
            self._update_fully_placed(rt, now)
            self._start_download(rt, now)
        else:
            self._push(now + self.params.deploy_step_s, DEPLOY_STEP,
                       job_id=deploy.job_id, epoch=rt.epoch)
        return detail

    def _put_learner(self, rt: _JobRuntime, learner: int, value: bytes, now: float) -> None:
        job_id = rt.record.job_id
        ttl = self.params.learner_lease_ttl_s
        lease_id = None
        if ttl > 0:
            lease_id = rt.lease_ids.get(learner)
            lease = self.store.lease(lease_id) if lease_id is not None else None
            if lease is None:
                lease_id = self.store.grant_lease(ttl, now)
                rt.lease_ids[learner] = lease_id
                self._push(now + ttl, LEASE_EXPIRY, job_id=job_id, learner=learner,
                           lease_id=lease_id)
            elif lease.expired(now):
                # a write from the learner doubles as a keep-alive
                self.store.renew_lease(lease_id, now)
        self.store.put(learner_key(job_id, learner), value, lease_id=lease_id, now=now)

    def _start_download(self, rt: _JobRuntime, now: float) -> None:
        record = rt.record
        if record.status is JobStatus.DEPLOYING:
            record.transition(now, JobStatus.DOWNLOADING)
        for i in sorted(record.placements):
            self._put_learner(rt, i, LEARNER_DOWNLOADING, now)
            self._push(now + self.params.download_s, PHASE_COMPLETE,
                       job_id=record.job_id, phase="download", learner=i,
                       learner_epoch=rt.learner_epoch[i])

    def _on_phase_complete(self, now: float, payload: dict) -> dict:
        rt = self.jobs[payload["job_id"]]
        record = rt.record
        phase = payload["phase"]
        if phase == "download":
            learner = payload["learner"]
            if payload["learner_epoch"] != rt.learner_epoch[learner]:
                return {"stale": True}
            self._put_learner(rt, learner, LEARNER_PROCESSING, now)
            controller_tick(record, self.store, now)
            self._reschedule_progress(rt, now)
            return {}
        if payload["epoch"] != rt.epoch:
            return {"stale": True}
        if phase == "processing":
            self._fold_progress(rt, now)
            record.progress = rt.spec.work_duration
            record.transition(now, JobStatus.STORING)
            rt.rate = 0.0
            for i in sorted(record.placements):
                self._put_learner(rt, i, LEARNER_STORING, now)
            rt.epoch += 1
            self._push(now + self.params.store_s, PHASE_COMPLETE,
                       job_id=record.job_id, phase="store", epoch=rt.epoch)
        elif phase == "store":
            for i in sorted(record.placements):
                self._put_learner(rt, i, LEARNER_COMPLETED, now)
            self._complete_job(rt, now)
        return {}

    def _on_checkpoint(self, now: float, payload: dict) -> dict:
        rt = self.jobs[payload["job_id"]]
        if payload["epoch"] != rt.epoch or rt.record.status is not JobStatus.PROCESSING:
            return {"stale": True}
        self._fold_progress(rt, now)
        rt.record.progress = min(payload["target"], rt.spec.work_duration)
        take_checkpoint(rt.record, now)
        cost = self.params.checkpoint_cost_s
        self._reschedule_progress(rt, now, resume_at=now + cost if cost > 0 else None)
        return {"checkpoint": rt.record.last_checkpoint}

    def _complete_job(self, rt: _JobRuntime, now: float) -> None:
        record = rt.record
        released = self._release_all(rt, now)
        self._counters["pods_completed"] += released
        # an async job can finish with a replacement still outstanding
        self.queue.remove_job(record.job_id)
        rt.pending_replacements.clear()
        rt.outstanding.clear()
        rt.grace_deadline = None
        record.transition(now, JobStatus.COMPLETED)
        self._counters["jobs_completed"] += 1
        self.store.delete_prefix(job_prefix(record.job_id))
        self._update_fully_placed(rt, now)
        self._sample_stuck(now)
        self._push(now, DISPATCH_TICK)

    def _release_all(self, rt: _JobRuntime, now: float) -> int:
        """Release every placement of the job.  Returns pods released."""
        placements = self.cluster.placements_of(rt.record.job_id)
        for p in placements:
            self.cluster.release_placement(p)
        self.cluster.cancel_reservations(rt.record.job_id)
        rt.record.placements = {}
        if placements:
            self._record_alloc_change(now, [p.node_id for p in placements])
        return len(placements)

    def _fail_job(self, rt: _JobRuntime, now: float, reason: str) -> None:
        record = rt.record
        log.info("%s: FAILED (%s)", record.job_id, reason)
        released = self._release_all(rt, now)
        self._counters["pods_released_other"] += released
        self.queue.remove_job(record.job_id)
        rt.pending_replacements.clear()
        rt.outstanding.clear()
        rt.grace_deadline = None
        rt.epoch += 1
        rt.rate = 0.0
        record.transition(now, JobStatus.FAILED)
        self._counters["jobs_failed"] += 1
        self.store.delete_prefix(job_prefix(record.job_id))
        self._update_fully_placed(rt, now)
        self._sample_stuck(now)
        self._push(now, DISPATCH_TICK)

    def _requeue_whole(self, rt: _JobRuntime, now: float, reason: str) -> None:
        """Release everything the job holds and send it back to the queue."""
        record = rt.record
        self._fold_progress(rt, now)
        if record.status is not JobStatus.STORING:
            # pods die here; unsaved work goes with them
            record.lost_work_total += record.progress - record.last_checkpoint
            record.progress = record.last_checkpoint
        if rt.deploy is not None:
            rt.deploy.abort()
            rt.deploy = None
        released = self._release_all(rt, now)
        self._counters["pods_released_other"] += released
        self.queue.remove_job(record.job_id)
        rt.pending_replacements.clear()
        rt.outstanding.clear()
        rt.grace_deadline = None
        rt.epoch += 1
        for i in range(rt.spec.learners):
            rt.learner_epoch[i] += 1
        rt.rate = 0.0
        self.store.delete_prefix(job_prefix(record.job_id))
        record.transition(now, JobStatus.QUEUED)
        self._counters["jobs_requeued"] += 1
        self._enqueue_job(rt, now)
        self._update_fully_placed(rt, now)
        self._sample_stuck(now)
        self._push(now, DISPATCH_TICK)

    def _on_node_fail(self, now: float, payload: dict) -> dict:
        node_id = payload["node_id"]
        down_s = payload.get("down_s", 300.0)
        failure = self.cluster.fail(node_id)
        self._counters["node_failures"] += 1
        self._counters["pods_deleted_node_failure"] += len(failure.evicted)
        affected = {p.gang_id for p in failure.evicted} | set(failure.reserved_gangs)
        mid_deploy = {
            job_id for job_id in affected
            if self.jobs[job_id].deploy is not None
        }
        evictions = [p for p in failure.evicted if p.gang_id not in mid_deploy]
        # progress must be current before the rewind measures the loss
        for job_id in sorted(affected - mid_deploy):
            self._fold_progress(self.jobs[job_id], now)
        requests = handle_node_failure(evictions,
            {job_id: self.jobs[job_id].record for job_id in affected},
            self.cluster, self.store, now)
        for job_id in sorted(mid_deploy):
            rt = self.jobs[job_id]
            # evicted pods of an in-flight deploy are released here, the
            # rest roll back with the attempt
            for p in failure.evicted:
                if p.gang_id == job_id:
                    self.cluster.release_placement(p)
                    rt.record.placements.pop(p.learner_index, None)
            rt.deploy.abort()
            rt.deploy = None
            self._requeue_whole(rt, now, reason="node-failed-mid-deploy")
        rng = self.rng("recovery")
        for req in requests:
            rt = self.jobs[req.job_id]
            delay = component_recovery_delay("Learner", rng)
            rt.learner_epoch[req.learner_index] += 1
            rt.pending_replacements[req.learner_index] = now + delay
            rt.outstanding.add(req.learner_index)
            if rt.grace_deadline is None:
                rt.grace_deadline = now + self.params.replacement_grace_s
                self._push(rt.grace_deadline, DISPATCH_TICK)
            self._push(now + delay, DISPATCH_TICK)
        for job_id in sorted(affected - mid_deploy):
            rt = self.jobs[job_id]
            self._update_fully_placed(rt, now)
            self._reschedule_progress(rt, now)
        if failure.evicted:
            self._record_alloc_change(now, [p.node_id for p in failure.evicted])
        self._sample_stuck(now)
        if down_s is not None and down_s > 0:
            self._push(now + down_s, NODE_RECOVER, node_id=node_id)
        return {"evicted": len(failure.evicted)}

    def _on_node_recover(self, now: float, payload: dict) -> dict:
        self.cluster.recover(payload["node_id"])
        self._push(now, DISPATCH_TICK)
        return {}

    def _on_lease_expiry(self, now: float, payload: dict) -> dict:
        rt = self.jobs.get(payload["job_id"])
        lease_id = payload["lease_id"]
        learner = payload["learner"]
        if rt is not None and rt.lease_ids.get(learner) == lease_id:
            alive = learner in rt.record.placements
            if alive and self.store.lease(lease_id) is not None:
                # keep-alive from a healthy learner
                self.store.renew_lease(lease_id, now)
                self._push(now + self.params.learner_lease_ttl_s, LEASE_EXPIRY,
                           job_id=payload["job_id"], learner=learner, lease_id=lease_id)
                return {"renewed": True}
            rt.lease_ids.pop(learner, None)
        lease = self.store.lease(lease_id)
        if lease is None:
            return {"expired_keys": 0}
        if not lease.expired(now):
            # a write doubled as a keep-alive since this timer was armed
            self._push(lease.granted_at + lease.ttl, LEASE_EXPIRY,
                       job_id=payload["job_id"], learner=learner, lease_id=lease_id)
            return {"rearmed": True}
        # collect just this lease; siblings renew on their own timers
        deleted = self.store.revoke_lease(lease_id)
        if deleted:
            self._counters["lease_expirations"] += len(deleted)
        return {"expired_keys": len(deleted)}

    def _on_deadlock_scan(self, now: float, payload: dict) -> dict:
        self._scan_armed = False
        self._sample_stuck(now)
        self.cluster.check_invariants()
        reports = []
        if self.config.policy in POD_POLICIES:
            reports = detect_deadlocks(
                [rt.record for rt in self.jobs.values()], now,
                self.config.deadlock_timeout_s,
            )
            evict_after = self.config.evict_deadlocked_after_s
            if evict_after is not None:
                for r in reports:
                    if now - r.partial_since > evict_after:
                        self._requeue_whole(self.jobs[r.job_id], now, reason="deadlock-evict")
        if any(rt.record.partial_since is not None for rt in self.jobs.values()):
            if not self._scan_armed:
                self._scan_armed = True
                self._push(now + self.params.deadlock_scan_s, DEADLOCK_SCAN)
        return {"deadlocked_jobs": len(reports)}

    def _on_halt(self, now: float, payload: dict) -> dict:
        rt = self.jobs.get(payload["job_id"])
        if rt is None or rt.record.status is not JobStatus.PROCESSING:
            return {"ignored": True}
        record = rt.record
        self._fold_progress(rt, now)
        take_checkpoint(record, now)
        released = self._release_all(rt, now)
        self._counters["pods_released_other"] += released
        self.queue.remove_job(record.job_id)
        rt.pending_replacements.clear()
        rt.outstanding.clear()
        rt.grace_deadline = None
        rt.epoch += 1
        for i in range(rt.spec.learners):
            rt.learner_epoch[i] += 1
        rt.rate = 0.0
        self.store.delete_prefix(job_prefix(record.job_id))
        record.transition(now, JobStatus.HALTED)
        self._counters["halts"] += 1
        self._update_fully_placed(rt, now)
        self._push(now, DISPATCH_TICK)
        return {"checkpoint": record.last_checkpoint}

    def _on_resume(self, now: float, payload: dict) -> dict:
        rt = self.jobs.get(payload["job_id"])
        if rt is None or rt.record.status is not JobStatus.HALTED:
            return {"ignored": True}
        rt.record.transition(now, JobStatus.RESUMED)
        self._counters["resumes"] += 1
        self._enqueue_job(rt, now)
        self._push(now, DISPATCH_TICK)
        return {}

    # ------------------------------------------------ wrap-up

    def _finalize(self) -> SimResult:
        for rt in self.jobs.values():
            self._fold_progress(rt, self.now)
        self._sample_stuck(self.now)
        self.cluster.check_invariants()
        placed = sum(r.record.placed_count() * r.spec.gpus_per_learner
                     for r in self.jobs.values())
        allocated = self.cluster.total_allocated_gpus()
        if placed != allocated:
            raise SimInvariantError(
                f"allocated {allocated} GPUs but records say {placed}"
            )
        counters = dict(self._counters)
        counters["peak_concurrent_fully_placed"] = self._peak_concurrent_full
        counters["final_store_keys"] = len(self.store.keys())
        jobs = [self.jobs[j].record.to_dict() for j in sorted(self.jobs)]
        return SimResult(
            seed=self.seed,
            horizon=self.horizon,
            policy=self.config.policy.value,
            total_gpus=self.cluster.total_gpus(),
            jobs=jobs,
            counters=counters,
            node_timeline=self._node_timeline,
            stuck_samples=self._stuck_samples,
            deadlock_peaks=dict(sorted(self._deadlock_peaks.items())),
            event_log=self._event_log,
        )


def run(
    topology: list[dict],
    workload: list[JobSpec],
    scheduler: SchedulerConfig | None = None,
    fault_plan: FaultPlan | None = None,
    seed: int = 0,
    horizon: float = 86400.0,
    params: SimParams | None = None,
    user_events=None,
    dump_store: bool = False,
) -> SimResult:
    """Build and run one simulation; see Simulation for the semantics."""
    sim = Simulation(
        topology, workload, scheduler=scheduler, fault_plan=fault_plan,
        seed=seed, horizon=horizon, params=params, user_events=user_events,
    )
    result = sim.run()
    if dump_store:
        result.store_dump = sim.store.dump()
    return result


def run_batch(scenario, seeds) -> list[SimResult]:
    """Run a scenario across seeds; collects per-seed errors without
    aborting the siblings and raises BatchError at the end if any."""
    results: list[SimResult | None] = []
    errors: dict[int, Exception] = {}
    for seed in seeds:
        try:
            results.append(scenario.run(seed=seed))
        except Exception as exc:  # noqa: BLE001 - sibling isolation
            errors[seed] = exc
            results.append(None)
    if errors:
        raise BatchError(errors, results)
    return results
