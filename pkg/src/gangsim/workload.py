"""Job descriptions, trace loading and synthetic workload generators.

A job asks for a gang of identical learner pods.  When a trace omits CPU
or memory, defaults are filled from the t-shirt table keyed by (GPU
class, GPUs per learner); table values are cores and GB and get converted
to millicores and MB on the job spec.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace

from .cluster import ResourceVector

# (gpu_class, gpus_per_learner) -> (cpu cores, memory GB)
TSHIRT_SIZES: dict[tuple[str, int], tuple[int, int]] = {
    ("K80", 1): (4, 24),
    ("K80", 2): (8, 48),
    ("K80", 4): (16, 96),
    ("P100", 1): (8, 24),
    ("P100", 2): (16, 48),
    ("V100", 1): (26, 24),
    ("V100", 2): (42, 48),
}

# CPU-only jobs (gpus == 0) fall back to this (cores, GB)
CPU_ONLY_DEFAULT = (2, 4)

DEFAULT_GPU_CLASSES = ("K80", "P100", "V100")

# fixed data-in / results-out phases, seconds
DEFAULT_DOWNLOAD_S = 60.0
DEFAULT_STORE_S = 60.0


class WorkloadError(Exception):
    pass


class ParseError(WorkloadError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class ValidationError(WorkloadError):
    pass


class UnknownConfiguration(ValidationError):
    pass


class InvalidConfig(WorkloadError):
    pass


def default_resources(
    gpu_class: str,
    gpus_per_learner: int,
    cpu_only: tuple[int, int] = CPU_ONLY_DEFAULT,
) -> tuple[int, int]:
    """T-shirt default (cpu cores, memory GB) for a learner shape."""
    if gpus_per_learner == 0:
        return cpu_only
    try:
        return TSHIRT_SIZES[(gpu_class, gpus_per_learner)]
    except KeyError:
        raise UnknownConfiguration(
            f"no default sizing for {gpus_per_learner} x {gpu_class}"
        ) from None


# ---------------------------------------------------------------- job specs


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    submit_time: float
    learners: int
    gpus_per_learner: int
    gpu_class: str
    cpu_per_learner: int      # millicores
    mem_per_learner: int      # MB
    work_duration: float      # seconds of training work
    checkpoint_interval: float = 0.0   # 0 disables checkpointing
    sync: bool = True

    def __post_init__(self):
        if self.learners < 1:
            raise ValidationError(f"{self.job_id}: learners must be >= 1")
        if self.gpus_per_learner < 1:
            raise ValidationError(f"{self.job_id}: gpus_per_learner must be >= 1")
        if self.work_duration <= 0:
            raise ValidationError(f"{self.job_id}: work_duration must be > 0")
        if self.checkpoint_interval < 0:
            raise ValidationError(f"{self.job_id}: checkpoint_interval must be >= 0")

    @property
    def demand(self) -> ResourceVector:
        """Per-learner resource demand."""
        return ResourceVector(
            gpus=self.gpus_per_learner,
            gpu_class=self.gpu_class,
            cpu=self.cpu_per_learner,
            mem=self.mem_per_learner,
        )

    def gang(self) -> "Gang":
        return Gang(gang_id=self.job_id, gang_size=self.learners, per_pod_demand=self.demand)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "submit_time": self.submit_time,
            "learners": self.learners,
            "gpus_per_learner": self.gpus_per_learner,
            "gpu_class": self.gpu_class,
            "cpu_per_learner": self.cpu_per_learner,
            "mem_per_learner": self.mem_per_learner,
            "work_duration": self.work_duration,
            "checkpoint_interval": self.checkpoint_interval,
            "sync": self.sync,
        }


@dataclass(frozen=True)
class Gang:
    """All-or-nothing unit of placement: N identical pods."""

    gang_id: str
    gang_size: int
    per_pod_demand: ResourceVector

    @property
    def total_gpus(self) -> int:
        return self.gang_size * self.per_pod_demand.gpus


# ---------------------------------------------------------------- traces


def _spec_from_record(rec: dict, known_classes, line_no: int) -> JobSpec:
    for req in ("job_id", "submit_time", "learners", "gpus_per_learner", "gpu_class", "work_duration"):
        if req not in rec:
            raise ValidationError(f"line {line_no}: missing field {req!r}")
    gpu_class = rec["gpu_class"]
    if known_classes is not None and gpu_class not in known_classes:
        raise ValidationError(f"line {line_no}: unknown gpu_class {gpu_class!r}")
    learners = int(rec["learners"])
    gpus = int(rec["gpus_per_learner"])
    if "cpu_per_learner" in rec and "mem_per_learner" in rec:
        cpu = int(rec["cpu_per_learner"])
        mem = int(rec["mem_per_learner"])
    else:
        try:
            cores, gb = default_resources(gpu_class, gpus)
        except UnknownConfiguration as exc:
            raise ValidationError(f"line {line_no}: {exc}") from exc
        cpu = int(rec.get("cpu_per_learner", cores * 1000))
        mem = int(rec.get("mem_per_learner", gb * 1024))
    try:
        return JobSpec(
            job_id=str(rec["job_id"]),
            submit_time=float(rec["submit_time"]),
            learners=learners,
            gpus_per_learner=gpus,
            gpu_class=gpu_class,
            cpu_per_learner=cpu,
            mem_per_learner=mem,
            work_duration=float(rec["work_duration"]),
            checkpoint_interval=float(rec.get("checkpoint_interval", 0.0)),
            sync=bool(rec.get("sync", True)),
        )
    except ValidationError as exc:
        raise ValidationError(f"line {line_no}: {exc}") from exc


def load_trace(path, known_classes=DEFAULT_GPU_CLASSES) -> list[JobSpec]:
    """Read a JSON-lines trace, fill sizing defaults, sort by submit time.

    Blank lines are ignored.  Malformed JSON raises ParseError with the
    line number; semantic problems raise ValidationError.
    """
    specs: list[JobSpec] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"bad JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ParseError(line_no, "expected a JSON object")
            spec = _spec_from_record(rec, known_classes, line_no)
            if spec.job_id in seen_ids:
                raise ValidationError(f"line {line_no}: duplicate job_id {spec.job_id!r}")
            seen_ids.add(spec.job_id)
            specs.append(spec)
    specs.sort(key=lambda s: s.submit_time)
    return specs


def write_trace(specs: list[JobSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), sort_keys=False) + "\n")


# ---------------------------------------------------------------- generators


def _rng_for(seed: int, scenario: str) -> random.Random:
    # string seeding keeps substreams stable across runs and platforms
    return random.Random(f"{seed}:workload:{scenario}")


def _sized_spec(job_id, submit, learners, gpus, gpu_class, duration, interval=0.0, sync=True):
    cores, gb = default_resources(gpu_class, gpus)
    return JobSpec(
        job_id=job_id,
        submit_time=submit,
        learners=learners,
        gpus_per_learner=gpus,
        gpu_class=gpu_class,
        cpu_per_learner=cores * 1000,
        mem_per_learner=gb * 1024,
        work_duration=duration,
        checkpoint_interval=interval,
        sync=sync,
    )


def _gen_gang_experiment(cfg: dict, rng: random.Random) -> list[JobSpec]:
    """N identical sync jobs all submitted at t=0."""
    n = int(cfg.get("n_jobs", 50))
    learners = int(cfg.get("learners", 2))
    gpus = int(cfg.get("gpus_per_learner", 1))
    gpu_class = cfg.get("gpu_class", "K80")
    duration = float(cfg.get("work_duration", 3600.0))
    interval = float(cfg.get("checkpoint_interval", 0.0))
    width = max(3, len(str(n - 1)))
    return [
        _sized_spec(f"job-{i:0{width}d}", 0.0, learners, gpus, gpu_class, duration, interval)
        for i in range(n)
    ]


# staggered arrival batches: (gpu_class, offset seconds, spread seconds)
_STAGGER_BATCHES = (
    ("K80", 0.0, 60.0),     # burst inside the first minute
    ("K80", 900.0, 0.0),    # after 15 min
    ("P100", 1800.0, 0.0),  # after 30 min
    ("V100", 1920.0, 0.0),  # after 32 min
)
_STAGGER_COUNTS = {
    "light": (30, 24, 11, 5),
    "heavy": (300, 240, 110, 50),
}


def _gen_staggered_load(cfg: dict, rng: random.Random) -> list[JobSpec]:
    """Four arrival batches of single-GPU jobs across the GPU classes."""
    level = cfg.get("load", "light")
    if level not in _STAGGER_COUNTS:
        raise InvalidConfig(f"staggered-load level must be light or heavy, got {level!r}")
    counts = _STAGGER_COUNTS[level]
    duration = float(cfg.get("work_duration", 1800.0))
    specs = []
    i = 0
    for (gpu_class, offset, spread), count in zip(_STAGGER_BATCHES, counts):
        times = sorted(rng.uniform(0.0, spread) for _ in range(count)) if spread else [0.0] * count
        for t in times:
            specs.append(_sized_spec(f"job-{i:04d}", offset + t, 1, 1, gpu_class, duration))
            i += 1
    specs.sort(key=lambda s: s.submit_time)
    return specs


def _pick_mix(mix: list[dict], rng: random.Random) -> dict:
    weights = [float(m.get("weight", 1.0)) for m in mix]
    return rng.choices(mix, weights=weights, k=1)[0]


def _mix_spec(job_id, submit, entry: dict, rng: random.Random) -> JobSpec:
    lo, hi = entry.get("work_duration", [600.0, 3600.0])
    return _sized_spec(
        job_id,
        submit,
        int(entry.get("learners", 1)),
        int(entry.get("gpus_per_learner", 1)),
        entry.get("gpu_class", "K80"),
        rng.uniform(float(lo), float(hi)),
        float(entry.get("checkpoint_interval", 0.0)),
        bool(entry.get("sync", True)),
    )


def _gen_poisson(cfg: dict, rng: random.Random) -> list[JobSpec]:
    """Poisson arrivals over a horizon with a weighted job-shape mix."""
    rate_per_hour = float(cfg.get("rate_per_hour", 30.0))
    duration_s = float(cfg.get("duration_s", 3600.0))
    mix = cfg.get("mix") or [{"learners": 1, "gpus_per_learner": 1, "gpu_class": "K80"}]
    if rate_per_hour <= 0 or duration_s <= 0:
        raise InvalidConfig("poisson rate and duration must be positive")
    specs = []
    t = 0.0
    i = 0
    mean_gap = 3600.0 / rate_per_hour
    while True:
        t += rng.expovariate(1.0 / mean_gap)
        if t >= duration_s:
            break
        specs.append(_mix_spec(f"job-{i:05d}", t, _pick_mix(mix, rng), rng))
        i += 1
    return specs


def _gen_bursty_days(cfg: dict, rng: random.Random) -> list[JobSpec]:
    """Multi-day arrival pattern: weekday/weekend levels plus intra-day bursts.

    Job counts follow a weekly rhythm with multiplicative noise; most
    arrivals cluster around a few burst centers per day, the rest land
    uniformly.  Meant for long-horizon queueing studies, so shapes skew
    toward single-learner jobs with a minority of wide-GPU learners.
    """
    days = int(cfg.get("days", 60))
    day_s = float(cfg.get("day_s", 86400.0))
    per_day = float(cfg.get("jobs_per_day", 90.0))
    mix = cfg.get("mix") or [
        {"weight": 0.65, "learners": 1, "gpus_per_learner": 1, "gpu_class": "K80",
         "work_duration": [1800.0, 14400.0]},
        {"weight": 0.25, "learners": 1, "gpus_per_learner": 2, "gpu_class": "K80",
         "work_duration": [1800.0, 14400.0]},
        {"weight": 0.10, "learners": 1, "gpus_per_learner": 4, "gpu_class": "K80",
         "work_duration": [3600.0, 21600.0]},
    ]
    weekly = (1.0, 1.15, 1.1, 1.05, 0.9, 0.45, 0.35)
    specs = []
    i = 0
    for d in range(days):
        level = per_day * weekly[d % 7] * rng.uniform(0.6, 1.5)
        n = max(0, int(round(rng.gauss(level, level * 0.2))))
        bursts = [rng.uniform(0.25, 0.85) * day_s for _ in range(rng.randint(1, 3))]
        times = []
        for _ in range(n):
            if rng.random() < 0.7:
                center = rng.choice(bursts)
                times.append(min(max(rng.gauss(center, day_s * 0.03), 0.0), day_s - 1.0))
            else:
                times.append(rng.uniform(0.0, day_s))
        for t in sorted(times):
            specs.append(_mix_spec(f"job-{i:05d}", d * day_s + t, _pick_mix(mix, rng), rng))
            i += 1
    return specs


_GENERATORS = {
    "gang-experiment": _gen_gang_experiment,
    "staggered-load": _gen_staggered_load,
    "poisson": _gen_poisson,
    "bursty-days": _gen_bursty_days,
}


def generate_synthetic(config: dict, seed: int) -> list[JobSpec]:
    """Deterministically expand a generator config into a job list."""
    name = config.get("scenario")
    if name not in _GENERATORS:
        raise InvalidConfig(
            f"unknown workload scenario {name!r}; expected one of {sorted(_GENERATORS)}"
        )
    rng = _rng_for(seed, name)
    specs = _GENERATORS[name](config, rng)
    specs.sort(key=lambda s: s.submit_time)
    return specs
