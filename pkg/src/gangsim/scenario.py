"""Scenario files: one JSON document describing a whole run.

A scenario bundles the cluster topology, the workload (an explicit
trace, inline job records, or a synthetic generator), scheduler policy,
fault plan, user halt/resume events, the horizon and engine parameters.
Everything except the seed; the same scenario replayed with the same
seed is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import ConfigError, FaultPlan, SimParams, SimResult, run
from .scheduling import SchedulerConfig, SchedulingError
from .workload import JobSpec, WorkloadError, _spec_from_record, generate_synthetic

_TOP_KEYS = {
    "name", "topology", "workload", "scheduler", "faults",
    "user_events", "horizon_s", "params", "seed",
}


def expand_topology(value) -> list[dict]:
    """Normalize the topology section into explicit node entries.

    Accepts an explicit list of {id, gpu_class, gpus} entries, a compact
    {"nodes": N, "gpus_per_node": G, "gpu_class": C} block, a list of
    such {"count": ...} groups for mixed clusters, or {"path": file}.
    """
    if isinstance(value, dict) and "path" in value:
        value = json.loads(Path(value["path"]).read_text())
    if isinstance(value, dict):
        value = [dict(value, count=value.get("nodes"))]
    if not isinstance(value, list) or not value:
        raise ConfigError("topology must be a non-empty list or a {nodes: ...} block")
    entries: list[dict] = []
    index = 0
    for group in value:
        if not isinstance(group, dict):
            raise ConfigError(f"bad topology entry {group!r}")
        if "id" in group:
            entries.append(dict(group))
            continue
        count = group.get("count", group.get("nodes"))
        if count is None or int(count) < 1:
            raise ConfigError(f"topology group needs a positive count: {group!r}")
        gpus = group.get("gpus_per_node", group.get("gpus"))
        if gpus is None or "gpu_class" not in group:
            raise ConfigError(f"topology group needs gpus_per_node and gpu_class: {group!r}")
        prefix = group.get("prefix", "n")
        for _ in range(int(count)):
            entry = {"id": f"{prefix}{index:02d}", "gpu_class": group["gpu_class"],
                     "gpus": int(gpus)}
            for opt in ("cpu_millicores", "mem_mb"):
                if opt in group:
                    entry[opt] = group[opt]
            entries.append(entry)
            index += 1
    seen = set()
    for e in entries:
        if e["id"] in seen:
            raise ConfigError(f"duplicate node id {e['id']!r} in topology")
        seen.add(e["id"])
    return entries


@dataclass
class Scenario:
    """A fully validated run description, ready to execute per seed."""

    topology: list[dict]
    scheduler: SchedulerConfig
    faults: FaultPlan
    params: SimParams
    horizon: float
    name: str = "scenario"
    trace: list[JobSpec] | None = None
    synthetic: dict | None = None
    user_events: list[tuple[float, str, str]] = field(default_factory=list)
    default_seed: int = 0

    def jobs_for(self, seed: int) -> list[JobSpec]:
        if self.trace is not None:
            return self.trace
        return generate_synthetic(self.synthetic, seed)

    def run(self, seed: int | None = None, dump_store: bool = False) -> SimResult:
        if seed is None:
            seed = self.default_seed
        return run(
            self.topology,
            self.jobs_for(seed),
            scheduler=self.scheduler,
            fault_plan=self.faults,
            seed=seed,
            horizon=self.horizon,
            params=self.params,
            user_events=self.user_events,
            dump_store=dump_store,
        )

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "topology": self.topology,
            "scheduler": self.scheduler.to_dict(),
            "horizon_s": self.horizon,
            "params": self.params.to_dict(),
            "seed": self.default_seed,
        }
        if self.trace is not None:
            doc["workload"] = {"jobs": [s.to_dict() for s in self.trace]}
        else:
            doc["workload"] = {"synthetic": self.synthetic}
        if self.faults.node_failures or self.faults.deploy_crashes or self.faults.mtbf_s:
            entries = [
                {"kind": "node-fail", "t": t, "target": node_id, "down_s": down}
                for t, node_id, down in self.faults.node_failures
            ]
            entries.extend(
                {"kind": "deploy-crash", "target": j, "attempt": a, "step": s}
                for j, a, s in sorted(self.faults.deploy_crashes)
            )
            if self.faults.mtbf_s:
                entries.append({"kind": "mtbf", "mtbf_s": self.faults.mtbf_s,
                                "down_s": list(self.faults.mtbf_down_s)})
            doc["faults"] = entries
        if self.user_events:
            doc["user_events"] = [
                {"t": t, "kind": kind, "target": job_id}
                for t, kind, job_id in self.user_events
            ]
        return doc


def _load_workload(section, topology: list[dict], base_dir: Path) -> tuple:
    """Returns (trace, synthetic_config); exactly one is non-None."""
    if not isinstance(section, dict):
        raise ConfigError("workload must be an object")
    known_classes = {e["gpu_class"] for e in topology}
    kinds = [k for k in ("trace", "jobs", "synthetic") if k in section]
    if len(kinds) != 1:
        raise ConfigError("workload needs exactly one of: trace, jobs, synthetic")
    kind = kinds[0]
    if kind == "trace":
        from .workload import load_trace

        path = Path(section["trace"])
        if not path.is_absolute():
            path = base_dir / path
        return load_trace(path, known_classes=known_classes), None
    if kind == "jobs":
        specs = [
            _spec_from_record(rec, known_classes, i + 1)
            for i, rec in enumerate(section["jobs"])
        ]
        ids = [s.job_id for s in specs]
        if len(ids) != len(set(ids)):
            raise ConfigError("duplicate job_id in inline workload")
        return sorted(specs, key=lambda s: (s.submit_time, s.job_id)), None
    return None, dict(section["synthetic"])


def _load_user_events(section) -> list[tuple[float, str, str]]:
    events = []
    for e in section:
        kind = e.get("kind")
        if kind not in ("halt", "resume"):
            raise ConfigError(f"unknown user event kind {kind!r}")
        events.append((float(e["t"]), kind, str(e["target"])))
    return events


def load_scenario(source) -> Scenario:
    """Load and validate a scenario from a path, JSON text or dict."""
    base_dir = Path(".")
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            path = Path(text)
            if not path.exists():
                raise ConfigError(f"scenario file not found: {path}")
            base_dir = path.parent
            try:
                doc = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    for required in ("topology", "workload"):
        if required not in doc:
            raise ConfigError(f"scenario is missing {required!r}")

    try:
        topology = expand_topology(doc["topology"])
        trace, synthetic = _load_workload(doc["workload"], topology, base_dir)
        scheduler = SchedulerConfig.from_dict(doc.get("scheduler", {}))
        faults = FaultPlan.from_entries(doc.get("faults", []))
        params = SimParams.from_dict(doc.get("params", {}))
        user_events = _load_user_events(doc.get("user_events", []))
    except (WorkloadError, SchedulingError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return Scenario(
        topology=topology,
        scheduler=scheduler,
        faults=faults,
        params=params,
        horizon=float(doc.get("horizon_s", 86400.0)),
        name=str(doc.get("name", "scenario")),
        trace=trace,
        synthetic=synthetic,
        user_events=user_events,
        default_seed=int(doc.get("seed", 0)),
    )
