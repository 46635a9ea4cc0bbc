"""Command line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 a simulation
invariant was violated, 3 a replayed experiment missed its expected
envelope.  GANGSIM_LOG sets the log level (DEBUG, INFO, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .cluster import ClusterError
from .engine import BatchError, ConfigError, SimInvariantError, run_batch
from .metrics import completion_stats, mean_gpu_utilization
from .replay import EXPERIMENTS
from .scenario import load_scenario
from .scheduling import SchedulingError
from .workload import WorkloadError, generate_synthetic, write_trace

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_CHECK_FAILED = 3


class _ArgumentParser(argparse.ArgumentParser):
    # usage errors are configuration errors, not exit code 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    name = os.environ.get("GANGSIM_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_seeds(text: str) -> list[int]:
    """Seed specs: '7', '1,2,5' or '0:20' (half-open range)."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            start, stop = int(lo), int(hi)
            if stop <= start:
                raise ConfigError(f"empty seed range {text!r}")
            return list(range(start, stop))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed spec {text!r}: {exc}") from exc


def _apply_overrides(scn, args) -> None:
    if getattr(args, "policy", None):
        scn.scheduler.policy = type(scn.scheduler.policy)(args.policy)
    if getattr(args, "samples", None):
        scn.scheduler.samples = args.samples
    if getattr(args, "horizon_s", None):
        scn.horizon = args.horizon_s


def _summary_line(scn_name: str, result) -> str:
    stats = completion_stats(result.jobs)
    util = 100.0 * mean_gpu_utilization(result)
    return (
        f"{scn_name} seed={result.seed} policy={result.policy}: "
        f"jobs={stats['jobs']} completed={stats['completed']} failed={stats['failed']} "
        f"requeued={result.counters['jobs_requeued']} "
        f"deadlocked_peak={result.peak_deadlocked_learners} "
        f"idle_gpu_peak={result.idle_gpu_pct_peak:.1f}% util={util:.1f}%"
    )


def _cmd_run(args) -> int:
    scn = load_scenario(args.scenario)
    _apply_overrides(scn, args)
    result = scn.run(seed=args.seed, dump_store=args.dump_store)
    print(_summary_line(scn.name, result))
    if args.out:
        for path in result.write_exports(args.out):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_batch(args) -> int:
    scn = load_scenario(args.scenario)
    _apply_overrides(scn, args)
    seeds = _parse_seeds(args.seeds)
    results = run_batch(scn, seeds)
    for result in results:
        print(_summary_line(scn.name, result))
    if args.out:
        for result in results:
            result.write_exports(Path(args.out) / f"seed-{result.seed}")
        print(f"wrote exports for {len(results)} seeds under {args.out}")
    return EXIT_OK


def _cmd_gen_trace(args) -> int:
    text = args.config
    if text.lstrip().startswith("{"):
        config = json.loads(text)
    else:
        config = json.loads(Path(text).read_text())
    specs = generate_synthetic(config, args.seed)
    if args.out:
        write_trace(specs, args.out)
        print(f"wrote {len(specs)} jobs to {args.out}")
    else:
        for spec in specs:
            print(json.dumps(spec.to_dict(), separators=(",", ":")))
    return EXIT_OK


def _strip_results(doc):
    """Drop non-serializable raw results from a replay report."""
    if isinstance(doc, dict):
        return {k: _strip_results(v) for k, v in doc.items()
                if k not in ("results", "result")}
    if isinstance(doc, list):
        return [_strip_results(v) for v in doc]
    return doc


def _cmd_replay(args) -> int:
    report = EXPERIMENTS[args.experiment]()
    if args.json:
        print(json.dumps(_strip_results(report), indent=2, default=str))
    else:
        print(f"experiment: {report['experiment']}")
        for check in report["checks"]:
            mark = " ok " if check["ok"] else "FAIL"
            print(f"[{mark}] {check['name']}: {check['detail']}")
    return EXIT_OK if report["ok"] else EXIT_CHECK_FAILED


def _cmd_validate(args) -> int:
    scn = load_scenario(args.scenario)
    jobs = scn.jobs_for(scn.default_seed)
    print(f"ok: {scn.name} ({len(scn.topology)} nodes, {len(jobs)} jobs, "
          f"policy {scn.scheduler.policy.value}, horizon {scn.horizon:.0f}s)")
    return EXIT_OK


def _cmd_dump_config(args) -> int:
    scn = load_scenario(args.scenario)
    print(json.dumps(scn.to_dict(), indent=2))
    return EXIT_OK


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="gangsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_arg(p):
        p.add_argument("--scenario", required=True, help="scenario JSON file (or inline JSON)")

    def override_args(p):
        p.add_argument("--policy", choices=["pod-spread", "pod-pack", "gang"],
                       help="override the scenario's placement policy")
        p.add_argument("--samples", type=int, help="override gang sampling count")
        p.add_argument("--horizon-s", type=float, help="override the simulation horizon")

    p = sub.add_parser("run", help="run one simulation")
    scenario_arg(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="directory for result.json / events.jsonl / statuses.jsonl")
    p.add_argument("--dump-store", action="store_true",
                   help="include a coordination-store dump in the exports")
    override_args(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("batch", help="run one scenario across many seeds")
    scenario_arg(p)
    p.add_argument("--seeds", required=True, help="'0:20', '1,2,5' or '7'")
    p.add_argument("--out", help="directory for per-seed exports")
    override_args(p)
    p.set_defaults(func=_cmd_batch)

    p = sub.add_parser("gen-trace", help="expand a synthetic workload config into a trace")
    p.add_argument("--config", required=True, help="generator config JSON (file or inline)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output trace path (JSONL); stdout when omitted")
    p.set_defaults(func=_cmd_gen_trace)

    p = sub.add_parser("replay-paper", help="rerun a shipped reference experiment")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--json", action="store_true", help="emit the full report as JSON")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("validate", help="check a scenario file without running it")
    scenario_arg(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("dump-config", help="print the normalized scenario")
    scenario_arg(p)
    p.set_defaults(func=_cmd_dump_config)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BatchError as exc:
        for seed, err in sorted(exc.errors.items()):
            print(f"seed {seed}: {type(err).__name__}: {err}", file=sys.stderr)
        if any(isinstance(e, (SimInvariantError, ClusterError)) for e in exc.errors.values()):
            return EXIT_INVARIANT
        return EXIT_CONFIG
    except (SimInvariantError, ClusterError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, WorkloadError, SchedulingError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
