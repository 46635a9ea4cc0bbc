"""Command line entry points, run in-process."""

import json

import pytest

from gangsim import cli
from gangsim.cluster import ClusterError
from gangsim.workload import load_trace


SCENARIO = {
    "name": "cli-tiny",
    "topology": {"nodes": 1, "gpus_per_node": 4, "gpu_class": "K80"},
    "workload": {"jobs": [
        {"job_id": "a", "submit_time": 0, "learners": 2,
         "gpus_per_learner": 1, "gpu_class": "K80", "work_duration": 100},
    ]},
    "horizon_s": 1000,
}


def scenario_file(tmp_path, doc=None):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc or SCENARIO))
    return str(path)


# ---------------------------------------------------------------- run


def test_run_prints_summary(tmp_path, capsys):
    code = cli.main(["run", "--scenario", scenario_file(tmp_path), "--seed", "3"])
    out = capsys.readouterr().out
    assert code == 0
    assert "cli-tiny seed=3" in out
    assert "jobs=1 completed=1 failed=0" in out


def test_run_accepts_inline_json(capsys):
    code = cli.main(["run", "--scenario", json.dumps(SCENARIO)])
    assert code == 0
    assert "completed=1" in capsys.readouterr().out


def test_run_writes_exports(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code = cli.main([
        "run", "--scenario", scenario_file(tmp_path),
        "--out", str(out_dir), "--dump-store",
    ])
    assert code == 0
    result = json.loads((out_dir / "result.json").read_text())
    assert result["counters"]["jobs_completed"] == 1
    assert json.loads((out_dir / "store_dump.json").read_text()) == {}
    events = (out_dir / "events.jsonl").read_text().strip().splitlines()
    assert all(json.loads(line) for line in events)
    statuses = (out_dir / "statuses.jsonl").read_text().strip().splitlines()
    assert json.loads(statuses[-1])["status"] == "COMPLETED"


def test_run_policy_override(tmp_path, capsys):
    code = cli.main([
        "run", "--scenario", scenario_file(tmp_path), "--policy", "pod-spread",
    ])
    assert code == 0
    assert "policy=pod-spread" in capsys.readouterr().out


def test_run_rejects_bad_scenario(tmp_path, capsys):
    bad = dict(SCENARIO, horizon_s=-5)  # horizon below the submit times
    code = cli.main(["run", "--scenario", scenario_file(tmp_path, bad)])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_missing_scenario_file_is_config_error(capsys):
    assert cli.main(["run", "--scenario", "/no/such/file.json"]) == 1


def test_usage_error_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])  # --scenario is required
    assert exc.value.code == 1


def test_invariant_failures_exit_two(tmp_path, monkeypatch, capsys):
    def explode(source):
        raise ClusterError("allocation drift")

    monkeypatch.setattr(cli, "load_scenario", explode)
    code = cli.main(["run", "--scenario", scenario_file(tmp_path)])
    assert code == 2
    assert "invariant" in capsys.readouterr().err


# ---------------------------------------------------------------- batch


def test_batch_runs_each_seed(tmp_path, capsys):
    out_dir = tmp_path / "batch"
    code = cli.main([
        "batch", "--scenario", scenario_file(tmp_path),
        "--seeds", "0:3", "--out", str(out_dir),
    ])
    out = capsys.readouterr().out
    assert code == 0
    assert out.count("cli-tiny seed=") == 3
    for seed in range(3):
        assert (out_dir / f"seed-{seed}" / "result.json").exists()


def test_batch_seed_list_and_bad_specs(tmp_path, capsys):
    assert cli.main(["batch", "--scenario", scenario_file(tmp_path),
                     "--seeds", "4,7"]) == 0
    assert capsys.readouterr().out.count("seed=") == 2
    assert cli.main(["batch", "--scenario", scenario_file(tmp_path),
                     "--seeds", "9:9"]) == 1
    assert cli.main(["batch", "--scenario", scenario_file(tmp_path),
                     "--seeds", "abc"]) == 1


# ---------------------------------------------------------------- gen-trace


def test_gen_trace_to_stdout(capsys):
    config = json.dumps({"scenario": "gang-experiment", "n_jobs": 4})
    code = cli.main(["gen-trace", "--config", config, "--seed", "1"])
    out = capsys.readouterr().out.strip().splitlines()
    assert code == 0
    assert len(out) == 4
    assert json.loads(out[0])["job_id"] == "job-000"


def test_gen_trace_to_file_round_trips(tmp_path, capsys):
    config = json.dumps({
        "scenario": "poisson", "rate_per_hour": 60.0, "duration_s": 1800.0,
    })
    out_path = tmp_path / "trace.jsonl"
    code = cli.main(["gen-trace", "--config", config, "--out", str(out_path)])
    assert code == 0
    specs = load_trace(out_path)
    assert specs
    assert all(0.0 < s.submit_time < 1800.0 for s in specs)


def test_gen_trace_rejects_bad_config(capsys):
    assert cli.main(["gen-trace", "--config", "{not json"]) == 1
    assert cli.main(["gen-trace", "--config",
                     json.dumps({"scenario": "unheard-of"})]) == 1


# ---------------------------------------------------------------- validate


def test_validate_and_dump_config(tmp_path, capsys):
    path = scenario_file(tmp_path)
    assert cli.main(["validate", "--scenario", path]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok: cli-tiny")
    assert "1 nodes, 1 jobs" in out

    assert cli.main(["dump-config", "--scenario", path]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["name"] == "cli-tiny"
    # the dump is itself a loadable scenario
    assert cli.main(["validate", "--scenario", json.dumps(doc)]) == 0


# ---------------------------------------------------------------- replay


def test_replay_fragmentation_passes(capsys):
    code = cli.main(["replay-paper", "fragmentation"])
    out = capsys.readouterr().out
    assert code == 0
    assert "[ ok ]" in out
    assert "FAIL" not in out


def test_replay_json_report(capsys):
    code = cli.main(["replay-paper", "fragmentation", "--json"])
    doc = json.loads(capsys.readouterr().out)
    assert code == 0
    assert doc["ok"] is True
    assert all(c["ok"] for c in doc["checks"])


def test_replay_failed_check_exits_three(monkeypatch, capsys):
    monkeypatch.setitem(
        cli.EXPERIMENTS, "fragmentation",
        lambda: {"experiment": "fragmentation", "ok": False,
                 "checks": [{"name": "x", "ok": False, "detail": "boom"}]},
    )
    code = cli.main(["replay-paper", "fragmentation"])
    assert code == 3
    assert "[FAIL]" in capsys.readouterr().out
