import json

from bhsim.cli import main
from bhsim.config import ScenarioId, ScenarioSpec, builtin_profile, validate_scenario
from bhsim.report import render_csv, render_json, result_payload, manifest_of
from bhsim.scenarios import ScenarioResult, run_scenario


def run_cli(*argv):
    return main(list(argv))


def test_list_profiles(capsys):
    assert run_cli("list-profiles") == 0
    out = capsys.readouterr().out.split()
    assert out == ["cortex-a72", "cortex-a76", "cortex-a78ae", "zen4",
                   "gracemont", "redwood-cove"]


def test_run_writes_result_json(tmp_path, capsys):
    rc = run_cli("run", "--profile", "cortex-a72", "--scenario", "spectre-bse",
                 "--trials", "10", "--out", str(tmp_path))
    assert rc == 0
    payload = json.loads((tmp_path / "result.json").read_text())
    assert payload["result"]["success_rate"] == 1.0
    assert payload["manifest"]["trials"] == 10
    assert "jobs" not in payload["manifest"]
    assert "success rate  : 1.0000" in capsys.readouterr().out


def test_structural_failure_exits_one(tmp_path):
    rc = run_cli("run", "--profile", "cortex-a72", "--scenario", "chimera",
                 "--trials", "5", "--out", str(tmp_path))
    assert rc == 1
    payload = json.loads((tmp_path / "result.json").read_text())
    assert payload["result"]["status"] == "structural_failure"


def test_config_errors_exit_two(tmp_path):
    assert run_cli("run", "--profile", "no-such-core", "--scenario",
                   "spectre-bse", "--out", str(tmp_path)) == 2
    assert run_cli("run", "--profile", "cortex-a72", "--scenario",
                   "no-such-scenario", "--out", str(tmp_path)) == 2
    # scenario/profile mismatch is a config-level error
    assert run_cli("run", "--profile", "cortex-a76", "--scenario",
                   "spectre-bse", "--out", str(tmp_path)) == 2


def test_sweep_emits_csv_and_figure(tmp_path):
    rc = run_cli("sweep", "--profile", "cortex-a76", "--scenario",
                 "window-sweep", "--out", str(tmp_path))
    assert rc == 0
    csv_text = (tmp_path / "sweep.csv").read_text()
    assert csv_text.splitlines()[0] == "prefix_n,leak_observed"
    assert (tmp_path / "window_sweep.png").stat().st_size > 0


def test_threshold_sweep_csv_columns(tmp_path):
    rc = run_cli("sweep", "--profile", "cortex-a76", "--scenario",
                 "threshold-sweep", "--out", str(tmp_path), "--no-figures")
    assert rc == 0
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header == "K,init_bias,history_mode,predicted_direction"


def test_profile_and_scenario_files(tmp_path):
    from bhsim.config import builtin_profile_text
    prof = tmp_path / "my.cfg"
    prof.write_text(builtin_profile_text("cortex-a72"))
    scen = tmp_path / "scen.cfg"
    scen.write_text("scenario = spectre-bse\ntrials = 5\nseed = 3\n")
    rc = run_cli("run", "--profile", str(prof), "--scenario", str(scen),
                 "--out", str(tmp_path / "out"))
    assert rc == 0


def test_dump_trace_phase(capsys):
    rc = run_cli("dump-trace", "--profile", "cortex-a72", "--scenario",
                 "spectre-bse", "--phase", "evict")
    assert rc == 0
    out = capsys.readouterr().out
    assert "# phase: evict" in out and "BCOND const=1" in out


def test_out_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("BHSIM_OUT_DIR", str(tmp_path / "envout"))
    rc = run_cli("run", "--profile", "cortex-a72", "--scenario", "spectre-bse",
                 "--trials", "2")
    assert rc == 0
    assert (tmp_path / "envout" / "result.json").exists()


def test_reemit_is_idempotent(tmp_path):
    args = ("run", "--profile", "cortex-a72", "--scenario", "spectre-bse",
            "--trials", "5", "--out", str(tmp_path))
    run_cli(*args)
    first = (tmp_path / "result.json").read_bytes()
    run_cli(*args)
    assert (tmp_path / "result.json").read_bytes() == first


def test_empty_curve_csv_is_headers_only():
    empty = ScenarioResult(scenario="threshold-sweep", profile="x", trials=0,
                           successes=0, success_rate=0.0, curves=[])
    assert render_csv(empty) == "K,init_bias,history_mode,predicted_direction\n"


def test_json_payload_is_canonical():
    spec = validate_scenario(ScenarioSpec(
        ScenarioId.SPECTRE_BSE, builtin_profile("cortex-a72"), trials=3))
    res = run_scenario(spec)
    a = render_json(result_payload(res, manifest_of(spec)))
    b = render_json(result_payload(res, manifest_of(spec)))
    assert a == b and a.endswith("\n")
    json.loads(a)
