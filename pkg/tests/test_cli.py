import json

import pytest

from cito.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main

QUICK_SCENARIO = """
[scenario]
model = "{model}"
initial_distance = {phi0}

[solver]
max_inner_iters = 2
max_outer_iters = 1
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_run_writes_report_and_trajectory(tmp_path, capsys):
    cfg = write(tmp_path, "scm.toml", QUICK_SCENARIO.format(model="SCM", phi0=0.11))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "report.json").is_file()
    assert (tmp_path / "out" / "trajectory.csv").is_file()
    assert "SCM" in capsys.readouterr().out


def test_sweep_writes_nine_rows(tmp_path):
    text = QUICK_SCENARIO.replace('model = "{model}"\ninitial_distance = {phi0}\n', "")
    text = text.replace("max_inner_iters = 2", "max_inner_iters = 0")
    cfg = write(tmp_path, "grid.toml", text)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "grid")]) == EXIT_OK
    lines = (tmp_path / "grid" / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "model,phi0,physical_inaccuracy,final_position_error,final_orientation_error,status"
    assert len(lines) == 1 + 9


def test_sweep_with_a_failed_cell_exits_1(tmp_path):
    text = '[sweep]\nmodels = ["SCM"]\ninitial_distances = [0.11, 3.0]\n[solver]\nmax_inner_iters = 0\n'
    cfg = write(tmp_path, "grid.toml", text)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "grid")]) == EXIT_FAILURE
    assert (tmp_path / "grid" / "metrics.csv").is_file()


def test_replay_matches_saved_metrics(tmp_path, capsys):
    cfg = write(tmp_path, "vscm.toml", QUICK_SCENARIO.format(model="VSCM", phi0=0.17))
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    code = main(["replay", "--decision", str(tmp_path / "run" / "decision.json"), "--out", str(tmp_path / "re")])
    assert code == EXIT_OK
    assert "replay matches" in capsys.readouterr().out
    assert (tmp_path / "re" / "trajectory.csv").read_bytes() == (tmp_path / "run" / "trajectory.csv").read_bytes()


def test_replay_detects_tampered_report(tmp_path):
    cfg = write(tmp_path, "scm.toml", QUICK_SCENARIO.format(model="SCM", phi0=0.11))
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    report = tmp_path / "run" / "report.json"
    data = json.loads(report.read_text(encoding="utf-8"))
    data["metrics"]["final_position_error"] += 1e-9
    report.write_text(json.dumps(data), encoding="utf-8")
    assert main(["replay", "--decision", str(tmp_path / "run" / "decision.json"), "--out", str(tmp_path / "re")]) == EXIT_FAILURE


def test_replay_of_missing_file_is_usage_error(tmp_path):
    assert main(["replay", "--decision", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_check_passes_and_writes_report(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 8
    assert all(r["passed"] for r in json.loads((tmp_path / "check_report.json").read_text(encoding="utf-8")))


def test_unknown_flag_exits_2_with_usage(capsys):
    assert main(["run", "--bogus"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_exits_2(capsys):
    assert main([]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_config_error_exits_2_with_location(tmp_path, capsys):
    cfg = write(tmp_path, "bad.toml", '[scenario]\nmodel = "SCM"\ninitial_distance = 0.1\nspeed = 3\n')
    assert main(["run", "--config", str(cfg)]) == EXIT_USAGE
    assert "bad.toml:4" in capsys.readouterr().err


def test_unreachable_run_exits_2(tmp_path, capsys):
    cfg = write(tmp_path, "far.toml", QUICK_SCENARIO.format(model="SCM", phi0=3.0))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "outside the arm workspace" in capsys.readouterr().err


@pytest.mark.parametrize("workers", ["0", "-2"])
def test_bad_worker_override(tmp_path, workers):
    assert main(["sweep", "--workers", workers, "--out", str(tmp_path)]) == EXIT_USAGE
