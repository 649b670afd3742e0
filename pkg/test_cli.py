"""
Tests for the command line interface: argument validation, exit codes and
the eval / sim / run commands.
"""

import pandas as pd
import pytest

import cli
from odometry.dataset import load_euroc
from odometry.estimator import LOG_COLUMNS
from odometry.geometry import Transform
from odometry.trajectory import TrajectoryEstimate, write_trajectory

SHORT_SCENARIO = "kind=Circle,duration=1,seed=7,points=1500"


def write_line(path, offset=0.0, n=20):
    traj = TrajectoryEstimate()
    for k in range(n):
        traj.append(10.0 + 0.1 * k, Transform(translation=[0.5 * k + offset, 0.0, 0.0]))
    write_trajectory(traj, path)
    return path


def exit_code(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    return info.value.code


def test_eval_identical_files(tmp_path, capsys):
    path = write_line(tmp_path / "a.txt")
    cli.main(["eval", str(path), str(path)])
    assert "ATE RMSE: 0.0000 m" in capsys.readouterr().out


def test_eval_alignment_removes_offset(tmp_path, capsys):
    estimate = write_line(tmp_path / "est.txt", offset=1.0)
    truth = write_line(tmp_path / "gt.txt")
    cli.main(["eval", str(estimate), str(truth)])
    assert "ATE RMSE: 1.0000 m" in capsys.readouterr().out
    cli.main(["eval", str(estimate), str(truth), "--align"])
    assert "ATE RMSE: 0.0000 m" in capsys.readouterr().out


def test_eval_malformed_line(tmp_path, capsys):
    path = write_line(tmp_path / "est.txt")
    lines = path.read_text().splitlines()
    lines[6] = "10.6 0 0 0 0 0 zero 1"
    path.write_text("\n".join(lines) + "\n")
    assert exit_code(["eval", str(path), str(write_line(tmp_path / "gt.txt"))]) == cli.EXIT_INPUT_ERROR
    assert "line 7" in capsys.readouterr().out


def test_eval_without_associations(tmp_path):
    estimate = write_line(tmp_path / "est.txt")
    late = TrajectoryEstimate()
    for k in range(5):
        late.append(500.0 + k, Transform())
    write_trajectory(late, tmp_path / "gt.txt")
    assert exit_code(["eval", str(estimate), str(tmp_path / "gt.txt")]) == cli.EXIT_INPUT_ERROR


@pytest.mark.parametrize("argv", [
    ["run", "somewhere", "--scenario", "kind=Circle", "--out", "x"],
    ["run", "--out", "x"],
    ["run", "--scenario", "kind=Circle", "--config", "missing.conf", "--out", "x"],
])
def test_run_argument_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert exit_code(argv) == cli.EXIT_INPUT_ERROR


def test_run_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "no_such_dataset"
    assert exit_code(["run", str(missing), "--out", str(tmp_path / "out")]) == cli.EXIT_INPUT_ERROR
    assert str(missing) in capsys.readouterr().out


def test_sim_rejects_unknown_kind(tmp_path):
    assert exit_code(["sim", "--scenario", "kind=Spiral", "--out", str(tmp_path)]) == cli.EXIT_INPUT_ERROR


def test_sim_writes_recording(tmp_path):
    out = tmp_path / "sim"
    cli.main(["sim", "--scenario", SHORT_SCENARIO, "--out", str(out)])
    assert (out / "mav0" / "cam0" / "data.csv").is_file()
    assert (out / "groundtruth.txt").is_file()
    assert (out / "vocabulary.bin").is_file()
    streams = load_euroc(out)
    assert streams.counts == (21, 21, 201)


def test_sim_is_deterministic(tmp_path):
    for name in ("a", "b"):
        cli.main(["sim", "--scenario", SHORT_SCENARIO, "--out", str(tmp_path / name)])
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


@pytest.mark.slow
def test_run_scenario_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["run", "--scenario", "kind=Circle,duration=3,seed=2,points=2000", "--out", str(out),
              "--deterministic"])
    for name in ("trajectory.txt", "frames.csv", "manifest.json", "config.conf"):
        assert (out / name).is_file(), name
    log = pd.read_csv(out / "frames.csv")
    assert list(log.columns) == LOG_COLUMNS
    assert len(log) == 61
    assert set(log["mode"]) <= {"ImuOnly", "VisualOnly", "VisualInertial"}
    assert "ATE RMSE" in capsys.readouterr().out
