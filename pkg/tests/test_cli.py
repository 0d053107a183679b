import json

import numpy as np
import pytest
import yaml

from chaintrack import io, so3
from chaintrack.chain import ChainGeometry, ImuPoses
from chaintrack.cli import main

SHORT = {"filter_noise": {"preset": "tuned"}, "duration": 12.0,
         "evaluation": {"skip_initial": 2.0}, "seeds": 2}


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.yaml", SHORT)


def test_simulate_is_deterministic(tmp_path, cfg):
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("measurements.csv", "orientation.csv", "poses.csv", "geometry.csv", "trial.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "config.effective.yaml").exists()


def test_seed_override_changes_noise(tmp_path, cfg):
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    a = (tmp_path / "a" / "measurements.csv").read_bytes()
    b = (tmp_path / "b" / "measurements.csv").read_bytes()
    assert a != b
    eff = yaml.safe_load((tmp_path / "b" / "config.effective.yaml").read_text())
    assert eff["seed"] == 5


def test_ten_minute_simulation(tmp_path, cfg):
    out = tmp_path / "long"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--duration", "600"]) == 0
    trial = io.read_trial(out)
    assert trial.accel.shape == (60_000, 3, 3)


def static_pose_files(tmp_path):
    """Two IMUs hanging still from a shared joint, as pose and geometry CSVs."""
    T = 1200
    t = np.arange(T) / 100.0
    centre = np.array([0.1, -0.2, 1.0])
    R = [so3.quat_from_axis_angle([1, 2, 0.5], 0.8), so3.quat_from_axis_angle([-1, 0, 2], 2.2)]
    p = [centre + [0.0, 0.0, 0.2], centre + [0.05, 0.0, -0.25]]
    geometry = ChainGeometry([tuple(so3.quat_to_matrix(R[k]).T @ (centre - p[k]) for k in range(2))])
    poses = ImuPoses(t, np.tile(np.array(p), (T, 1, 1)), np.tile(np.array(R), (T, 1, 1)))
    io.write_poses(tmp_path / "poses.csv", poses)
    io.write_geometry(tmp_path / "geometry.csv", geometry)
    return {
        "source": {"kind": "poses", "poses_path": "poses.csv", "geometry_path": "geometry.csv"},
        "topology": {"imu_count": 2, "joints": [[0, 1]], "external_imu": 0},
        "simulation_noise": {"gyro_variance": 0.0, "accel_variance": 0.0},
        "evaluation": {"skip_initial": 1.0},
    }


def test_pose_source_static_track_is_exact(tmp_path, capsys):
    data = static_pose_files(tmp_path)
    cfg = write_config(tmp_path / "static.yaml", data)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
    trial = io.read_trial(tmp_path / "sim")
    assert trial.accel.shape == (1200, 2, 3)
    assert np.allclose(trial.gyro, 0.0, atol=1e-12)
    # exact joint init through an explicit zero-width range is not possible, so
    # start from the truth by giving the prior no room to move the joints
    data["filter_noise"] = {"p0_joint": 1e-12}
    cfg = write_config(tmp_path / "static.yaml", data)
    joints = io.read_geometry(tmp_path / "geometry.csv", 1).as_array()
    assert main(["track", "--config", cfg, "--trial", str(tmp_path / "sim"),
                 "--out", str(tmp_path / "trk")]) == 0
    out = capsys.readouterr().out
    assert "runtime per step" in out
    report = json.loads((tmp_path / "trk" / "report.json").read_text())
    orient = [b["trial_mae"] for b in report["batches"] if b["kind"] == "orientation"]
    assert max(orient) < 1e-9
    t, quat, omega, est = io.read_estimates(tmp_path / "trk")
    assert np.abs(omega).max() < 1e-9
    assert est.shape == (1200, 1, 2, 3)
    assert np.abs(est[-1] - est[0]).max() < 1e-9
    assert joints.shape == (1, 2, 3)


def test_track_without_truth_has_no_metrics(tmp_path, cfg):
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")])
    for name in ("poses.csv", "geometry.csv"):
        (tmp_path / "sim" / name).unlink()
    data = dict(SHORT, init={"orientation": "identity"})
    cfg2 = write_config(tmp_path / "id.yaml", data)
    assert main(["track", "--config", cfg2, "--trial", str(tmp_path / "sim"),
                 "--out", str(tmp_path / "trk")]) == 0
    report = json.loads((tmp_path / "trk" / "report.json").read_text())
    assert report["batches"] == []
    # truth initialization needs poses
    assert main(["track", "--config", cfg, "--trial", str(tmp_path / "sim"),
                 "--out", str(tmp_path / "trk2")]) == 3


def test_track_is_deterministic(tmp_path, cfg):
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")])
    for name in ("a", "b"):
        main(["track", "--config", cfg, "--trial", str(tmp_path / "sim"), "--out", str(tmp_path / name)])
    for name in ("report.json", "estimates_imu.csv", "estimates_joints.csv", "table.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert timing["steps"] == 1200 and timing["p95_ms"] > 0


def test_montecarlo_single_seed(tmp_path, cfg):
    assert main(["montecarlo", "--config", cfg, "--seeds", "1", "--out", str(tmp_path / "mc")]) == 0
    summary = json.loads((tmp_path / "mc" / "summary.json").read_text())
    assert summary["completed"] == 1
    assert all(row["std"] == 0.0 and row["trials"] == 1 for row in summary["rows"])
    labels = [row["label"] for row in summary["rows"]]
    assert labels[:5] == ["imu0", "imu1", "imu2", "joint(0,1)", "joint(1,2)"]


def test_montecarlo_independent_of_workers(tmp_path, cfg, monkeypatch):
    main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "serial")])
    monkeypatch.setenv("CHAINTRACK_WORKERS", "2")
    main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "parallel")])
    for name in ("summary.json", "table.csv", "trials/seed_0001/report.json"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_bad_worker_count(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("CHAINTRACK_WORKERS", "zero")
    assert main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "mc")]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    # whitening weights overflow, so the normal equations cannot be factorized
    data = dict(SHORT, filter_noise={"sigma_accel": 1e-300})
    cfg = write_config(tmp_path / "bad.yaml", data)
    assert main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "mc")]) == 4
    summary = json.loads((tmp_path / "mc" / "summary.json").read_text())
    assert summary["completed"] == 0 and len(summary["failures"]) == 2
    assert summary["failures"][0]["step"] == 0
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")])
    code = main(["track", "--config", cfg, "--trial", str(tmp_path / "sim"), "--out", str(tmp_path / "t")])
    assert code == 4
    assert "step 0" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", {"solver": {"max_iterations": 0}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "solver.max_iterations" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "x")]) == 2


def test_data_error_exit_code(tmp_path, cfg, capsys):
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")])
    path = tmp_path / "sim" / "measurements.csv"
    lines = path.read_text().splitlines()
    lines[7] = lines[7].replace(",", ",x", 1)
    path.write_text("\n".join(lines) + "\n")
    code = main(["track", "--config", cfg, "--trial", str(tmp_path / "sim"), "--out", str(tmp_path / "t")])
    assert code == 3
    assert "measurements.csv:8" in capsys.readouterr().err


def test_report_passthrough_and_comparison(tmp_path, cfg, capsys):
    main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "reference")])
    other = write_config(tmp_path / "table1.yaml", dict(SHORT, filter_noise={"preset": "table1"}))
    main(["montecarlo", "--config", other, "--out", str(tmp_path / "literal")])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "reference"), "--out", str(tmp_path / "one")]) == 0
    assert "reference:median" in capsys.readouterr().out
    single = (tmp_path / "one" / "comparison.csv").read_text()
    assert single == (tmp_path / "reference" / "table.csv").read_text().replace("montecarlo", "reference")
    assert main(["report", str(tmp_path / "reference"), str(tmp_path / "literal"),
                 "--out", str(tmp_path / "cmp")]) == 0
    header = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()[0]
    assert "reference:median" in header and "literal:median" in header


def test_report_schema_mismatch(tmp_path, cfg):
    main(["montecarlo", "--config", cfg, "--seeds", "1", "--out", str(tmp_path / "a")])
    data = static_pose_files(tmp_path)
    static = write_config(tmp_path / "static.yaml", data)
    main(["simulate", "--config", static, "--out", str(tmp_path / "sim")])
    main(["track", "--config", static, "--trial", str(tmp_path / "sim"), "--out", str(tmp_path / "b")])
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b")]) == 3
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "summary.json").write_text('{"schema": "other"}')
    assert main(["report", str(tmp_path / "c")]) == 3
    assert main(["report", str(tmp_path / "missing")]) == 3
