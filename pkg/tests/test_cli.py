import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from anisocrowd.cli import main
from anisocrowd.data_io import read_trajectory

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "domain": [-3.0, 3.0, 0.0, 2.0],
    "d": 0.4,
    "seed": 1,
    "T": 0.5,
    "dt": 0.01,
    "params": {"lam": 0.25, "tau": 1.0, "A": 5.0, "R": 20.0, "a": 2.0, "r": 0.5},
    "groups": [
        {"count": 4, "desired": [0.7, 0.0], "color": "blue"},
        {"count": 4, "desired": [-0.7, 0.0], "color": "red"},
    ],
    "fd": {"region": [-2.5, 2.5, 0.0, 2.0], "sample_every": 0.1},
}


def dump(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


# --- simulate --------------------------------------------------------------------------


def test_simulate_writes_outputs(tmp_path, capsys):
    out = tmp_path / "sim"
    assert run("simulate", "--config", dump(tmp_path, SMALL), "--out", out) == 0
    traj = read_trajectory(out / "trajectory.csv")
    assert traj.positions.shape == (51, 8, 2)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_frames"] == 51 and summary["n_agents"] == 8
    assert summary["final_time"] == pytest.approx(0.5)
    assert set(summary["lane_count"]) == {"blue", "red"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 1
    assert manifest["outputs"] == ["trajectory.csv", "summary.json"]
    assert "simulated 8 agents" in capsys.readouterr().out


def test_simulate_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert run("simulate", "--config", missing, "--out", tmp_path / "o") == 1
    assert str(missing) in capsys.readouterr().err


def test_simulate_bad_config(tmp_path):
    cfg = dict(SMALL, T=0.333)
    assert run("simulate", "--config", dump(tmp_path, cfg), "--out", tmp_path / "o") == 1
    cfg = dict(SMALL, params={"lam": 3.0})
    assert run("simulate", "--config", dump(tmp_path, cfg), "--out", tmp_path / "o") == 1


def test_simulate_same_seed_same_bytes(tmp_path):
    cfg = dump(tmp_path, SMALL)
    for name in ("a", "b"):
        assert run("simulate", "--config", cfg, "--out", tmp_path / name, "--seed", 7) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", 8) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "c" / "trajectory.csv").read_bytes()


def test_simulate_rerun_from_manifest(tmp_path):
    assert run("simulate", "--config", dump(tmp_path, SMALL), "--out", tmp_path / "a", "--seed", 3) == 0
    assert run("simulate", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_manifest_of_other_command_rejected(tmp_path):
    assert run("simulate", "--config", dump(tmp_path, SMALL), "--out", tmp_path / "a") == 0
    assert run("fd", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 1


@pytest.mark.slow
def test_simulate_lane_config_frame_count(tmp_path):
    out = tmp_path / "lanes"
    assert run("simulate", "--config", CONFIGS / "corridor_d04.yaml", "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_frames"] == 5601 and summary["n_agents"] == 80


def test_usage_errors():
    assert run("simulate") == 1
    assert run("bogus") == 1
    assert run() == 1


# --- calibrate ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("truth")
    assert run("simulate", "--config", CONFIGS / "synthetic_truth.yaml", "--out", out) == 0
    return out / "trajectory.csv"


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


@pytest.mark.slow
def test_calibrate_synthetic_recovery(tmp_path, synthetic_data):
    out = tmp_path / "cal"
    assert run("calibrate", "--config", CONFIGS / "synthetic_calibration.yaml", "--data", synthetic_data,
               "--out", out) == 0
    params = json.loads((out / "params.json").read_text())
    assert params["final_cost"] <= 0.1 * params["initial_cost"]
    np.testing.assert_allclose([params["lam"], params["A"], params["R"]], [0.25, 5.0, 20.0], rtol=0.1)
    rows = read_history(out / "history.csv")
    assert list(rows[0]) == ["iteration", "lam", "A", "R", "J"]
    assert len(rows) == params["iterations"] + 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["u0"] == [0.0, 0.0, 40.0]


def test_calibrate_records_u0_and_reruns(tmp_path, synthetic_data):
    cfg = yaml.safe_load((CONFIGS / "synthetic_calibration.yaml").read_text())
    cfg["calibration"]["max_iters"] = 3
    out = tmp_path / "a"
    assert run("calibrate", "--config", dump(tmp_path, cfg), "--data", synthetic_data, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["u0"] == [0.0, 0.0, 40.0]
    assert manifest["inputs"]["data"] == str(synthetic_data)
    assert run("calibrate", "--config", out / "manifest.json", "--out", tmp_path / "b") == 0
    assert (out / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()


def test_calibrate_window_longer_than_data(tmp_path, synthetic_data, capsys):
    cfg = dump(tmp_path, yaml.safe_load((CONFIGS / "synthetic_calibration.yaml").read_text()))
    assert run("calibrate", "--config", cfg, "--data", synthetic_data, "--out", tmp_path / "o",
               "--window", 5) == 1
    assert "no agent covers" in capsys.readouterr().err


def test_calibrate_missing_data(tmp_path):
    cfg = dump(tmp_path, {"T": 1, "dt": 0.01})
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert run("calibrate", "--config", cfg, "--data", tmp_path / "none.txt", "--out", tmp_path / "o") == 1


def test_calibrate_archive_file(tmp_path):
    # two pedestrians walking towards each other, positions in centimeters at 16 fps
    rows = []
    for f in range(33):
        t = f / 16
        rows.append(f"1 {f} {100 * (0.7 * t)} 100.0 170")
        rows.append(f"2 {f} {100 * (3.0 - 0.7 * t)} 130.0 170")
    data = tmp_path / "walk.txt"
    data.write_text("\n".join(rows) + "\n")
    cfg = {"dt": 0.0625, "T": 2.0, "u0": [0.0, 0.0, 40.0],
           "calibration": {"beta": [0.1, 10.0, 10.0], "max_iters": 2}}
    out = tmp_path / "o"
    assert run("calibrate", "--config", dump(tmp_path, cfg), "--data", data, "--out", out,
               "--column-map", "0,1,2,3", "--unit-scale", 0.01, "--frame-rate", 16) == 0
    params = json.loads((out / "params.json").read_text())
    assert params["n_agents"] == 2 and params["iterations"] == 2


def test_calibrate_bad_column_map(tmp_path, synthetic_data):
    cfg = dump(tmp_path, {"T": 1, "dt": 0.01})
    assert run("calibrate", "--config", cfg, "--data", synthetic_data, "--out", tmp_path / "o",
               "--column-map", "a,b") == 1


# --- fd -----------------------------------------------------------------------------------------


def test_fd_small_run(tmp_path, capsys):
    out = tmp_path / "fd"
    assert run("fd", "--config", dump(tmp_path, SMALL), "--out", out) == 0
    samples = read_history(out / "fd_samples.csv")
    assert samples and list(samples[0]) == ["t", "agent", "density", "speed"]
    frames = json.loads((out / "voronoi.json").read_text())
    assert frames and all("cells" in f for f in frames)
    summary = json.loads((out / "fd_summary.json").read_text())
    assert summary["samples"] == len(samples)
    assert "pearson(density, speed)" in capsys.readouterr().out


def test_fd_region_outside_domain(tmp_path, capsys):
    assert run("fd", "--config", dump(tmp_path, SMALL), "--out", tmp_path / "o",
               "--region", 10, 12, 0, 2) == 1
    assert "outside the domain" in capsys.readouterr().err


def test_fd_too_few_agents(tmp_path, capsys):
    cfg = dict(SMALL, groups=[{"count": 2, "desired": [0.7, 0.0]}])
    out = tmp_path / "o"
    assert run("fd", "--config", dump(tmp_path, cfg), "--out", out, "--region", -3, 3, 0, 2) == 0
    assert json.loads((out / "fd_summary.json").read_text())["samples"] == 0
    assert "WARNING" in capsys.readouterr().err


def test_fd_from_trajectory_csv(tmp_path):
    assert run("simulate", "--config", dump(tmp_path, SMALL), "--out", tmp_path / "sim") == 0
    out = tmp_path / "fd"
    assert run("fd", "--data", tmp_path / "sim" / "trajectory.csv", "--region", -2.5, 2.5, 0, 2, "--out", out) == 0
    assert json.loads((out / "fd_summary.json").read_text())["samples"] > 0


def test_fd_needs_region(tmp_path):
    cfg = {k: v for k, v in SMALL.items() if k != "fd"}
    assert run("fd", "--config", dump(tmp_path, cfg), "--out", tmp_path / "o") == 1


# --- gradcheck ----------------------------------------------------------------------------------


def worst_errors(text):
    m = re.search(r"max relative error: (\S+) at dt=\S+ \((\S+) at dt=", text)
    return float(m.group(1)), float(m.group(2))


def test_gradcheck_default_passes(capsys):
    assert run("gradcheck", "--config", CONFIGS / "gradcheck.yaml") == 0
    text = capsys.readouterr().out
    assert "PASS" in text and worst_errors(text)[0] < 1e-4


def test_gradcheck_without_config(tmp_path):
    out = tmp_path / "gc"
    assert run("gradcheck", "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["passed"] is True
    assert (out / "gradcheck.csv").is_file()


def test_gradcheck_corrupted_sign_fails(capsys):
    assert run("gradcheck", "--config", CONFIGS / "gradcheck.yaml", "--corrupt-sign") == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_mismatch_shrinks_with_dt(tmp_path, capsys):
    cfg = dump(tmp_path, {"n_agents": 3, "T": 0.3, "dt": 1e-3, "instances": 2, "adjoint": "rk2", "seed": 0})
    run("gradcheck", "--config", cfg)
    fine, coarse = worst_errors(capsys.readouterr().out)
    assert fine < coarse


def test_gradcheck_rejects_large_instances(tmp_path):
    assert run("gradcheck", "--config", dump(tmp_path, {"n_agents": 9})) == 1
