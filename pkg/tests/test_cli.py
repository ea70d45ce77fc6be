import json
import subprocess
import sys

import pytest

from velosdf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from velosdf.fileio import read_trajectory

from .test_trainer import TINY

TINY_SETS = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]


def train_args(data, out, *extra):
    return ["train", "--data", str(data), "--out", str(out), *TINY_SETS, *extra]


@pytest.fixture(scope="module")
def small_run(small_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(train_args(small_dir, out)) == EXIT_OK
    return out


def test_generate(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--scene", "orbiter", "--out", str(out), "--set", "T=4"]) == EXIT_OK
    assert len(list((out / "images").iterdir())) == 4 and len(read_trajectory(out / "gt_traj.txt")) == 4


def test_train_writes_run(small_run):
    for name in ("config.txt", "losses.csv", "stage1.txt", "stage1.bin", "stage2.txt", "stage2.bin", "traj.txt"):
        assert (small_run / name).exists(), name
    assert len(read_trajectory(small_run / "traj.txt")) == 9


def test_eval_register_render_export(small_run, small_dir, tmp_path, capsys):
    assert main(["eval", "--run", str(small_run), "--data", str(small_dir)]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert rec == json.loads((small_run / "metrics.json").read_text())
    assert rec["n_frames"] == 2 and rec["ate"] is not None
    assert main(["register-poses", "--run", str(small_run), "--data", str(small_dir)]) == EXIT_OK
    assert len(read_trajectory(small_run / "test_poses.txt")) == 2
    assert main(["render", "--run", str(small_run), "--poses", str(small_run / "test_poses.txt"),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "renders" / "test_0000.png").exists()
    assert main(["export-traj", "--run", str(small_run), "--out", str(tmp_path / "t.txt")]) == EXIT_OK
    assert (tmp_path / "t.txt").read_text() == (small_run / "traj.txt").read_text()


def test_seed_flag_is_deterministic(small_dir, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, 5), (b, 5), (c, 6)):
        assert main(train_args(small_dir, out, "--stage", "1", "--seed", str(seed))) == EXIT_OK
    assert (a / "stage1.bin").read_bytes() == (b / "stage1.bin").read_bytes()
    assert (a / "losses.csv").read_text() == (b / "losses.csv").read_text()
    assert (a / "stage1.bin").read_bytes() != (c / "stage1.bin").read_bytes()


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["train", "--data", "x", "--out", "y", "--bogus"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["generate", "--scene", "nowhere", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--data", "x", "--out", "y", "--set", "novalue"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_runtime_errors(tmp_path, small_dir):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(train_args(small_dir, tmp_path / "o", "--set", "no_such_key=1")) == EXIT_RUNTIME
    assert main(["eval", "--run", str(tmp_path), "--data", str(small_dir)]) == EXIT_RUNTIME
    assert main(train_args(small_dir, tmp_path / "o2", "--stage", "2")) == EXIT_RUNTIME  # no stage-1 checkpoint


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "velosdf.cli", "--nope"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "usage" in proc.stderr
