import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from egomotion import cli
from egomotion.errors import NumericError, TrainingAborted

TINY = """\
# tiny configuration for command tests
sim.n_frames = 80
sim.seed = 3
camera.kind = pinhole
stage1.epochs = 4
stage1.batch_pairs = 5
stage1.features_per_pair = 10
stage2.epochs = 2
stage2.batch_pairs = 20
model.hidden = 16,8
model.head_hidden = 8
cvae.hidden = 8
fuse.prior_stride = 20
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def outputs(d: Path) -> dict[str, bytes]:
    """All deterministic output files under ``d`` keyed by relative path."""
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name not in cli.NONDETERMINISTIC}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("--config", cfg, "--out-dir", root / "sim", "simulate") == 0
    s = root / "sim"
    assert run("train", "--config", cfg, "--out-dir", root / "train", "--tracks", s / "tracks.csv",
               "--supervision", s / "supervision.csv") == 0
    return root, cfg


# ---------------------------------------------------------------- simulate

def test_simulate_outputs_and_manifest(work):
    root, cfg = work
    s = root / "sim"
    for name in ("tracks.csv", "ground_truth.csv", "supervision.csv", "camera.txt", "manifest.json"):
        assert (s / name).exists()
    m = json.loads((s / "manifest.json").read_text())
    assert m["command"] == "simulate" and m["seed"] == 3
    assert set(m["output_sha256"]) == {"tracks", "ground_truth", "supervision", "camera"}
    assert m["timings_s"]["total"] > 0 and m["version"]


def test_default_simulation_has_999_pairs(tmp_path):
    assert run("--seed", 7, "--out-dir", tmp_path, "simulate") == 0
    frames = np.loadtxt(tmp_path / "tracks.csv", delimiter=",", skiprows=1, usecols=0)
    assert len(np.unique(frames)) == 999
    assert len((tmp_path / "ground_truth.csv").read_text().splitlines()) == 1001


def test_simulate_rerun_byte_identical(work, tmp_path):
    root, cfg = work
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path) == 0
    assert outputs(tmp_path) == outputs(root / "sim")


def test_optics_share_motion_not_tracks(tmp_path):
    base = "sim.n_frames = 40\nsim.seed = 5\n"
    dirs = {}
    for kind in ("fisheye-equidistant", "catadioptric-unified"):
        cfg = tmp_path / f"{kind}.cfg"
        cfg.write_text(base + f"camera.kind = {kind}\n")
        dirs[kind] = tmp_path / kind
        assert run("simulate", "--config", cfg, "--out-dir", dirs[kind]) == 0
    a, b = dirs.values()
    assert (a / "supervision.csv").read_bytes() == (b / "supervision.csv").read_bytes()
    assert (a / "ground_truth.csv").read_bytes() == (b / "ground_truth.csv").read_bytes()
    assert (a / "tracks.csv").read_bytes() != (b / "tracks.csv").read_bytes()


@pytest.mark.parametrize("text,needle", [
    ("sim.bogus = 1\n", "bogus"),
    ("render.n = 1\n", "render.n"),
    ("camera.kind = telescope\n", "telescope"),
    ("sim.n_frames = many\n", "n_frames"),
])
def test_invalid_config_exits_2_naming_key(tmp_path, capsys, text, needle):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "o") == 2
    assert needle in capsys.readouterr().err


def test_global_flags_before_or_after_command(work, tmp_path):
    root, cfg = work
    assert run("--config", cfg, "simulate", "--out-dir", tmp_path / "a") == 0
    assert run("simulate", "--out-dir", tmp_path / "b", "--config", cfg) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_seed_flag_overrides_config(work, tmp_path):
    root, cfg = work
    assert run("simulate", "--config", cfg, "--seed", 4, "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 4
    assert (tmp_path / "tracks.csv").read_bytes() != (root / "sim" / "tracks.csv").read_bytes()


# ---------------------------------------------------------------- train

def test_train_writes_both_checkpoints_and_full_curve(work):
    root, _ = work
    t = root / "train"
    assert (t / "checkpoint_stage1" / "tensors.bin").exists()
    assert (t / "checkpoint_stage2" / "tensors.bin").exists()
    lines = (t / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,l_mdn,l_traj,l_cvae,total"
    assert len(lines) - 1 == 4 + 2


def test_train_stage_one_only(work, tmp_path):
    root, cfg = work
    s = root / "sim"
    assert run("train", "--stage", 1, "--config", cfg, "--out-dir", tmp_path, "--tracks", s / "tracks.csv",
               "--supervision", s / "supervision.csv") == 0
    assert (tmp_path / "checkpoint_stage1").exists() and not (tmp_path / "checkpoint_stage2").exists()
    assert len((tmp_path / "loss_curve.csv").read_text().splitlines()) - 1 == 4
    assert (tmp_path / "checkpoint_stage1" / "tensors.bin").read_bytes() == \
        (root / "train" / "checkpoint_stage1" / "tensors.bin").read_bytes()


def test_resume_from_stage1_is_bit_exact(work, tmp_path):
    root, cfg = work
    s = root / "sim"
    assert run("train", "--out-dir", tmp_path, "--resume", root / "train" / "checkpoint_stage1",
               "--tracks", s / "tracks.csv", "--supervision", s / "supervision.csv") == 0
    for name in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "checkpoint_stage2" / name).read_bytes() == \
            (root / "train" / "checkpoint_stage2" / name).read_bytes()
    assert (tmp_path / "loss_curve.csv").read_bytes() == (root / "train" / "loss_curve.csv").read_bytes()


def test_resume_with_other_seed_rejected(work, tmp_path):
    root, _ = work
    s = root / "sim"
    assert run("train", "--seed", 99, "--out-dir", tmp_path, "--resume", root / "train" / "checkpoint_stage1",
               "--tracks", s / "tracks.csv", "--supervision", s / "supervision.csv") == 2


def test_train_missing_inputs_exit_2(tmp_path):
    assert run("train", "--out-dir", tmp_path) == 2
    assert run("train", "--out-dir", tmp_path, "--tracks", tmp_path / "none.csv",
               "--supervision", tmp_path / "none.csv") == 2


def test_malformed_track_file_exit_2(work, tmp_path, capsys):
    root, cfg = work
    bad = tmp_path / "tracks.csv"
    bad.write_text("frame_id,feature_id,x,y,dx,dy\n1,0,0.1,0.2,0.0\n")
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "o", "--tracks", bad,
               "--supervision", root / "sim" / "supervision.csv") == 2
    assert "line 2" in capsys.readouterr().err


def test_numeric_abort_exit_3(monkeypatch, tmp_path, capsys):
    def boom(*a):
        raise TrainingAborted("non-finite loss at stage 1 epoch 3", checkpoint=None, epoch=3)

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert run("simulate", "--out-dir", tmp_path) == 3
    assert "non-finite" in capsys.readouterr().err
    assert issubclass(TrainingAborted, NumericError)


# ---------------------------------------------------------------- evaluate / fuse

def test_evaluate_reports_metrics_and_latency(work, tmp_path):
    root, _ = work
    s = root / "sim"
    assert run("evaluate", "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--tracks", s / "tracks.csv", "--ground-truth", s / "ground_truth.csv") == 0
    rep = dict(l.split(" = ") for l in (tmp_path / "eval_report.txt").read_text().splitlines())
    errs = np.loadtxt(tmp_path / "errors.csv", delimiter=",", skiprows=1)
    assert float(rep["median_error_m"]) == float(np.median(errs[:, 1]))
    assert int(rep["frames"]) == 80
    timing = dict(l.split(" = ") for l in (tmp_path / "timing.txt").read_text().splitlines())
    assert float(timing["latency_ms_per_frame"]) > 0


def test_fuse_with_ground_truth_priors(work, tmp_path):
    root, cfg = work
    s = root / "sim"
    assert run("fuse", "--config", cfg, "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--tracks", s / "tracks.csv", "--ground-truth", s / "ground_truth.csv") == 0
    priors = np.loadtxt(tmp_path / "priors.csv", delimiter=",", skiprows=1)
    assert priors[:, 0].tolist() == [0, 20, 40, 60]
    rep = dict(l.split(" = ") for l in (tmp_path / "eval_report.txt").read_text().splitlines())
    assert "median_error_m" in rep
    solver = dict(l.split(" = ") for l in (tmp_path / "solver_report.txt").read_text().splitlines())
    assert solver["converged"] == "true"
    assert len((tmp_path / "fused.csv").read_text().splitlines()) == 81


def test_fuse_without_ground_truth_has_no_error_metrics(work, tmp_path):
    root, cfg = work
    s = root / "sim"
    pri = tmp_path / "given_priors.csv"
    lines = (s / "ground_truth.csv").read_text().splitlines()
    pri.write_text("\n".join([lines[0], lines[1], lines[41]]) + "\n")
    out = tmp_path / "o"
    assert run("fuse", "--out-dir", out, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--tracks", s / "tracks.csv", "--priors", pri) == 0
    rep = (out / "eval_report.txt").read_text()
    assert "median_error_m" not in rep and "frames = 80" in rep
    assert not (out / "errors.csv").exists()


def test_fuse_without_priors_or_truth_exit_2(work, tmp_path):
    root, _ = work
    assert run("fuse", "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--tracks", root / "sim" / "tracks.csv") == 2


def test_fuse_bad_noise_mode_exit_2(work, tmp_path):
    root, _ = work
    cfg = tmp_path / "c.cfg"
    cfg.write_text("fuse.noise_mode = robust\n")
    s = root / "sim"
    assert run("fuse", "--config", cfg, "--out-dir", tmp_path / "o", "--checkpoint",
               root / "train" / "checkpoint_stage2", "--tracks", s / "tracks.csv",
               "--ground-truth", s / "ground_truth.csv") == 2


# ---------------------------------------------------------------- predict-flow

def test_predict_flow_grid_rows(work, tmp_path):
    root, _ = work
    assert run("predict-flow", "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--grid", "16x12", "--ego", "1,0,0,0,0,0") == 0
    lines = (tmp_path / "flow_prediction.csv").read_text().splitlines()
    assert lines[0] == "frame_id,feature_id,x,y,dx_pred,dy_pred,dx_obs,dy_obs,score"
    assert len(lines) - 1 == 192
    xy = np.array([[float(v) for v in l.split(",")[2:4]] for l in lines[1:]])
    assert np.all(np.abs(xy) < 1)


def test_predict_flow_tracks_dump(work, tmp_path):
    root, _ = work
    s = root / "sim"
    assert run("predict-flow", "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               "--tracks", s / "tracks.csv") == 0
    rows = (tmp_path / "flow_prediction.csv").read_text().splitlines()[1:]
    n_tracks = len((s / "tracks.csv").read_text().splitlines()) - 1
    assert len(rows) == n_tracks
    scores = np.array([float(r.split(",")[-1]) for r in rows])
    assert np.all(np.isfinite(scores)) and np.all(scores >= 0)


@pytest.mark.parametrize("flag,value", [("--grid", "16by12"), ("--grid", "0x4"), ("--ego", "1,0,0")])
def test_predict_flow_bad_arguments(work, tmp_path, flag, value):
    root, _ = work
    assert run("predict-flow", "--out-dir", tmp_path, "--checkpoint", root / "train" / "checkpoint_stage2",
               flag, value) == 2


# ---------------------------------------------------------------- determinism

def test_every_command_replays_byte_identically(work, tmp_path):
    root, cfg = work
    s = root / "sim"
    ck = root / "train" / "checkpoint_stage2"
    commands = {
        "train": ["train", "--config", cfg, "--tracks", s / "tracks.csv", "--supervision", s / "supervision.csv"],
        "evaluate": ["evaluate", "--checkpoint", ck, "--tracks", s / "tracks.csv", "--ground-truth",
                     s / "ground_truth.csv"],
        "fuse": ["fuse", "--config", cfg, "--checkpoint", ck, "--tracks", s / "tracks.csv", "--ground-truth",
                 s / "ground_truth.csv"],
        "predict": ["predict-flow", "--checkpoint", ck, "--tracks", s / "tracks.csv"],
    }
    for name, argv in commands.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert run(*argv, "--out-dir", a) == 0 and run(*argv, "--out-dir", b) == 0
        assert outputs(a) == outputs(b), name
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["output_sha256"] == mb["output_sha256"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "egomotion", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
