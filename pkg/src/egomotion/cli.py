"""Command-line entry point: simulate, train, evaluate, fuse, predict-flow.

Every command reads an optional flat key-value config (``--config``),
writes its outputs atomically under ``--out-dir`` and records a
``manifest.json`` with inputs, outputs, digests and timings.  Exit codes:
0 success, 2 configuration error, 3 numeric abort, 1 other failures.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import cvae as cv
from . import posegraph as pg
from . import sim
from . import trainer as tr
from .camera import CAMERA_KEYS, CameraModel
from .errors import ConfigurationError, EgomotionError, NumericError, TrackFormatError
from .evaluation import evaluate_trajectory, measure_latency
from .geom import AbsolutePose, RelativePose, read_trajectory_csv, write_trajectory_csv
from .io_utils import atomic_write_text, format_kv, read_kv, subsection
from .mdn import predict_pairs

log = logging.getLogger("egomotion")

SECTIONS = ("sim", "camera", "stage1", "stage2", "model", "cvae", "train", "fuse", "predict")
NONDETERMINISTIC = ("manifest.json", "timing.txt")


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = ""
    timings_s: dict[str, float] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)

    def phase(self, name: str):
        return _Phase(self, name)

    def write(self, out_dir: Path) -> None:
        data = asdict(self)
        data["input_sha256"] = {k: _digest(Path(v)) for k, v in self.inputs.items() if Path(v).exists()}
        data["output_sha256"] = {k: _digest(out_dir / v) for k, v in self.outputs.items() if (out_dir / v).exists()}
        data["nondeterministic"] = list(NONDETERMINISTIC)
        atomic_write_text(out_dir / "manifest.json", json.dumps(data, indent=1, sort_keys=True) + "\n")


class _Phase:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings_s[self.name] = time.perf_counter() - self.t0


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    cfg = read_kv(path)
    bad = sorted(k for k in cfg if k.split(".")[0] not in SECTIONS or "." not in k)
    if bad:
        raise ConfigurationError(f"unknown config keys: {bad}")
    return cfg


def camera_from_config(cfg: dict) -> CameraModel:
    cam = subsection(cfg, "camera")
    bad = sorted(set(cam) - set(CAMERA_KEYS))
    if bad:
        raise ConfigurationError(f"unknown camera keys: {bad}")
    return CameraModel.from_dict(cam)


def sim_config(cfg: dict, seed: int | None) -> sim.SimulationConfig:
    s = subsection(cfg, "sim")
    spec = {f.name: f for f in fields(sim.SimulationConfig) if f.name != "camera"}
    bad = sorted(set(s) - set(spec))
    if bad:
        raise ConfigurationError(f"unknown sim keys: {bad}")
    vals = {}
    for k, v in s.items():
        default = getattr(sim.SimulationConfig(), k)
        try:
            if k == "trajectory_kind":
                vals[k] = v
            elif k in ("n_frames", "points_per_box", "scene_stride", "max_features", "seed", "scene_seed"):
                vals[k] = int(v)
            else:
                vals[k] = float(v)
        except ValueError:
            raise ConfigurationError(f"bad value for sim.{k}: {v!r} (default {default!r})") from None
    if seed is not None:
        vals["seed"] = seed
    cfg_obj = sim.SimulationConfig(camera=camera_from_config(cfg), **vals)
    if cfg_obj.trajectory_kind not in sim.TRAJECTORY_KINDS:
        raise ConfigurationError(f"unknown trajectory kind {cfg_obj.trajectory_kind!r}")
    return cfg_obj


def train_config(cfg: dict, seed: int | None) -> tr.TrainConfig:
    keys = {k: v for k, v in cfg.items() if k.split(".")[0] in ("stage1", "stage2", "model", "cvae", "train")}
    return tr.TrainConfig.from_dict(keys, seed)


def _section(cfg: dict, name: str, allowed: dict) -> dict:
    s = subsection(cfg, name)
    bad = sorted(set(s) - set(allowed))
    if bad:
        raise ConfigurationError(f"unknown {name} keys: {bad}")
    out = dict(allowed)
    for k, v in s.items():
        try:
            out[k] = type(allowed[k])(v)
        except ValueError:
            raise ConfigurationError(f"bad value for {name}.{k}: {v!r}") from None
    return out


FUSE_DEFAULTS = {"prior_stride": 150, "update_every": 10, "noise_mode": "fixed", "prior_noise": 0.0}
PREDICT_DEFAULTS = {"grid": "16x12", "ego": "1,0,0,0,0,0"}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args, cfg, manifest: RunManifest, out: Path) -> None:
    sc = sim_config(cfg, args.seed)
    manifest.seed = sc.seed
    with manifest.phase("simulate"):
        ds = sim.simulate(sc)
    with manifest.phase("write"):
        sim.save_tracks(out / "tracks.csv", ds.tracks)
        write_trajectory_csv(out / "ground_truth.csv", ds.ground_truth)
        write_trajectory_csv(out / "supervision.csv", ds.supervision.trajectory)
        atomic_write_text(out / "camera.txt", format_kv(sc.camera.to_dict()))
    manifest.outputs.update({"tracks": "tracks.csv", "ground_truth": "ground_truth.csv",
                             "supervision": "supervision.csv", "camera": "camera.txt"})
    log.info("simulated %d frames, %d pairs, %d features", len(ds.ground_truth), len(ds.tracks.pair_ids()),
             len(ds.tracks))


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} not found: {p}")
    return p


def cmd_train(args, cfg, manifest: RunManifest, out: Path) -> None:
    tracks_p = _require(args.tracks, "--tracks")
    sup_p = _require(args.supervision, "--supervision")
    manifest.inputs.update({"tracks": str(tracks_p), "supervision": str(sup_p)})
    with manifest.phase("load"):
        dataset = tr.Dataset.build(sim.load_tracks(tracks_p), read_trajectory_csv(sup_p))
    if args.resume:
        resume = _require(args.resume, "--resume")
        manifest.inputs["resume"] = str(resume)
        bundle = tr.load_checkpoint(resume)
        if args.seed is not None and args.seed != bundle.config.seed:
            raise ConfigurationError("--seed differs from the seed stored in the resumed checkpoint")
        manifest.seed = bundle.config.seed
        if bundle.stage != 1:
            raise ConfigurationError("--resume expects a Stage-1 checkpoint")
        # keep the Stage-1 rows of a curve written next to the checkpoint so a
        # resumed run emits the same loss_curve.csv as an uninterrupted one
        prev = resume.parent / "loss_curve.csv"
        curve = [r for r in tr.read_loss_curve(prev) if r.stage == 1] if prev.exists() else []
    else:
        config = train_config(cfg, args.seed)
        manifest.seed = config.seed
        bundle = tr.ModelBundle.create(config)
        ckdir = out / "checkpoint_stage1"
        with manifest.phase("stage1"):
            curve = tr.stage1_train(bundle, dataset, checkpoint_dir=out)
        tr.save_checkpoint(ckdir, bundle)
        manifest.outputs["checkpoint_stage1"] = ckdir.name
    if args.stage >= 2:
        with manifest.phase("stage2"):
            curve += tr.stage2_train(bundle, dataset, checkpoint_dir=out)
        ckdir = out / "checkpoint_stage2"
        tr.save_checkpoint(ckdir, bundle)
        manifest.outputs["checkpoint_stage2"] = ckdir.name
    tr.write_loss_curve(out / "loss_curve.csv", curve)
    manifest.outputs["loss_curve"] = "loss_curve.csv"


def _pair_estimates(bundle, tracks, frame_ids: np.ndarray):
    """GaussianPose-like estimates per consecutive frame pair (None if missing)."""
    from .mdn import GaussianPose
    pair_ids, means, var = predict_pairs(bundle.ego, tracks)
    lookup = {int(p): k for k, p in enumerate(pair_ids)}
    ests = []
    for f in frame_ids[1:]:
        k = lookup.get(int(f))
        ests.append(None if k is None else GaussianPose(means[k], var[k]))
    return ests


def _frames_for(tracks, gt):
    if gt is not None:
        return gt.frame_ids
    ids = tracks.pair_ids()
    if len(ids) == 0:
        raise ConfigurationError("tracks file contains no features")
    return np.arange(int(ids.min()) - 1, int(ids.max()) + 1)


def cmd_evaluate(args, cfg, manifest: RunManifest, out: Path) -> None:
    """Dead-reckoned trajectory of the regressed motion, without priors."""
    ck = _require(args.checkpoint, "--checkpoint")
    tracks_p = _require(args.tracks, "--tracks")
    manifest.inputs.update({"checkpoint": str(ck), "tracks": str(tracks_p)})
    gt = None
    if args.ground_truth:
        gt = read_trajectory_csv(_require(args.ground_truth, "--ground-truth"))
        manifest.inputs["ground_truth"] = str(args.ground_truth)
    bundle = tr.load_checkpoint(ck)
    tracks = sim.load_tracks(tracks_p)
    frames = _frames_for(tracks, gt)
    t0 = time.perf_counter()
    ests = _pair_estimates(bundle, tracks, frames)
    t_pred = (time.perf_counter() - t0) * 1e3
    origin = AbsolutePose(tuple(gt.t[0]), tuple(gt.q[0])) if gt is not None else None
    traj = pg.dead_reckoning(ests, origin, frames)
    latency = measure_latency(bundle.ego, tracks)
    report = evaluate_trajectory(traj, gt, {"predict": t_pred}, latency)
    _write_report(out, manifest, traj, report, "dead_reckoned.csv")


def cmd_fuse(args, cfg, manifest: RunManifest, out: Path) -> None:
    fc = _section(cfg, "fuse", FUSE_DEFAULTS)
    if fc["noise_mode"] not in pg.NOISE_MODES:
        raise ConfigurationError(f"fuse.noise_mode must be one of {pg.NOISE_MODES}")
    if args.prior_stride is not None:
        fc["prior_stride"] = args.prior_stride
    ck = _require(args.checkpoint, "--checkpoint")
    tracks_p = _require(args.tracks, "--tracks")
    manifest.inputs.update({"checkpoint": str(ck), "tracks": str(tracks_p)})
    gt = None
    if args.ground_truth:
        gt = read_trajectory_csv(_require(args.ground_truth, "--ground-truth"))
        manifest.inputs["ground_truth"] = str(args.ground_truth)
    if args.priors:
        priors = pg.read_prior_schedule(_require(args.priors, "--priors"))
        manifest.inputs["priors"] = str(args.priors)
    elif gt is not None:
        priors = pg.prior_schedule(gt, int(fc["prior_stride"]), float(fc["prior_noise"]),
                                   seed=args.seed or 0)
        pg.write_prior_schedule(out / "priors.csv", priors)
        manifest.outputs["priors"] = "priors.csv"
    else:
        raise ConfigurationError("fuse needs --priors or --ground-truth to derive a prior schedule")
    bundle = tr.load_checkpoint(ck)
    tracks = sim.load_tracks(tracks_p)
    frames = _frames_for(tracks, gt)
    with manifest.phase("predict"):
        t0 = time.perf_counter()
        ests = _pair_estimates(bundle, tracks, frames)
        t_pred = (time.perf_counter() - t0) * 1e3
    with manifest.phase("fuse"):
        t0 = time.perf_counter()
        traj, solver = pg.fuse_trajectory(ests, priors, int(fc["update_every"]), frames, fc["noise_mode"])
        t_fuse = (time.perf_counter() - t0) * 1e3
    if not solver.converged:
        log.warning("pose graph did not converge: %s", solver.message)
    atomic_write_text(out / "solver_report.txt", solver.to_kv())
    manifest.outputs["solver_report"] = "solver_report.txt"
    latency = measure_latency(bundle.ego, tracks)
    report = evaluate_trajectory(traj, gt, {"predict": t_pred, "fuse": t_fuse}, latency)
    _write_report(out, manifest, traj, report, "fused.csv")


def _write_report(out: Path, manifest: RunManifest, traj, report, name: str) -> None:
    write_trajectory_csv(out / name, traj)
    atomic_write_text(out / "eval_report.txt", report.to_kv(include_timing=False))
    atomic_write_text(out / "timing.txt", format_kv(report.timing()))
    manifest.outputs.update({"trajectory": name, "eval_report": "eval_report.txt"})
    if report.errors is not None:
        atomic_write_text(out / "errors.csv", report.errors_csv())
        manifest.outputs["errors"] = "errors.csv"
        log.info("median error %.4g m over %.1f m", report.median_error, report.trajectory_length)


def _parse_floats(text: str, n: int, what: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigurationError(f"{what} must be {n} comma-separated numbers") from None
    if vals.shape != (n,):
        raise ConfigurationError(f"{what} must be {n} comma-separated numbers")
    return vals


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"grid must look like 16x12, got {text!r}") from None
    if nx < 1 or ny < 1:
        raise ConfigurationError("grid sizes must be positive")
    return nx, ny


FLOW_HEADER = "frame_id,feature_id,x,y,dx_pred,dy_pred,dx_obs,dy_obs,score"


def grid_positions(nx: int, ny: int) -> np.ndarray:
    """Cell-centered positions in normalized coordinates, row-major."""
    xs = (np.arange(nx) + 0.5) / nx * 2.0 - 1.0
    ys = (np.arange(ny) + 0.5) / ny * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def cmd_predict_flow(args, cfg, manifest: RunManifest, out: Path) -> None:
    pc = _section(cfg, "predict", PREDICT_DEFAULTS)
    ck = _require(args.checkpoint, "--checkpoint")
    manifest.inputs["checkpoint"] = str(ck)
    bundle = tr.load_checkpoint(ck)
    f = lambda v: format(float(v), ".9g")  # noqa: E731
    lines = [FLOW_HEADER]
    if args.tracks:
        # per-feature dump with observed flow and outlier scores, conditioned
        # on the regressed ego-motion of each pair
        tracks = sim.load_tracks(_require(args.tracks, "--tracks"))
        manifest.inputs["tracks"] = str(args.tracks)
        pair_ids, means, _ = predict_pairs(bundle.ego, tracks)
        ego = means[np.searchsorted(pair_ids, tracks.frame_id)]
        pred = cv.predict_flow(bundle.flow, ego, tracks.x)
        scores = cv.outlier_scores(bundle.flow, ego, tracks.x, tracks.dx)
        for k in range(len(tracks)):
            lines.append(",".join([str(int(tracks.frame_id[k])), str(int(tracks.feature_id[k])),
                                   f(tracks.x[k, 0]), f(tracks.x[k, 1]), f(pred.dx_mean[k, 0]),
                                   f(pred.dx_mean[k, 1]), f(tracks.dx[k, 0]), f(tracks.dx[k, 1]),
                                   f(scores[k])]))
    else:
        ego = _parse_floats(args.ego or pc["ego"], 6, "--ego")
        RelativePose.from_vector(ego)
        nx, ny = _parse_grid(args.grid or pc["grid"])
        pos = grid_positions(nx, ny)
        pred = cv.predict_flow(bundle.flow, ego, pos)
        for k in range(len(pos)):
            lines.append(",".join(["0", str(k), f(pos[k, 0]), f(pos[k, 1]), f(pred.dx_mean[k, 0]),
                                   f(pred.dx_mean[k, 1]), "nan", "nan", "nan"]))
    atomic_write_text(out / "flow_prediction.csv", "\n".join(lines) + "\n")
    manifest.outputs["flow_prediction"] = "flow_prediction.csv"


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "predict-flow": cmd_predict_flow,
}


def _add_globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # the subcommand copy uses SUPPRESS so a flag given before the command
    # is not reset by the subparser default
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides sim.seed / train.seed")
    parser.add_argument("--out-dir", default=d("."), help="output directory (default: current)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    p = argparse.ArgumentParser(prog="egomotion", description=__doc__.splitlines()[0])
    _add_globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--tracks")
    t.add_argument("--supervision")
    t.add_argument("--stage", type=int, choices=(1, 2), default=2, help="stop after this stage")
    t.add_argument("--resume", help="Stage-1 checkpoint directory to continue from")
    for name, text in (("evaluate", "dead-reckon a trained model"), ("fuse", "pose-graph fusion with priors")):
        e = sub.add_parser(name, parents=[common], help=text)
        e.add_argument("--checkpoint")
        e.add_argument("--tracks")
        e.add_argument("--ground-truth")
        if name == "fuse":
            e.add_argument("--priors", help="prior schedule CSV (frame_id,tx,ty,tz,qw,qx,qy,qz)")
            e.add_argument("--prior-stride", type=int)
    f = sub.add_parser("predict-flow", parents=[common], help="C-VAE flow prediction")
    f.add_argument("--checkpoint")
    f.add_argument("--ego", help="tx,ty,tz,roll,pitch,yaw")
    f.add_argument("--grid", help="NXxNY grid of positions, e.g. 16x12")
    f.add_argument("--tracks", help="dump per-feature predictions and scores instead of a grid")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        cfg = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, args.config, args.seed, version=_version(), config=cfg)
        if args.config:
            manifest.inputs["config"] = str(args.config)
        with manifest.phase("total"):
            COMMANDS[args.command](args, cfg, manifest, out)
        manifest.write(out)
    except (ConfigurationError, TrackFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except EgomotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
