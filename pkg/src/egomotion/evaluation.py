"""Trajectory error metrics and evaluation reports.

Errors are absolute: no alignment is applied before comparison, since the
fused trajectories are anchored by priors.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError
from .geom import Trajectory
from .io_utils import format_kv
from .mdn import EgoMotionModel, predict_egomotion


def per_frame_errors(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    """Translational error ``|t_pred - t_gt|`` for each frame (meters)."""
    if len(pred) != len(gt) or not np.array_equal(pred.frame_ids, gt.frame_ids):
        raise AlignmentError("prediction and ground truth cover different frame ids")
    return np.linalg.norm(pred.t - gt.t, axis=1)


def median_trajectory_error(pred: Trajectory, gt: Trajectory) -> float:
    return float(np.median(per_frame_errors(pred, gt)))


@dataclass
class EvalReport:
    frame_ids: np.ndarray
    errors: np.ndarray | None
    trajectory_length: float
    runtimes_ms: dict[str, float] = field(default_factory=dict)
    latency_ms: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def median_error(self) -> float | None:
        if self.errors is None or len(self.errors) == 0:
            return None
        return float(np.median(self.errors))

    def metrics(self) -> dict:
        """Deterministic part of the report."""
        out = {"frames": len(self.frame_ids), "trajectory_length_m": format(self.trajectory_length, ".17g")}
        med = self.median_error
        if med is not None:
            out["median_error_m"] = format(med, ".17g")
            out["median_error_fraction"] = format(med / self.trajectory_length if self.trajectory_length else 0.0,
                                                  ".17g")
            out["max_error_m"] = format(float(np.max(self.errors)), ".17g")
            out["final_error_m"] = format(float(self.errors[-1]), ".17g")
        out.update(self.extra)
        return out

    def timing(self) -> dict:
        out = {f"runtime_ms.{k}": format(v, ".6g") for k, v in sorted(self.runtimes_ms.items())}
        if self.latency_ms is not None:
            out["latency_ms_per_frame"] = format(self.latency_ms, ".6g")
        return out

    def to_kv(self, include_timing: bool = True) -> str:
        d = self.metrics()
        if include_timing:
            d.update(self.timing())
        return format_kv(d)

    def errors_csv(self) -> str:
        lines = ["frame_id,error_m"]
        if self.errors is not None:
            lines += [f"{int(f)},{format(float(e), '.17g')}" for f, e in zip(self.frame_ids, self.errors)]
        return "\n".join(lines) + "\n"


def evaluate_trajectory(pred: Trajectory, gt: Trajectory | None, runtimes_ms: dict | None = None,
                        latency_ms: float | None = None) -> EvalReport:
    if gt is None:
        return EvalReport(pred.frame_ids, None, pred.path_length(), runtimes_ms or {}, latency_ms)
    return EvalReport(gt.frame_ids, per_frame_errors(pred, gt), gt.path_length(), runtimes_ms or {}, latency_ms)


def measure_latency(model: EgoMotionModel, tracks, n_features: int = 50, max_pairs: int = 1000,
                    seed: int = 0) -> float:
    """Median wall time (ms) of ``predict_egomotion`` on ``n_features``
    features per frame pair, over up to ``max_pairs`` pairs."""
    rng = np.random.default_rng(seed)
    slices = list(tracks.pair_slices().values())[:max_pairs]
    inputs = np.hstack([tracks.x, tracks.dx]).astype(float)
    times = []
    for sl in slices:
        rows = np.arange(sl.start, sl.stop)
        if len(rows) > n_features:
            rows = np.sort(rng.choice(rows, n_features, replace=False))
        feats = inputs[rows]
        t0 = time.perf_counter()
        predict_egomotion(model, _Rows(feats))
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3) if times else float("nan")


class _Rows:
    """Adapter exposing stacked ``(x, dx)`` rows as track columns."""

    def __init__(self, rows: np.ndarray):
        self.x = rows[:, :2]
        self.dx = rows[:, 2:]
