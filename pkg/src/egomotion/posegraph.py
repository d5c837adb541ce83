"""Pose-graph fusion of regressed odometry with sparse absolute priors.

Nodes are world-frame poses ``(t, R)``; odometry factors connect
consecutive frames, prior factors pin single frames.  The graph is solved
by Levenberg-Marquardt on the pose manifold (translation additive, rotation
``R <- R Exp(dtheta)``).  Residuals are whitened by diagonal sigmas and the
cost is the plain sum of squared whitened residuals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, solveh_banded
from scipy.sparse.linalg import spsolve, splu

from .errors import ContractError, GaugeError, InvalidPoseError
from .geom import (
    AbsolutePose,
    RelativePose,
    Trajectory,
    euler_to_matrix,
    matrix_to_quat,
    read_trajectory_csv,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian_inv,
    write_trajectory_csv,
)
from .io_utils import format_kv

log = logging.getLogger(__name__)

ODOM_SIGMA_T = 5e-2
ODOM_SIGMA_R = 1e-3
PRIOR_SIGMA_T = 0.01
PRIOR_SIGMA_R = 0.1
MISSING_INFLATION = 10.0
NOISE_MODES = ("fixed", "covariance")


@dataclass
class OdometryFactor:
    i: int
    j: int
    t: np.ndarray           # measured translation in frame i
    R: np.ndarray           # measured rotation
    sigma: np.ndarray       # (6,) translation then rotation


@dataclass
class PriorFactor:
    i: int
    t: np.ndarray
    R: np.ndarray
    sigma: np.ndarray


@dataclass
class SolverReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    message: str = ""
    covariance: np.ndarray | None = None    # (N, 6) marginal variances, optional
    solves: int = 1

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": format(self.initial_cost, ".17g"),
            "final_cost": format(self.final_cost, ".17g"),
            "converged": str(self.converged).lower(),
            "solves": self.solves,
            "message": self.message,
        }

    def to_kv(self) -> str:
        return format_kv(self.to_dict())


def _sigma(trans, rot) -> np.ndarray:
    s = np.concatenate([np.broadcast_to(np.asarray(trans, float), 3), np.broadcast_to(np.asarray(rot, float), 3)])
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise ContractError("noise sigmas must be positive and finite")
    return s


@dataclass(eq=False)
class FactorGraph:
    """Chain-topology pose graph keyed by frame id."""

    nodes: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    odometry: list[OdometryFactor] = field(default_factory=list)
    priors: list[PriorFactor] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    _odom_keys: set = field(default_factory=set)

    @property
    def n_factors(self) -> int:
        return len(self.odometry) + len(self.priors)

    def frame_ids(self) -> np.ndarray:
        return np.array(sorted(self.nodes), dtype=np.int64)

    def estimate(self, frame_id: int) -> AbsolutePose:
        t, R = self.nodes[frame_id]
        return AbsolutePose(tuple(t), tuple(matrix_to_quat(R)))

    def trajectory(self) -> Trajectory:
        ids = self.frame_ids()
        t = np.array([self.nodes[i][0] for i in ids]).reshape(-1, 3)
        R = np.array([self.nodes[i][1] for i in ids]).reshape(-1, 3, 3)
        return Trajectory(ids, t, matrix_to_quat(R))

    def set_estimates(self, ids: np.ndarray, t: np.ndarray, R: np.ndarray) -> None:
        for k, i in enumerate(ids):
            self.nodes[int(i)] = (t[k].copy(), R[k].copy())

    def add_node(self, frame_id: int, pose: AbsolutePose) -> None:
        self.nodes[int(frame_id)] = (np.array(pose.t, dtype=float), pose.rotation.copy())


def add_odometry_factor(graph: FactorGraph, i: int, j: int, rel: RelativePose | None,
                        sigma_t=ODOM_SIGMA_T, sigma_r=ODOM_SIGMA_R) -> FactorGraph:
    """Append a relative-motion factor between frames ``i`` and ``j = i + 1``.

    ``rel=None`` means no estimate for the pair: an identity motion with
    10x inflated noise keeps the chain connected.
    """
    i, j = int(i), int(j)
    if j != i + 1:
        raise ContractError(f"odometry must connect consecutive frames, got ({i}, {j})")
    if i not in graph.nodes:
        raise ContractError(f"odometry factor references missing node {i}")
    if (i, j) in graph._odom_keys:
        raise ContractError(f"duplicate odometry factor ({i}, {j})")
    sigma = _sigma(sigma_t, sigma_r)
    if rel is None:
        rel = RelativePose()
        sigma = sigma * MISSING_INFLATION
        msg = f"no estimate for pair ({i}, {j}); identity odometry with inflated noise"
        graph.events.append(msg)
        log.info(msg)
    tm = np.array(rel.t, dtype=float)
    Rm = euler_to_matrix(np.array(rel.r, dtype=float))
    if not (np.all(np.isfinite(tm)) and np.all(np.isfinite(Rm))):
        raise InvalidPoseError("odometry measurement must be finite")
    if j not in graph.nodes:
        ti, Ri = graph.nodes[i]
        graph.nodes[j] = (ti + Ri @ tm, Ri @ Rm)
    graph.odometry.append(OdometryFactor(i, j, tm, Rm, sigma))
    graph._odom_keys.add((i, j))
    return graph


def add_prior_factor(graph: FactorGraph, i: int, pose: AbsolutePose,
                     sigma_t=PRIOR_SIGMA_T, sigma_r=PRIOR_SIGMA_R) -> FactorGraph:
    """Append an absolute pose prior; a missing node is created at the prior."""
    i = int(i)
    if i not in graph.nodes:
        graph.add_node(i, pose)
    graph.priors.append(PriorFactor(i, np.array(pose.t, dtype=float), pose.rotation.copy(), _sigma(sigma_t, sigma_r)))
    return graph


# --------------------------------------------------------------------------
# linearization
# --------------------------------------------------------------------------

def _stack_factors(graph: FactorGraph, index: dict[int, int]):
    odo = graph.odometry
    pri = graph.priors
    o = {
        "i": np.array([index[f.i] for f in odo], dtype=np.int64),
        "j": np.array([index[f.j] for f in odo], dtype=np.int64),
        "t": np.array([f.t for f in odo]).reshape(-1, 3),
        "R": np.array([f.R for f in odo]).reshape(-1, 3, 3),
        "s": np.array([f.sigma for f in odo]).reshape(-1, 6),
    }
    p = {
        "i": np.array([index[f.i] for f in pri], dtype=np.int64),
        "t": np.array([f.t for f in pri]).reshape(-1, 3),
        "R": np.array([f.R for f in pri]).reshape(-1, 3, 3),
        "s": np.array([f.sigma for f in pri]).reshape(-1, 6),
    }
    return o, p


def _residuals(t, R, o, p) -> np.ndarray:
    """Whitened residual vector: odometry blocks then prior blocks."""
    ti, tj, Ri, Rj = t[o["i"]], t[o["j"]], R[o["i"]], R[o["j"]]
    RiT = np.swapaxes(Ri, -1, -2)
    a = np.einsum("nab,nb->na", RiT, tj - ti)
    r_ot = a - o["t"]
    E = np.swapaxes(o["R"], -1, -2) @ RiT @ Rj
    r_or = so3_log(E).reshape(-1, 3)
    r_pt = t[p["i"]] - p["t"]
    r_pr = so3_log(np.swapaxes(p["R"], -1, -2) @ R[p["i"]]).reshape(-1, 3)
    r_o = np.hstack([r_ot, r_or]) / o["s"]
    r_p = np.hstack([r_pt, r_pr]) / p["s"]
    return np.concatenate([r_o.reshape(-1), r_p.reshape(-1)])


def _cost(t, R, o, p) -> float:
    r = _residuals(t, R, o, p)
    return float(r @ r)


def _jacobian(t, R, o, p, n_nodes: int) -> sp.csr_matrix:
    """Sparse whitened Jacobian w.r.t. per-node ``(dt, dtheta)``."""
    no, npr = len(o["i"]), len(p["i"])
    rows, cols, vals = [], [], []

    def put(res_base, node, block):
        # block: (M, 3, 3) placed at residual rows res_base + [0..2], node cols node*6 + off
        M = block.shape[0]
        rr = res_base[:, None, None] + np.arange(3)[None, :, None]
        cc = node[:, None, None] + np.arange(3)[None, None, :]
        rows.append(np.broadcast_to(rr, (M, 3, 3)).reshape(-1))
        cols.append(np.broadcast_to(cc, (M, 3, 3)).reshape(-1))
        vals.append(block.reshape(-1))

    if no:
        ti, tj, Ri, Rj = t[o["i"]], t[o["j"]], R[o["i"]], R[o["j"]]
        RiT = np.swapaxes(Ri, -1, -2)
        a = np.einsum("nab,nb->na", RiT, tj - ti)
        E = np.swapaxes(o["R"], -1, -2) @ RiT @ Rj
        Jinv = so3_right_jacobian_inv(so3_log(E).reshape(-1, 3))
        wt = 1.0 / o["s"][:, :3, None]
        wr = 1.0 / o["s"][:, 3:, None]
        base_t = np.arange(no) * 6
        base_r = base_t + 3
        put(base_t, o["i"] * 6, -RiT * wt)
        put(base_t, o["j"] * 6, RiT * wt)
        put(base_t, o["i"] * 6 + 3, skew(a) * wt)
        put(base_r, o["j"] * 6 + 3, Jinv * wr)
        put(base_r, o["i"] * 6 + 3, -(Jinv @ np.swapaxes(Rj, -1, -2) @ Ri) * wr)
    if npr:
        off = no * 6
        Ep = np.swapaxes(p["R"], -1, -2) @ R[p["i"]]
        Jinv = so3_right_jacobian_inv(so3_log(Ep).reshape(-1, 3))
        base_t = off + np.arange(npr) * 6
        eye = np.broadcast_to(np.eye(3), (npr, 3, 3))
        put(base_t, p["i"] * 6, eye / p["s"][:, :3, None])
        put(base_t + 3, p["i"] * 6 + 3, Jinv / p["s"][:, 3:, None])
    m = 6 * (no + npr)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m, 6 * n_nodes))


def _retract(t, R, delta):
    d = delta.reshape(-1, 6)
    return t + d[:, :3], R @ so3_exp(d[:, 3:])


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

BAND = 11   # chain topology: node k couples only to k - 1 and k + 1


def _damped_solve(H: sp.csc_matrix, diag: np.ndarray, lam: float, g: np.ndarray) -> np.ndarray:
    """Solve (H + lam diag) x = -g; banded Cholesky for chains, sparse LU otherwise."""
    A = (H + sp.diags(lam * diag)).tocoo()
    off = A.row - A.col
    if np.all(np.abs(off) <= BAND):
        # Jacobi scaling first: rotation and translation precisions differ by
        # orders of magnitude and the soft chain modes lose digits otherwise
        d = 1.0 / np.sqrt(diag * (1.0 + lam))
        low = off >= 0
        ab = np.zeros((BAND + 1, A.shape[0]))
        ab[off[low], A.col[low]] = A.data[low] * d[A.row[low]] * d[A.col[low]]
        try:
            return d * solveh_banded(ab, -g * d, lower=True, check_finite=False)
        except LinAlgError:
            pass
    return -spsolve(A.tocsc(), g)

def solve(graph: FactorGraph, max_iters: int = 100, rel_tol: float = 1e-9, step_tol: float = 1e-12,
          compute_covariance: bool = False) -> tuple[Trajectory, SolverReport]:
    """Levenberg-Marquardt with Marquardt diagonal scaling.

    Damping starts at 1e-4 and is divided by 10 on accepted steps and
    multiplied by 10 on rejected ones.  Iteration stops once a step moves
    no coordinate by more than ``step_tol``, or once the relative cost
    change is below ``rel_tol`` and the step has reached round-off level.
    A cost criterion alone stops early along the soft long-wavelength modes
    of a chain; the step condition is what makes warm-started and cold
    solves agree to ~1e-9.  The estimates stored in ``graph`` are updated.
    """
    if not graph.priors:
        raise GaugeError("pose graph has no prior factor; the solution is not unique")
    ids = graph.frame_ids()
    index = {int(f): k for k, f in enumerate(ids)}
    missing = set(index) - {f.i for f in graph.odometry} - {f.j for f in graph.odometry} - {f.i for f in graph.priors}
    if missing and len(ids) > 1:
        raise ContractError(f"nodes without factors: {sorted(missing)[:5]}")
    o, p = _stack_factors(graph, index)
    t = np.array([graph.nodes[i][0] for i in ids]).reshape(-1, 3)
    R = np.array([graph.nodes[i][1] for i in ids]).reshape(-1, 3, 3)
    n = len(ids)
    cost = _cost(t, R, o, p)
    initial = cost
    lam = 1e-4
    converged = False
    message = "max iterations reached"
    it = 0
    stalls = 0
    if cost < 1e-30:
        converged, message = True, "zero initial cost"
    while not converged and it < max_iters:
        it += 1
        r = _residuals(t, R, o, p)
        J = _jacobian(t, R, o, p, n)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        diag = np.maximum(diag, 1e-12 * max(1.0, float(diag.max())))
        accepted = False
        while lam <= 1e16:
            delta = _damped_solve(H, diag, lam, g)
            if np.all(np.isfinite(delta)):
                t_new, R_new = _retract(t, R, delta)
                new_cost = _cost(t_new, R_new, o, p)
                # near the optimum cost differences drop below its round-off
                # while the step itself is still informative
                small = float(np.max(np.abs(delta), initial=0.0)) < 1e-6
                if new_cost <= cost or (small and new_cost <= cost * (1.0 + 1e-12)):
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            # no descent left at machine precision
            grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
            converged = grad_norm < 1e-6 * max(1.0, np.sqrt(cost))
            message = "converged (no further descent)" if converged else "damping exhausted"
            break
        step = float(np.max(np.abs(delta))) if delta.size else 0.0
        change = (cost - new_cost) / max(cost, 1e-300)
        t, R, cost = t_new, R_new, new_cost
        lam = max(lam / 10.0, 1e-12)
        if step < step_tol or cost < 1e-30:
            converged, message = True, "converged"
        elif abs(change) < rel_tol and step < 1e-9 and stalls >= 3:
            converged, message = True, "converged (step at round-off)"
        stalls = stalls + 1 if abs(change) < rel_tol and step < 1e-9 else 0
    if not np.isfinite(cost):
        converged, message = False, "non-finite cost"
    graph.set_estimates(ids, t, R)
    cov = _marginals(graph, index, o, p, t, R) if compute_covariance else None
    report = SolverReport(it, float(initial), float(cost), converged, message, cov)
    return graph.trajectory(), report


def _marginals(graph, index, o, p, t, R) -> np.ndarray:
    """Diagonal of the inverse information matrix, per node (N, 6)."""
    n = len(index)
    J = _jacobian(t, R, o, p, n)
    lu = splu((J.T @ J).tocsc())
    out = np.empty(6 * n)
    chunk = 600
    for s in range(0, 6 * n, chunk):
        e = np.zeros((6 * n, min(chunk, 6 * n - s)))
        e[np.arange(s, s + e.shape[1]), np.arange(e.shape[1])] = 1.0
        x = lu.solve(e)
        out[s:s + e.shape[1]] = x[np.arange(s, s + e.shape[1]), np.arange(e.shape[1])]
    return out.reshape(n, 6)


def cost_of(graph: FactorGraph) -> float:
    """Whitened cost of the graph at its current estimates."""
    ids = graph.frame_ids()
    index = {int(f): k for k, f in enumerate(ids)}
    o, p = _stack_factors(graph, index)
    t = np.array([graph.nodes[i][0] for i in ids]).reshape(-1, 3)
    R = np.array([graph.nodes[i][1] for i in ids]).reshape(-1, 3, 3)
    return _cost(t, R, o, p)


# --------------------------------------------------------------------------
# streaming fusion
# --------------------------------------------------------------------------

def _odometry_sigmas(est, noise_mode: str):
    if noise_mode == "fixed" or est is None:
        return ODOM_SIGMA_T, ODOM_SIGMA_R
    var = np.asarray(est.var, dtype=float)
    s = np.sqrt(np.maximum(var, 1e-12))
    return s[:3], s[3:]


def _as_relative(est) -> RelativePose | None:
    if est is None:
        return None
    if isinstance(est, RelativePose):
        return est
    if hasattr(est, "as_relative_pose"):
        return est.as_relative_pose()
    return RelativePose.from_vector(np.asarray(est, dtype=float))


def build_graph(rels: Sequence, priors: Sequence[tuple[int, AbsolutePose]], frame_ids=None,
                noise_mode: str = "fixed") -> FactorGraph:
    """Whole graph at once, initialized by dead reckoning."""
    graph = FactorGraph()
    frame_ids = _frame_ids(rels, frame_ids)
    by_frame = _priors_by_frame(priors)
    graph.add_node(int(frame_ids[0]), _start_pose(by_frame, int(frame_ids[0])))
    for k, est in enumerate(rels):
        i, j = int(frame_ids[k]), int(frame_ids[k + 1])
        add_odometry_factor(graph, i, j, _as_relative(est), *_odometry_sigmas(est, noise_mode))
    for f, pose in priors:
        add_prior_factor(graph, f, pose)
    return graph


def _frame_ids(rels, frame_ids):
    if frame_ids is None:
        return np.arange(len(rels) + 1)
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    if len(frame_ids) != len(rels) + 1:
        raise ContractError("frame_ids must have one more entry than rels")
    return frame_ids


def _priors_by_frame(priors) -> dict[int, list[AbsolutePose]]:
    out: dict[int, list[AbsolutePose]] = {}
    last = None
    for f, pose in priors:
        if last is not None and f < last:
            raise ContractError("prior schedule must be sorted by frame id")
        last = f
        out.setdefault(int(f), []).append(pose)
    return out


def _start_pose(by_frame, first: int) -> AbsolutePose:
    return by_frame[first][0] if first in by_frame else AbsolutePose.identity()


def fuse_trajectory(rels: Sequence, priors: Sequence[tuple[int, AbsolutePose]], update_every: int = 10,
                    frame_ids=None, noise_mode: str = "fixed", max_iters: int = 100) -> tuple[Trajectory, SolverReport]:
    """Stream odometry and priors in frame order, re-solving every
    ``update_every`` frames from the previous solution.

    ``rels[k]`` is the estimate (GaussianPose, RelativePose, 6-vector or
    None) for the motion from ``frame_ids[k]`` to ``frame_ids[k + 1]``.
    Solves are skipped until the first prior has arrived.  A final solve
    always runs, so the result matches a single batch solve of the full
    graph to solver tolerance.  The report carries the costs of that final
    solve and the iteration count summed over all solves.
    """
    if noise_mode not in NOISE_MODES:
        raise ContractError(f"unknown noise mode {noise_mode!r}")
    if update_every < 1:
        raise ContractError("update_every must be >= 1")
    frame_ids = _frame_ids(rels, frame_ids)
    by_frame = _priors_by_frame(priors)
    unknown = set(by_frame) - set(int(f) for f in frame_ids)
    if unknown:
        raise ContractError(f"priors on unknown frames: {sorted(unknown)[:5]}")
    graph = FactorGraph()
    first = int(frame_ids[0])
    graph.add_node(first, _start_pose(by_frame, first))
    for pose in by_frame.get(first, []):
        add_prior_factor(graph, first, pose)
    solves, iters = 0, 0
    report = None
    for k, est in enumerate(rels):
        i, j = int(frame_ids[k]), int(frame_ids[k + 1])
        add_odometry_factor(graph, i, j, _as_relative(est), *_odometry_sigmas(est, noise_mode))
        for pose in by_frame.get(j, []):
            add_prior_factor(graph, j, pose)
        if (k + 1) % update_every == 0 and graph.priors and k + 1 < len(rels):
            _, report = solve(graph, max_iters)
            solves += 1
            iters += report.iterations
    _, report = solve(graph, max_iters)
    solves += 1
    iters += report.iterations
    report.solves = solves
    report.iterations = iters
    return graph.trajectory(), report


# --------------------------------------------------------------------------
# prior schedules
# --------------------------------------------------------------------------

def prior_schedule(truth: Trajectory, stride: int, noise_sigma: float = 0.0, seed: int = 0,
                   include_last: bool = False) -> list[tuple[int, AbsolutePose]]:
    """Absolute poses every ``stride`` frames starting at the first frame.

    ``noise_sigma`` adds isotropic Gaussian position noise (meters).
    """
    if stride < 1:
        raise ContractError("prior stride must be >= 1")
    idx = list(range(0, len(truth), stride))
    if include_last and idx[-1] != len(truth) - 1:
        idx.append(len(truth) - 1)
    rng = np.random.default_rng([seed, 505])
    out = []
    for k in idx:
        t = truth.t[k] + (rng.normal(0.0, noise_sigma, 3) if noise_sigma > 0 else 0.0)
        out.append((int(truth.frame_ids[k]), AbsolutePose(tuple(t), tuple(truth.q[k]))))
    return out


def write_prior_schedule(path, priors) -> None:
    ids = [f for f, _ in priors]
    t = np.array([p.t for _, p in priors]).reshape(-1, 3)
    q = np.array([p.q for _, p in priors]).reshape(-1, 4)
    write_trajectory_csv(path, Trajectory(np.array(ids, dtype=np.int64), t, q))


def read_prior_schedule(path) -> list[tuple[int, AbsolutePose]]:
    traj = read_trajectory_csv(path)
    return [(int(f), pose) for f, pose in traj]


def dead_reckoning(rels: Sequence, origin: AbsolutePose | None = None, frame_ids=None) -> Trajectory:
    """Plain chaining of the same estimates ``fuse_trajectory`` consumes."""
    frame_ids = _frame_ids(rels, frame_ids)
    graph = FactorGraph()
    graph.add_node(int(frame_ids[0]), origin or AbsolutePose.identity())
    for k, est in enumerate(rels):
        add_odometry_factor(graph, int(frame_ids[k]), int(frame_ids[k + 1]), _as_relative(est))
    return graph.trajectory()


__all__ = [
    "FactorGraph", "SolverReport", "add_odometry_factor", "add_prior_factor", "solve", "fuse_trajectory",
    "build_graph", "prior_schedule", "write_prior_schedule", "read_prior_schedule", "dead_reckoning",
    "cost_of",
]
