"""Two-stage training of the ego-motion MDN and the flow C-VAE.

Stage 1 fits per-feature mixtures on short random batches with a small
trajectory term; Stage 2 re-weights the trajectory term over long windows
so the integrated motion loses its drift.  One epoch is one sampled batch
and one Adam step.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cvae as cv
from .errors import AlignmentError, ConfigurationError, ContractError, TrainingAborted
from .geom import AbsolutePose, Trajectory, euler_to_matrix, integrate, skew
from .io_utils import atomic_write_text, parse_kv, subsection
from .mdn import POSE_DIM, EgoMotionModel, feature_inputs, fused_means, mdn_nll, nll_rows, predict_pairs

log = logging.getLogger(__name__)

ROT_WEIGHT = 10.0
LOSS_HEADER = ["epoch", "stage", "l_mdn", "l_traj", "l_cvae", "total"]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    epochs: int
    batch_pairs: int
    features_per_pair: int = 50
    lr: float = 1e-3
    w_mdn: float = 10.0
    w_traj: float = 0.1
    w_cvae: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_pairs < 1 or self.features_per_pair < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if min(self.w_mdn, self.w_traj, self.w_cvae) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")

    @property
    def weights(self) -> tuple[float, float, float]:
        return self.w_mdn, self.w_traj, self.w_cvae


@dataclass(frozen=True)
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(3000, 100))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(100, 1000, w_traj=100.0))
    hidden: tuple[int, ...] = (1024, 128, 32)
    head_hidden: int = 32
    n_components: int = 5
    sigma_mode: str = "diagonal"
    dropout: float = 0.1
    latent_dim: int = 2
    cvae_hidden: int = 64
    rot_weight: float = ROT_WEIGHT
    seed: int = 0

    def __post_init__(self):
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("hidden sizes must be positive")
        if self.sigma_mode not in ("diagonal", "isotropic"):
            raise ConfigurationError(f"unknown sigma_mode {self.sigma_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.rot_weight < 0:
            raise ConfigurationError("rot_weight must be >= 0")

    @classmethod
    def desk(cls, seed: int = 0, stage1_epochs: int = 1500, stage2_epochs: int = 100) -> "TrainConfig":
        """Reduced network and budget for single-core CPU runs."""
        return cls(
            stage1=StageConfig(stage1_epochs, 100),
            stage2=StageConfig(stage2_epochs, 1000, w_traj=100.0),
            hidden=(128, 64, 32),
            seed=seed,
        )

    @classmethod
    def from_dict(cls, cfg: dict, seed: int | None = None) -> "TrainConfig":
        """Build from flat dotted keys (``stage1.lr``, ``model.hidden``, ...).

        Stage-2 values not given fall back to Stage-1 values, except epochs,
        batch_pairs and w_traj which have their own defaults.
        """
        known = {"stage1", "stage2", "model", "cvae", "train"}
        bad = sorted(k for k in cfg if k.split(".")[0] not in known)
        if bad:
            raise ConfigurationError(f"unknown training config keys: {bad}")
        base = cls()
        try:
            s1 = _stage_from(subsection(cfg, "stage1"), base.stage1)
            s2_defaults = replace(s1, epochs=base.stage2.epochs, batch_pairs=base.stage2.batch_pairs,
                                  w_traj=base.stage2.w_traj)
            s2 = _stage_from(subsection(cfg, "stage2"), s2_defaults)
            model = subsection(cfg, "model")
            vae = subsection(cfg, "cvae")
            train = subsection(cfg, "train")
            _check_keys(model, {"hidden", "head_hidden", "components", "sigma_mode", "dropout", "rot_weight"}, "model")
            _check_keys(vae, {"latent_dim", "hidden"}, "cvae")
            _check_keys(train, {"seed"}, "train")
            hidden = model.get("hidden")
            return cls(
                stage1=s1,
                stage2=s2,
                hidden=tuple(int(h) for h in hidden.split(",")) if hidden else base.hidden,
                head_hidden=int(model.get("head_hidden", base.head_hidden)),
                n_components=int(model.get("components", base.n_components)),
                sigma_mode=model.get("sigma_mode", base.sigma_mode),
                dropout=float(model.get("dropout", base.dropout)),
                latent_dim=int(vae.get("latent_dim", base.latent_dim)),
                cvae_hidden=int(vae.get("hidden", base.cvae_hidden)),
                rot_weight=float(model.get("rot_weight", base.rot_weight)),
                seed=int(seed if seed is not None else train.get("seed", base.seed)),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad training config value: {exc}") from None

    def to_dict(self) -> dict:
        out = {}
        for name in ("stage1", "stage2"):
            for k, v in asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        out["model.hidden"] = ",".join(str(h) for h in self.hidden)
        out["model.head_hidden"] = self.head_hidden
        out["model.components"] = self.n_components
        out["model.sigma_mode"] = self.sigma_mode
        out["model.dropout"] = self.dropout
        out["model.rot_weight"] = self.rot_weight
        out["cvae.latent_dim"] = self.latent_dim
        out["cvae.hidden"] = self.cvae_hidden
        out["train.seed"] = self.seed
        return out


def _check_keys(d: dict, allowed: set, section: str) -> None:
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigurationError(f"unknown {section} keys: {bad}")


def _stage_from(d: dict, default: StageConfig) -> StageConfig:
    names = {f.name: f.type for f in fields(StageConfig)}
    _check_keys(d, set(names), "stage")
    vals = asdict(default)
    for k, v in d.items():
        vals[k] = int(v) if k in ("epochs", "batch_pairs", "features_per_pair") else float(v)
    return StageConfig(**vals)


def load_train_config(path, seed: int | None = None) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    return TrainConfig.from_dict(parse_kv(text, str(path)), seed)


# --------------------------------------------------------------------------
# dataset and batches
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """Features grouped by frame pair, synchronized to supervision by frame_id.

    ``rels[i]`` is the supervision motion of pair ``pair_ids[i]`` (frames
    ``pair_ids[i] - 1`` to ``pair_ids[i]``); features of that pair occupy
    rows ``starts[i]:starts[i] + counts[i]`` of ``inputs``.
    """

    pair_ids: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    inputs: np.ndarray
    rels: np.ndarray
    supervision: Trajectory

    @classmethod
    def build(cls, tracks, supervision: Trajectory) -> "Dataset":
        if hasattr(supervision, "trajectory"):
            supervision = supervision.trajectory
        if len(tracks) == 0:
            raise ContractError("dataset needs at least one tracked feature")
        ids, starts, counts = np.unique(tracks.frame_id, return_index=True, return_counts=True)
        sup_ids = supervision.frame_ids
        have = np.isin(ids, sup_ids) & np.isin(ids - 1, sup_ids)
        if not np.all(have):
            missing = ids[~have][:5].tolist()
            raise AlignmentError(f"frame pairs without supervision poses: {missing}")
        all_rels = supervision.relative_motions()
        # relative_motions()[k] is the motion into supervision frame k + 1
        idx = np.searchsorted(sup_ids, ids)
        if np.any(sup_ids[idx - 1] != ids - 1):
            raise AlignmentError("supervision frames are not consecutive around every pair")
        return cls(ids, starts, counts, feature_inputs(tracks), all_rels[idx - 1], supervision)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_ids)

    def target_rows(self) -> np.ndarray:
        return np.repeat(self.rels, self.counts, axis=0)


@dataclass(eq=False)
class Batch:
    pair_index: np.ndarray      # indices into Dataset pairs, ascending frame id
    rows: np.ndarray            # feature row indices into Dataset.inputs
    segments: np.ndarray        # batch-pair position of each row

    @property
    def n_pairs(self) -> int:
        return len(self.pair_index)


def sample_batch(dataset: Dataset, n_pairs: int, n_features: int, seed) -> Batch:
    """Uniform pairs without replacement, then up to ``n_features`` features
    per pair without replacement.  Pairs are returned in frame order so the
    batch doubles as the trajectory window."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    P = dataset.n_pairs
    chosen = rng.permutation(P)[:min(n_pairs, P)]
    chosen.sort()
    rows, segs = [], []
    for j, i in enumerate(chosen):
        c = int(dataset.counts[i])
        pick = rng.permutation(c)[:min(n_features, c)]
        pick.sort()
        rows.append(dataset.starts[i] + pick)
        segs.append(np.full(len(pick), j, dtype=np.int64))
    return Batch(chosen, np.concatenate(rows), np.concatenate(segs))


# --------------------------------------------------------------------------
# trajectory loss
# --------------------------------------------------------------------------

_SKEW_X = skew([1.0, 0.0, 0.0])
_SKEW_Z = skew([0.0, 0.0, 1.0])


def _euler_grad(D: np.ndarray, r: np.ndarray, gD: np.ndarray) -> np.ndarray:
    """Pull (P, 3, 3) matrix adjoints back to (roll, pitch, yaw).

    With R = Rz Ry Rx: dR/droll = R [e_x]x, dR/dyaw = [e_z]x R and
    dR/dpitch = R [Rx^T e_y]x.
    """
    roll = r[:, 0]
    c, s = np.cos(roll), np.sin(roll)
    # Rx^T e_y = (0, cos roll, -sin roll)
    ey_local = np.stack([np.zeros_like(c), c, -s], axis=1)
    K = np.zeros((len(r), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -ey_local[:, 2], ey_local[:, 1]
    K[:, 1, 0], K[:, 1, 2] = ey_local[:, 2], -ey_local[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -ey_local[:, 1], ey_local[:, 0]
    d_roll = D @ _SKEW_X
    d_pitch = D @ K
    d_yaw = _SKEW_Z @ D
    return np.stack([
        np.sum(gD * d_roll, axis=(1, 2)),
        np.sum(gD * d_pitch, axis=(1, 2)),
        np.sum(gD * d_yaw, axis=(1, 2)),
    ], axis=1)


def _chain(z: np.ndarray, t0: np.ndarray, R0: np.ndarray):
    P = len(z)
    D = euler_to_matrix(z[:, 3:])
    p = np.empty((P + 1, 3))
    R = np.empty((P + 1, 3, 3))
    p[0], R[0] = t0, R0
    for i in range(P):
        p[i + 1] = p[i] + R[i] @ z[i, :3]
        R[i + 1] = R[i] @ D[i]
    return p, R, D


def trajectory_loss_value(pred: np.ndarray, gt_t: np.ndarray, gt_R: np.ndarray,
                          rot_weight: float = ROT_WEIGHT, with_grad: bool = False):
    """Integrated-trajectory error and optionally its gradient w.r.t. ``pred``.

    ``pred`` is (P, 6) Euler-parameterized motions; ``gt_t`` (P+1, 3) and
    ``gt_R`` (P+1, 3, 3) give the reference poses, the first being the
    shared origin.  Per frame the error is ``|p_t - p*_t|^2`` plus
    ``rot_weight * |R_t - R*_t|_F^2 / 2`` (approximately ``theta^2`` for a
    rotation error of ``theta``); the loss is the mean over t = 1..P.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, POSE_DIM)
    P = len(pred)
    if P == 0:
        return (0.0, np.zeros((0, POSE_DIM))) if with_grad else 0.0
    p, R, D = _chain(pred, gt_t[0], gt_R[0])
    dp = p[1:] - gt_t[1:]
    dR = R[1:] - gt_R[1:]
    loss = (np.sum(dp * dp) + 0.5 * rot_weight * np.sum(dR * dR)) / P
    if not with_grad:
        return float(loss)
    gp_dir = 2.0 * dp / P
    gR_dir = rot_weight * dR / P
    gu = np.empty((P, 3))
    gD = np.empty((P, 3, 3))
    gp = np.zeros(3)
    gR = np.zeros((3, 3))
    u = pred[:, :3]
    for i in range(P - 1, -1, -1):
        # pose i + 1 = (p[i] + R[i] u_i, R[i] D_i)
        gp = gp + gp_dir[i]
        gR = gR + gR_dir[i]
        gu[i] = R[i].T @ gp
        gD[i] = R[i].T @ gR
        gR = np.outer(gp, u[i]) + gR @ D[i].T
    return float(loss), np.hstack([gu, _euler_grad(D, pred[:, 3:], gD)])


def trajectory_loss(pred_rels, gt_traj: Trajectory, rot_weight: float = ROT_WEIGHT) -> float:
    """Mean per-frame error of ``pred_rels`` integrated from ``gt_traj``'s origin."""
    if isinstance(pred_rels, np.ndarray):
        z = pred_rels.reshape(-1, POSE_DIM)
    else:
        z = np.array([r.as_vector() for r in pred_rels], dtype=float).reshape(-1, POSE_DIM)
    if len(z) != len(gt_traj) - 1:
        raise ContractError(f"{len(z)} relative motions for a trajectory of {len(gt_traj)} poses")
    return trajectory_loss_value(z, gt_traj.t, gt_traj.rotations, rot_weight)


def trajectory_loss_var(pred: ad.Var, gt_t: np.ndarray, gt_R: np.ndarray, rot_weight: float = ROT_WEIGHT) -> ad.Var:
    """Recorded trajectory loss with the analytic reverse chain."""
    loss, grad = trajectory_loss_value(pred.value, gt_t, gt_R, rot_weight, with_grad=True)
    return ad.active_tape().record(np.asarray(loss), (pred,), lambda g: (g * grad,))


# --------------------------------------------------------------------------
# model bundle and losses
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ModelBundle:
    ego: EgoMotionModel
    flow: cv.FlowCVAE
    config: TrainConfig
    adam: ad.AdamState = field(default_factory=ad.AdamState)
    stage: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, config: TrainConfig, rng: np.random.Generator | None = None) -> "ModelBundle":
        rng = rng if rng is not None else np.random.default_rng([config.seed, 11])
        ego = EgoMotionModel.create(rng, config.hidden, config.head_hidden, config.n_components,
                                    config.dropout, config.sigma_mode)
        flow = cv.FlowCVAE.create(rng, config.latent_dim, config.cvae_hidden)
        return cls(ego, flow, config, ad.AdamState(lr=config.stage1.lr))

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.ego.parameters(), **self.flow.parameters()}

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.ego.load_parameters(params)
        self.flow.load_parameters(params)

    def fit_normalization(self, dataset: Dataset) -> None:
        targets = dataset.target_rows()
        self.ego.fit_normalization(dataset.inputs, targets)
        self.flow.fit_normalization(dataset.inputs[:, :2], dataset.inputs[:, 2:], targets)


_NORM_FIELDS = {
    "norm.mdn.input_shift": ("ego", "input_shift"),
    "norm.mdn.input_scale": ("ego", "input_scale"),
    "norm.mdn.target_shift": ("ego", "target_shift"),
    "norm.mdn.target_scale": ("ego", "target_scale"),
    "norm.cvae.pos_shift": ("flow", "pos_shift"),
    "norm.cvae.pos_scale": ("flow", "pos_scale"),
    "norm.cvae.flow_shift": ("flow", "flow_shift"),
    "norm.cvae.flow_scale": ("flow", "flow_scale"),
    "norm.cvae.ego_shift": ("flow", "ego_shift"),
    "norm.cvae.ego_scale": ("flow", "ego_scale"),
}


def save_checkpoint(directory, bundle: ModelBundle) -> None:
    tensors = dict(bundle.parameters())
    for name, (part, attr) in _NORM_FIELDS.items():
        tensors[name] = getattr(getattr(bundle, part), attr)
    for k, v in bundle.adam.m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in bundle.adam.v.items():
        tensors[f"adam.v.{k}"] = v
    meta = {
        "config": bundle.config.to_dict(),
        "stage": bundle.stage,
        "epoch": bundle.epoch,
        "adam": {"lr": bundle.adam.lr, "step": bundle.adam.step},
    }
    ad.save_tensors(directory, tensors, meta)


def load_checkpoint(directory) -> ModelBundle:
    tensors, meta = ad.load_tensors(directory)
    cfg_raw = {k: str(v) for k, v in meta["config"].items()}
    config = TrainConfig.from_dict(cfg_raw)
    bundle = ModelBundle.create(config, np.random.default_rng(0))
    bundle.load_parameters(tensors)
    for name, (part, attr) in _NORM_FIELDS.items():
        setattr(getattr(bundle, part), attr, tensors[name])
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    bundle.adam = ad.AdamState(lr=float(meta["adam"]["lr"]), step=int(meta["adam"]["step"]), m=m, v=v)
    bundle.stage = int(meta["stage"])
    bundle.epoch = int(meta["epoch"])
    return bundle


@dataclass
class LossParts:
    l_mdn: float
    l_traj: float
    l_cvae: float
    total: float


def batch_loss(bundle: ModelBundle, dataset: Dataset, batch: Batch, weights, *, train: bool = True,
               rng: np.random.Generator | None = None, tape: ad.Tape | None = None, stats: dict | None = None):
    """Recorded weighted loss on one batch.  Returns ``(total Var, LossParts, tape)``.

    L_MDN is the mean per-feature mixture NLL of the pair's supervision
    motion; L_TRAJ integrates the per-pair fused means over the batch
    window; L_CVAE is the mean per-feature negative ELBO with the
    supervision motion as condition.  A term with zero weight is skipped.
    """
    w_mdn, w_traj, w_cvae = weights
    tape = tape if tape is not None else ad.Tape()
    rng = rng if rng is not None else np.random.default_rng(0)
    drop_rng, eps_rng = rng.spawn(2) if hasattr(rng, "spawn") else (rng, rng)
    inputs = dataset.inputs[batch.rows]
    rels = dataset.rels[batch.pair_index]
    targets = rels[batch.segments]
    terms, parts = [], {"l_mdn": 0.0, "l_traj": 0.0, "l_cvae": 0.0}
    with ad.recording(tape):
        if w_mdn > 0 or w_traj > 0:
            a_pi, a_mu, a_sigma = bundle.ego.logits(inputs, train=train, rng=drop_rng, tape=tape)
            if w_mdn > 0:
                l_mdn = ad.mean(nll_rows(a_pi, a_mu, a_sigma, targets, stats))
                parts["l_mdn"] = float(l_mdn.value)
                terms.append(ad.scale(l_mdn, w_mdn))
            if w_traj > 0:
                means, _ = fused_means(a_pi, a_mu, a_sigma, batch.segments, batch.n_pairs)
                gt_t, gt_R, _ = _chain(rels, np.zeros(3), np.eye(3))
                l_traj = trajectory_loss_var(means, gt_t, gt_R, bundle.config.rot_weight)
                parts["l_traj"] = float(l_traj.value)
                terms.append(ad.scale(l_traj, w_traj))
        if w_cvae > 0:
            eps = eps_rng.standard_normal((len(inputs), bundle.flow.latent_dim))
            rows = cv.loss_rows(bundle.flow, tape, inputs[:, :2], inputs[:, 2:], targets, eps)
            l_cvae = ad.mean(rows)
            parts["l_cvae"] = float(l_cvae.value)
            terms.append(ad.scale(l_cvae, w_cvae))
        if not terms:
            total = tape.constant(np.asarray(0.0))
        else:
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
    return total, LossParts(parts["l_mdn"], parts["l_traj"], parts["l_cvae"], float(total.value)), tape


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

@dataclass
class LossRecord:
    epoch: int
    stage: int
    l_mdn: float
    l_traj: float
    l_cvae: float
    total: float


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch])


def _run_stage(bundle: ModelBundle, dataset: Dataset, stage_cfg: StageConfig, stage: int,
               checkpoint_dir=None) -> list[LossRecord]:
    if dataset.n_pairs < 1:
        raise ContractError("dataset is empty")
    curve = []
    seed = bundle.config.seed
    bundle.adam.lr = stage_cfg.lr
    for epoch in range(1, stage_cfg.epochs + 1):
        rng = _epoch_rng(seed, stage, epoch)
        batch_rng, model_rng = rng.spawn(2)
        batch = sample_batch(dataset, stage_cfg.batch_pairs, stage_cfg.features_per_pair, batch_rng)
        total, parts, tape = batch_loss(bundle, dataset, batch, stage_cfg.weights, train=True, rng=model_rng)
        grads = ad.backward(tape, total) if tape.params else {}
        finite = np.isfinite(parts.total) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            path = None
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / "last_good"
                save_checkpoint(path, bundle)
            raise TrainingAborted(f"non-finite loss at stage {stage} epoch {epoch}",
                                  checkpoint=str(path) if path else None, epoch=epoch)
        params, bundle.adam = ad.adam_step(bundle.parameters(), grads, bundle.adam)
        bundle.load_parameters(params)
        bundle.stage, bundle.epoch = stage, epoch
        curve.append(LossRecord(epoch, stage, parts.l_mdn, parts.l_traj, parts.l_cvae, parts.total))
        if epoch % 100 == 0 or epoch == stage_cfg.epochs:
            log.info("stage %d epoch %d total %.6g (mdn %.4g traj %.4g cvae %.4g)", stage, epoch,
                     parts.total, parts.l_mdn, parts.l_traj, parts.l_cvae)
    return curve


def stage1_train(bundle: ModelBundle, dataset: Dataset, config: TrainConfig | None = None,
                 checkpoint_dir=None) -> list[LossRecord]:
    """Warm-start stage; fits input/target normalization first."""
    if config is not None:
        bundle.config = config
    bundle.fit_normalization(dataset)
    return _run_stage(bundle, dataset, bundle.config.stage1, 1, checkpoint_dir)


def stage2_train(bundle: ModelBundle, dataset: Dataset, config: TrainConfig | None = None,
                 checkpoint_dir=None) -> list[LossRecord]:
    """Long-window stage continuing from the Stage-1 parameters and Adam state."""
    if config is not None:
        bundle.config = config
    return _run_stage(bundle, dataset, bundle.config.stage2, 2, checkpoint_dir)


def train(dataset: Dataset, config: TrainConfig, stages: int = 2) -> tuple[ModelBundle, list[LossRecord]]:
    bundle = ModelBundle.create(config)
    curve = stage1_train(bundle, dataset)
    if stages >= 2:
        curve += stage2_train(bundle, dataset)
    return bundle, curve


def format_loss_curve(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_HEADER)
    for r in curve:
        w.writerow([r.epoch, r.stage] + [format(v, ".17g") for v in (r.l_mdn, r.l_traj, r.l_cvae, r.total)])
    return buf.getvalue()


def write_loss_curve(path, curve) -> None:
    atomic_write_text(path, format_loss_curve(curve))


def read_loss_curve(path) -> list[LossRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["epoch"]), int(r["stage"]), float(r["l_mdn"]), float(r["l_traj"]),
                       float(r["l_cvae"]), float(r["total"])) for r in rows]


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------

def dead_reckon(model: EgoMotionModel, tracks, frame_ids: np.ndarray, origin: AbsolutePose | None = None) -> Trajectory:
    """Integrate per-pair estimates over ``frame_ids`` (pairs with no
    features contribute zero motion)."""
    frame_ids = np.asarray(frame_ids)
    pair_ids, means, _ = predict_pairs(model, tracks)
    z = np.zeros((len(frame_ids) - 1, POSE_DIM))
    pos = np.searchsorted(frame_ids, pair_ids)
    ok = (pos > 0) & (pos < len(frame_ids))
    z[pos[ok] - 1] = means[ok]
    return integrate(z, origin, int(frame_ids[0]))


def endpoint_error(pred: Trajectory, gt: Trajectory) -> float:
    return float(np.linalg.norm(pred.t[-1] - gt.t[-1]))


def constant_baseline_nll(dataset: Dataset) -> float:
    """Mean per-feature NLL of a single Gaussian at the mean pose with unit sigma."""
    targets = dataset.target_rows()
    diff = targets - targets.mean(axis=0)
    return float(np.mean(0.5 * np.sum(diff * diff, axis=1) + 0.5 * POSE_DIM * np.log(2 * np.pi)))


def mean_feature_nll(model: EgoMotionModel, dataset: Dataset) -> float:
    return float(np.mean(mdn_nll(model.mixtures(dataset.inputs), dataset.target_rows())))


def origin_of(traj: Trajectory) -> AbsolutePose:
    return AbsolutePose(tuple(traj.t[0]), tuple(traj.q[0]))


__all__ = [
    "StageConfig", "TrainConfig", "Dataset", "Batch", "sample_batch", "trajectory_loss",
    "trajectory_loss_value", "trajectory_loss_var", "ModelBundle", "save_checkpoint", "load_checkpoint",
    "batch_loss", "stage1_train", "stage2_train", "train", "LossRecord", "write_loss_curve",
    "read_loss_curve", "format_loss_curve", "dead_reckon", "endpoint_error", "load_train_config",
]
