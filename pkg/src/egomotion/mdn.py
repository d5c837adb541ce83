"""Mixture density regression from one flow feature to frame-to-frame motion.

Each feature ``(x, y, dx, dy)`` is mapped to a K-component Gaussian mixture
over the 6-D relative pose (translation in meters, Z-Y-X Euler in radians).
Per-feature beliefs are reduced to their most likely component and fused by
multiplying the resulting Gaussians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError, ShapeError
from .geom import RelativePose

POSE_DIM = 6
LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-12
LOG_SIGMA_FLOOR = math.log(SIGMA_FLOOR)


@dataclass(eq=False)
class MixtureParams:
    """Mixture over poses; arrays may carry leading batch axes.

    ``pi`` (..., K), ``mu`` (..., K, D), ``sigma`` (..., K, D).
    """

    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.shape != self.sigma.shape or self.mu.shape[:-1] != self.pi.shape:
            raise ShapeError(f"inconsistent mixture shapes {self.pi.shape}, {self.mu.shape}, {self.sigma.shape}")
        if np.any(self.sigma <= 0):
            raise NumericError("mixture sigma must be positive")

    @property
    def n_components(self) -> int:
        return self.pi.shape[-1]


@dataclass(eq=False)
class GaussianPose:
    """Diagonal Gaussian belief over a relative pose."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.var = np.asarray(self.var, dtype=float).reshape(-1)
        if self.mean.shape != self.var.shape:
            raise ShapeError("mean and var must have equal length")
        if not (np.all(np.isfinite(self.var)) and np.all(self.var > 0)):
            raise NumericError("variance must be positive and finite")

    def as_relative_pose(self) -> RelativePose:
        return RelativePose.from_vector(self.mean)


# --------------------------------------------------------------------------
# head activations and likelihood (numpy)
# --------------------------------------------------------------------------

def _log_softmax(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    s = a - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def mdn_head(a_pi, a_mu, a_sigma) -> MixtureParams:
    """softmax for weights, exp for scales, identity for means.

    ``a_sigma`` may have a trailing axis of 1 (one isotropic scale per
    component), which is broadcast over the pose dimensions.
    """
    a_pi = np.asarray(a_pi, dtype=float)
    a_mu = np.asarray(a_mu, dtype=float)
    a_sigma = np.asarray(a_sigma, dtype=float)
    if not (np.all(np.isfinite(a_pi)) and np.all(np.isfinite(a_mu)) and np.all(np.isfinite(a_sigma))):
        raise NumericError("non-finite mixture logits")
    pi = np.exp(_log_softmax(a_pi))
    sigma = np.broadcast_to(np.exp(np.maximum(a_sigma, LOG_SIGMA_FLOOR)), a_mu.shape).copy()
    return MixtureParams(pi, a_mu.copy(), sigma)


def mixture_log_density(mix: MixtureParams, z) -> np.ndarray:
    """log sum_k pi_k N(z | mu_k, sigma_k^2), via log-sum-exp."""
    z = np.asarray(z, dtype=float)
    sig = np.maximum(mix.sigma, SIGMA_FLOOR)
    r = (z[..., None, :] - mix.mu) / sig
    comp = -0.5 * np.sum(r * r, axis=-1) - np.sum(np.log(sig), axis=-1) - 0.5 * mix.mu.shape[-1] * LOG_2PI
    a = np.log(np.maximum(mix.pi, 1e-300)) + comp
    m = np.max(a, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True)))[..., 0]


def mdn_nll(mix: MixtureParams, z) -> float | np.ndarray:
    """Negative log-likelihood of pose ``z`` (RelativePose or 6-vector)."""
    if isinstance(z, RelativePose):
        z = z.as_vector()
    out = -mixture_log_density(mix, z)
    return float(out) if np.ndim(out) == 0 else out


def select_dominant_mode(mix: MixtureParams) -> GaussianPose:
    """Component with the largest weight; ties go to the lowest index."""
    if mix.pi.ndim != 1:
        raise ShapeError("select_dominant_mode expects a single-feature mixture")
    k = int(np.argmax(mix.pi))
    return GaussianPose(mix.mu[k], mix.sigma[k] ** 2)


def fuse_densities(modes) -> GaussianPose:
    """Product of diagonal Gaussians: precisions add, means are precision-weighted."""
    modes = list(modes)
    if not modes:
        raise ContractError("fuse_densities needs at least one mode")
    if len(modes) == 1:
        return GaussianPose(modes[0].mean.copy(), modes[0].var.copy())
    means = np.array([m.mean for m in modes])
    prec = 1.0 / np.array([m.var for m in modes])
    var = 1.0 / prec.sum(axis=0)
    return GaussianPose(var * (prec * means).sum(axis=0), var)


# --------------------------------------------------------------------------
# recorded ops
# --------------------------------------------------------------------------

def nll_rows(a_pi: ad.Var, a_mu: ad.Var, a_sigma: ad.Var, z: np.ndarray, stats: dict | None = None) -> ad.Var:
    """Per-row mixture NLL as a single recorded op with analytic gradients.

    Shapes: a_pi (N, K), a_mu (N, K, D), a_sigma (N, K, D) or (N, K, 1),
    z (N, D).  Log-scales below ``log(1e-12)`` are clamped (zero gradient)
    and counted in ``stats['sigma_floor_events']``.
    """
    z = np.asarray(z, dtype=float)
    ls_raw = a_sigma.value
    floored = ls_raw < LOG_SIGMA_FLOOR
    if stats is not None:
        stats["sigma_floor_events"] = stats.get("sigma_floor_events", 0) + int(np.count_nonzero(floored))
    ls = np.where(floored, LOG_SIGMA_FLOOR, ls_raw)
    mu = a_mu.value
    D = mu.shape[-1]
    inv_var = np.exp(-2.0 * ls)
    diff = z[:, None, :] - mu
    sq = diff * diff * inv_var
    ls_sum = np.sum(np.broadcast_to(ls, mu.shape), axis=-1)
    log_comp = -0.5 * np.sum(sq, axis=-1) - ls_sum - 0.5 * D * LOG_2PI
    log_pi = _log_softmax(a_pi.value)
    a = log_pi + log_comp
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=-1, keepdims=True)
    out = -(np.log(s) + m)[:, 0]
    gamma = e / s
    pi = np.exp(log_pi)
    iso = ls_raw.shape[-1] == 1 and D != 1

    def bw(g):
        g = g[:, None]
        d_pi = g * (pi - gamma)
        d_mu = -(g * gamma)[..., None] * diff * inv_var
        d_ls = (g * gamma)[..., None] * (1.0 - sq)
        if iso:
            d_ls = d_ls.sum(axis=-1, keepdims=True)
        d_ls = np.where(floored, 0.0, d_ls)
        return d_pi, d_mu, d_ls

    return ad.active_tape().record(out, (a_pi, a_mu, a_sigma), bw)


def dominant_indices(a_pi: np.ndarray) -> np.ndarray:
    """argmax over components, lowest index on ties; shape (N, 1)."""
    return np.argmax(a_pi, axis=-1)[:, None]


def fused_means(a_pi: ad.Var, a_mu: ad.Var, a_sigma: ad.Var, segments: np.ndarray, n_segments: int):
    """Recorded dominant-mode selection + density product per segment.

    Returns ``(mean Var (P, D), var ndarray (P, D))``.  The selection index
    carries no gradient; means and scales of the chosen components do.
    """
    N, K, D = a_mu.value.shape
    k = dominant_indices(a_pi.value)
    mu_k = ad.reshape(ad.take_along(a_mu, k[:, :, None].repeat(D, axis=2), axis=1), (N, D))
    Ds = a_sigma.value.shape[-1]
    ls_k = ad.reshape(ad.take_along(a_sigma, k[:, :, None].repeat(Ds, axis=2), axis=1), (N, Ds))
    ls_k = ad.clamp_min(ls_k, LOG_SIGMA_FLOOR)
    prec = ad.exp(ad.scale(ls_k, -2.0))
    if Ds == 1 and D != 1:
        prec = ad.mul(prec, np.ones((1, D)))
    num = ad.segment_sum(ad.mul(prec, mu_k), segments, n_segments)
    den = ad.segment_sum(prec, segments, n_segments)
    return ad.div(num, den), 1.0 / den.value


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass(eq=False)
class EgoMotionModel:
    """Feature -> mixture network.

    ``trunk`` is the stacked tanh/dropout feature extractor, ``head`` the
    mixture-density layers emitting ``[a_pi | a_mu | a_sigma]``.  Inputs are
    standardized with fixed ``input_shift/scale``; means and scales are
    expressed in physical units through ``target_shift/scale``.
    """

    trunk: ad.DenseNet
    head: ad.DenseNet
    n_components: int = 5
    sigma_mode: str = "diagonal"
    input_shift: np.ndarray = field(default_factory=lambda: np.zeros(4))
    input_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    target_shift: np.ndarray = field(default_factory=lambda: np.zeros(POSE_DIM))
    target_scale: np.ndarray = field(default_factory=lambda: np.ones(POSE_DIM))

    @staticmethod
    def output_width(n_components: int, sigma_mode: str, dim: int = POSE_DIM) -> int:
        if sigma_mode == "diagonal":
            return n_components * (2 * dim + 1)
        if sigma_mode == "isotropic":
            return n_components * (dim + 2)
        raise ShapeError(f"unknown sigma_mode {sigma_mode!r}")

    @classmethod
    def create(cls, rng: np.random.Generator, hidden=(1024, 128, 32), head_hidden: int = 32,
               n_components: int = 5, dropout: float = 0.1, sigma_mode: str = "diagonal") -> "EgoMotionModel":
        sizes = (4,) + tuple(hidden)
        trunk = ad.init_dense(sizes, rng, activations=["tanh"] * len(hidden), dropout=[dropout] * len(hidden))
        n_out = cls.output_width(n_components, sigma_mode)
        head = ad.init_dense((sizes[-1], head_hidden, n_out), rng)
        return cls(trunk, head, n_components, sigma_mode)

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.trunk.parameters("mdn.trunk"), **self.head.parameters("mdn.head")}

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.trunk.load_parameters("mdn.trunk", params)
        self.head.load_parameters("mdn.head", params)

    def fit_normalization(self, inputs: np.ndarray, targets: np.ndarray) -> None:
        self.input_shift = inputs.mean(axis=0)
        self.input_scale = np.maximum(inputs.std(axis=0), 1e-6)
        self.target_shift = targets.mean(axis=0)
        self.target_scale = np.maximum(targets.std(axis=0), 1e-4)

    def _split(self, out):
        K, D = self.n_components, POSE_DIM
        Ds = D if self.sigma_mode == "diagonal" else 1
        return (0, K), (K, K + K * D), (K + K * D, K + K * D + K * Ds), Ds

    def logits(self, inputs, *, train: bool = False, rng=None, tape: ad.Tape):
        """Recorded forward pass; returns ``(a_pi, a_mu, a_sigma)`` Vars."""
        inputs = np.asarray(inputs, dtype=float)
        N = inputs.shape[0]
        K, D = self.n_components, POSE_DIM
        with ad.recording(tape):
            h, _ = ad.forward(self.trunk, (inputs - self.input_shift) / self.input_scale,
                              train=train, rng=rng, tape=tape, name="mdn.trunk")
            out, _ = ad.forward(self.head, h, tape=tape, name="mdn.head")
            (p0, p1), (m0, m1), (s0, s1), Ds = self._split(out)
            a_pi = ad.columns(out, p0, p1)
            raw_mu = ad.reshape(ad.columns(out, m0, m1), (N, K, D))
            a_mu = ad.add(ad.mul(raw_mu, self.target_scale), self.target_shift)
            raw_s = ad.reshape(ad.columns(out, s0, s1), (N, K, Ds))
            if Ds != D:
                # isotropic scale lives in standardized units
                raw_s = ad.mul(raw_s, np.ones(D))
            a_sigma = ad.add(raw_s, np.log(self.target_scale))
        return a_pi, a_mu, a_sigma

    def raw_logits(self, inputs: np.ndarray):
        """Unrecorded inference-mode logits as arrays."""
        inputs = np.asarray(inputs, dtype=float)
        N = inputs.shape[0]
        K, D = self.n_components, POSE_DIM
        out = self.head.predict(self.trunk.predict((inputs - self.input_shift) / self.input_scale))
        (p0, p1), (m0, m1), (s0, s1), Ds = self._split(out)
        a_pi = out[:, p0:p1]
        a_mu = out[:, m0:m1].reshape(N, K, D) * self.target_scale + self.target_shift
        a_sigma = out[:, s0:s1].reshape(N, K, Ds) + np.log(self.target_scale)
        return a_pi, a_mu, a_sigma

    def mixtures(self, inputs: np.ndarray) -> MixtureParams:
        return mdn_head(*self.raw_logits(inputs))


def feature_inputs(features) -> np.ndarray:
    """Stack features as (N, 4) float64 rows ``(x, y, dx, dy)``."""
    if hasattr(features, "x") and hasattr(features, "dx") and isinstance(getattr(features, "x"), np.ndarray):
        return np.hstack([features.x, features.dx]).astype(float)
    feats = list(features)
    if not feats:
        return np.zeros((0, 4))
    return np.array([f.x + f.dx for f in feats], dtype=float)


def fuse_rows(a_pi: np.ndarray, a_mu: np.ndarray, a_sigma: np.ndarray, segments: np.ndarray, n_segments: int):
    """Vectorized dominant-mode product per segment; returns (means, vars)."""
    N, K, D = a_mu.shape
    k = dominant_indices(a_pi)[:, 0]
    mu = a_mu[np.arange(N), k]
    ls = np.maximum(a_sigma[np.arange(N), k], LOG_SIGMA_FLOOR)
    prec = np.broadcast_to(np.exp(-2.0 * ls), (N, D))
    num = np.zeros((n_segments, D))
    den = np.zeros((n_segments, D))
    np.add.at(num, segments, prec * mu)
    np.add.at(den, segments, prec)
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den, 1.0 / den


def predict_egomotion(model: EgoMotionModel, features) -> GaussianPose | None:
    """Fused belief over the motion of one frame pair.

    Returns ``None`` when no features are given (no estimate for the pair).
    Features are fused in the order supplied (ascending feature_id for
    tracks produced by this package).
    """
    inputs = feature_inputs(features)
    if inputs.shape[0] == 0:
        return None
    a_pi, a_mu, a_sigma = model.raw_logits(inputs)
    mean, var = fuse_rows(a_pi, a_mu, a_sigma, np.zeros(len(inputs), dtype=np.int64), 1)
    return GaussianPose(mean[0], var[0])


def predict_pairs(model: EgoMotionModel, tracks, chunk: int = 20000):
    """Fused estimate for every frame pair in ``tracks``.

    Returns ``(pair_ids, means (P, 6), vars (P, 6))``.
    """
    pair_ids, seg = np.unique(tracks.frame_id, return_inverse=True)
    inputs = feature_inputs(tracks)
    outs = [model.raw_logits(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)]
    if not outs:
        return pair_ids, np.zeros((0, POSE_DIM)), np.zeros((0, POSE_DIM))
    a_pi, a_mu, a_sigma = (np.concatenate(parts) for parts in zip(*outs))
    means, var = fuse_rows(a_pi, a_mu, a_sigma, seg, len(pair_ids))
    return pair_ids, means, var
