"""Conditional VAE over scene flow.

Generative direction: latent ``s ~ p(s | x)``, flow ``dx ~ p(dx | s, z, x)``
with ``z`` the ego-motion and ``x`` the feature position.  The recognition
network ``q(s | x, dx)`` is used only for training.  The latent is meant to
absorb per-feature structure such as inverse depth.

All networks see standardized inputs; :class:`FlowPrediction` is reported
in normalized image-flow units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mdn import POSE_DIM

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-8


@dataclass(eq=False)
class LatentGaussian:
    mean: np.ndarray
    log_var: np.ndarray


@dataclass(eq=False)
class FlowPrediction:
    dx_mean: np.ndarray
    dx_var: np.ndarray


@dataclass(eq=False)
class FlowCVAE:
    encoder: ad.DenseNet
    prior_net: ad.DenseNet
    decoder: ad.DenseNet
    latent_dim: int = 2
    pos_shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pos_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    flow_shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    flow_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    ego_shift: np.ndarray = field(default_factory=lambda: np.zeros(POSE_DIM))
    ego_scale: np.ndarray = field(default_factory=lambda: np.ones(POSE_DIM))

    @classmethod
    def create(cls, rng: np.random.Generator, latent_dim: int = 2, hidden: int = 64) -> "FlowCVAE":
        d = latent_dim
        return cls(
            ad.init_dense((4, hidden, hidden, 2 * d), rng),
            ad.init_dense((2, hidden, hidden, 2 * d), rng),
            ad.init_dense((d + POSE_DIM + 2, hidden, hidden, 4), rng),
            latent_dim,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            **self.encoder.parameters("cvae.enc"),
            **self.prior_net.parameters("cvae.prior"),
            **self.decoder.parameters("cvae.dec"),
        }

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.encoder.load_parameters("cvae.enc", params)
        self.prior_net.load_parameters("cvae.prior", params)
        self.decoder.load_parameters("cvae.dec", params)

    def fit_normalization(self, x: np.ndarray, dx: np.ndarray, ego: np.ndarray) -> None:
        self.pos_shift, self.pos_scale = x.mean(0), np.maximum(x.std(0), 1e-6)
        self.flow_shift, self.flow_scale = dx.mean(0), np.maximum(dx.std(0), 1e-6)
        self.ego_shift, self.ego_scale = ego.mean(0), np.maximum(ego.std(0), 1e-4)

    # standardization helpers
    def _x(self, x):
        return (np.asarray(x, dtype=float).reshape(-1, 2) - self.pos_shift) / self.pos_scale

    def _dx(self, dx):
        return (np.asarray(dx, dtype=float).reshape(-1, 2) - self.flow_shift) / self.flow_scale

    def _ego(self, z):
        return (np.asarray(z, dtype=float).reshape(-1, POSE_DIM) - self.ego_shift) / self.ego_scale


def _split_gaussian(out: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    return out[:, :d], out[:, d:]


def encode(model: FlowCVAE, x, dx) -> LatentGaussian:
    """Recognition network q(s | x, dx)."""
    out = model.encoder.predict(np.hstack([model._x(x), model._dx(dx)]))
    return LatentGaussian(*_split_gaussian(out, model.latent_dim))


def prior(model: FlowCVAE, x) -> LatentGaussian:
    """Conditional prior p(s | x)."""
    out = model.prior_net.predict(model._x(x))
    return LatentGaussian(*_split_gaussian(out, model.latent_dim))


def decode(model: FlowCVAE, latent, z_ego, x) -> FlowPrediction:
    """Flow likelihood p(dx | s, z, x) in normalized flow units."""
    x = model._x(x)
    latent = np.asarray(latent, dtype=float).reshape(len(x), -1)
    ego = np.broadcast_to(model._ego(z_ego), (len(x), POSE_DIM))
    out = model.decoder.predict(np.hstack([latent, ego, x]))
    mean = out[:, :2] * model.flow_scale + model.flow_shift
    var = np.exp(out[:, 2:]) * model.flow_scale ** 2
    return FlowPrediction(mean, var)


def kl_diag(mean_q, log_var_q, mean_p, log_var_p) -> np.ndarray:
    """KL(N(mean_q, exp(log_var_q)) || N(mean_p, exp(log_var_p))), summed over the last axis.

    Written in the log-variance difference ``d`` so identical Gaussians give
    exactly 0; each per-dimension term ``expm1(d) - d + diff^2 / var_p`` is
    non-negative and clamped at 0 against round-off.
    """
    mean_q, log_var_q = np.asarray(mean_q, float), np.asarray(log_var_q, float)
    mean_p, log_var_p = np.asarray(mean_p, float), np.asarray(log_var_p, float)
    d = log_var_q - log_var_p
    per_dim = np.expm1(d) - d + (mean_q - mean_p) ** 2 * np.exp(-log_var_p)
    return 0.5 * np.sum(np.maximum(per_dim, 0.0), axis=-1)


def kl_var(mq: ad.Var, lvq: ad.Var, mp: ad.Var, lvp: ad.Var) -> ad.Var:
    """Recorded per-row diagonal-Gaussian KL (same form as :func:`kl_diag`, unclamped)."""
    d = ad.sub(lvq, lvp)
    diff = ad.sub(mq, mp)
    inner = ad.add(ad.sub(ad.sub(ad.exp(d), 1.0), d), ad.mul(ad.square(diff), ad.exp(ad.neg(lvp))))
    return ad.scale(ad.sum_(inner, axis=1), 0.5)


def loss_rows(model: FlowCVAE, tape: ad.Tape, x, dx, z_ego, eps: np.ndarray, parts: dict | None = None) -> ad.Var:
    """Per-row negative ELBO: Gaussian flow NLL + KL(q || prior).

    ``eps`` (N, latent_dim) are the standard-normal draws for the
    reparameterized sample ``s = mean + exp(log_var / 2) * eps``.
    Reconstruction is scored in standardized flow units.
    """
    d = model.latent_dim
    xs, dxs, egos = model._x(x), model._dx(dx), model._ego(z_ego)
    with ad.recording(tape):
        enc, _ = ad.forward(model.encoder, np.hstack([xs, dxs]), tape=tape, name="cvae.enc")
        pri, _ = ad.forward(model.prior_net, xs, tape=tape, name="cvae.prior")
        mq, lvq = ad.columns(enc, 0, d), ad.columns(enc, d, 2 * d)
        mp, lvp = ad.columns(pri, 0, d), ad.columns(pri, d, 2 * d)
        s = ad.add(mq, ad.mul(ad.exp(ad.scale(lvq, 0.5)), eps))
        dec_in = ad.concat([s, tape.constant(np.hstack([egos, xs]))], axis=1)
        out, _ = ad.forward(model.decoder, dec_in, tape=tape, name="cvae.dec")
        m, lv = ad.columns(out, 0, 2), ad.columns(out, 2, 4)
        r = ad.sub(dxs, m)
        recon = ad.scale(ad.sum_(ad.add(ad.add(lv, ad.mul(ad.square(r), ad.exp(ad.neg(lv)))), LOG_2PI), axis=1), 0.5)
        kl = kl_var(mq, lvq, mp, lvp)
        if parts is not None:
            parts["recon"] = recon.value
            parts["kl"] = kl.value
        return ad.add(recon, kl)


def cvae_loss(model: FlowCVAE, x, dx, z_ego, seed: int = 0) -> float:
    """Mean single-sample negative ELBO over the given features."""
    xs = np.asarray(x, dtype=float).reshape(-1, 2)
    eps = np.random.default_rng(seed).standard_normal((len(xs), model.latent_dim))
    tape = ad.Tape()
    rows = loss_rows(model, tape, xs, dx, np.broadcast_to(np.asarray(z_ego, float), (len(xs), POSE_DIM)), eps)
    return float(np.mean(rows.value))


def predict_flow(model: FlowCVAE, z_ego, x) -> FlowPrediction:
    """Most likely flow at positions ``x``: decode at the prior mean latent."""
    return decode(model, prior(model, x).mean, z_ego, x)


def outlier_scores(model: FlowCVAE, z_ego, x, dx) -> np.ndarray:
    """Mahalanobis distance of observed flow under the predicted flow density.

    ``z_ego`` is a 6-vector or one row per feature.  Variances are floored at
    1e-8 (normalized units squared).
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    pred = predict_flow(model, z_ego, x)
    var = np.maximum(pred.dx_var, VAR_FLOOR)
    r = np.asarray(dx, dtype=float).reshape(-1, 2) - pred.dx_mean
    return np.sqrt(np.sum(r * r / var, axis=1))


def flow_outlier_score(model: FlowCVAE, z_ego, feature) -> float:
    return float(outlier_scores(model, z_ego, np.asarray(feature.x), np.asarray(feature.dx))[0])
