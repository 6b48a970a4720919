"""VAE and flow-matching objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .tensor import ShapeError, Tensor

LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class GaussianPosterior:
    mu: Tensor
    logvar: Tensor

    @classmethod
    def from_raw(cls, mu, logvar):
        return cls(tn._wrap(mu), tn.clamp(logvar, *LOGVAR_RANGE))

    def sample(self, rng):
        eps = Tensor(rng.standard_normal(self.mu.shape))
        return self.mu + tn.exp(self.logvar * 0.5) * eps


@dataclass
class VaeLossWeights:
    l1: float = 1.0
    kl: float = 1.0
    perceptual: float = 0.3

    def __post_init__(self):
        if min(self.l1, self.kl, self.perceptual) < 0:
            raise ValueError("loss weights must be non-negative")


def kl_std_normal(p: GaussianPosterior):
    """KL(q || N(0, I)) summed over latent dims, averaged over the leading batch axis."""
    mu, lv = p.mu, p.logvar
    per = (mu * mu + tn.exp(lv) - 1.0 - lv) * 0.5
    return tn.tsum(per) * (1.0 / mu.shape[0])


def _avg_pool(x, s):
    """Average pool (..., H, W, C) by s over H and W (cropping the remainder)."""
    if s == 1:
        return x
    *lead, h, w, c = x.shape
    h2, w2 = h // s, w // s
    x = x[..., : h2 * s, : w2 * s, :]
    x = x.reshape(*lead, h2, s, w2, s, c)
    return tn.mean(x, axis=(-4, -2))


def gradient_features(x, scales=(1, 2, 4)):
    """Finite-difference image gradients at several average-pooled scales."""
    feats = []
    for s in scales:
        p = _avg_pool(x, s)
        if p.shape[-2] > 1:
            feats.append(p[..., :, 1:, :] - p[..., :, :-1, :])
        if p.shape[-3] > 1:
            feats.append(p[..., 1:, :, :] - p[..., :-1, :, :])
    return feats


def perceptual_distance(v, v_hat, feat=gradient_features):
    if v.shape[-1] == 1:
        v = tn.concat([v, v, v], axis=-1)
        v_hat = tn.concat([v_hat, v_hat, v_hat], axis=-1)
    fa, fb = feat(v), feat(v_hat)
    if not fa:
        return Tensor(0.0)
    total = None
    for a, b in zip(fa, fb):
        d = tn.mean(tn.absolute(a - b))
        total = d if total is None else total + d
    return total * (1.0 / len(fa))


def vae_loss(v, v_hat, post: GaussianPosterior, w: VaeLossWeights = None, feat=gradient_features):
    """Weighted L1 + KL + perceptual loss; returns (total, weighted term breakdown)."""
    w = w or VaeLossWeights()
    v, v_hat = tn._wrap(v), tn._wrap(v_hat)
    if v.shape != v_hat.shape:
        raise ShapeError(f"vae_loss: target {v.shape} vs reconstruction {v_hat.shape}")
    l1 = tn.mean(tn.absolute(v - v_hat)) * w.l1
    kl = kl_std_normal(post) * w.kl
    perc = perceptual_distance(v, v_hat, feat) * w.perceptual
    total = l1 + kl + perc
    terms = {"l1": l1.item(), "kl": kl.item(), "perceptual": perc.item()}
    return total, terms


# ---------------------------------------------------------------- flow matching


def sample_timestep(rng, m=0.0, s=1.0, size=None):
    """Logit-normal draw: sigmoid of N(m, s^2)."""
    if s <= 0:
        raise ValueError("logit-normal scale must be positive")
    return expit(rng.normal(m, s, size=size))


@dataclass
class FlowSample:
    zt_C: np.ndarray
    zt_L: np.ndarray
    t: np.ndarray
    nu_C: np.ndarray
    nu_L: np.ndarray


def _bcast_t(t, like):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def make_flow_sample(z0_C, z0_L, z1_C, z1_L, t) -> FlowSample:
    """Straight path z_t = t*z1 + (1-t)*z0 with velocity z1 - z0, per modality.

    ``t`` is a scalar or one value per leading batch entry.
    """
    out = []
    for z0, z1, name in ((z0_C, z1_C, "camera"), (z0_L, z1_L, "lidar")):
        z0 = np.asarray(z0, dtype=np.float64)
        z1 = np.asarray(z1, dtype=np.float64)
        if z0.shape != z1.shape:
            raise ShapeError(f"{name} noise {z0.shape} and data {z1.shape} differ")
        tt = _bcast_t(t, z0)
        out.append((tt * z1 + (1.0 - tt) * z0, z1 - z0))
    (zt_C, nu_C), (zt_L, nu_L) = out
    return FlowSample(zt_C, zt_L, np.asarray(t, dtype=np.float64), nu_C, nu_L)


def flow_loss(u_pred_C, u_pred_L, sample: FlowSample):
    """Mean squared error over the stacked camera + LiDAR velocity."""
    u_pred_C, u_pred_L = tn._wrap(u_pred_C), tn._wrap(u_pred_L)
    if u_pred_C.shape != sample.nu_C.shape:
        raise ShapeError(f"camera prediction {u_pred_C.shape} vs target {sample.nu_C.shape}")
    if u_pred_L.shape != sample.nu_L.shape:
        raise ShapeError(f"lidar prediction {u_pred_L.shape} vs target {sample.nu_L.shape}")
    dt = u_pred_C.dtype
    dc = u_pred_C - Tensor(sample.nu_C, dtype=dt)
    dl = u_pred_L - Tensor(sample.nu_L, dtype=dt)
    n = sample.nu_C.size + sample.nu_L.size
    return (tn.tsum(dc * dc) + tn.tsum(dl * dl)) * (1.0 / n)
