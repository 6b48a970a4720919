"""Toy video VAE: causal 4x temporal / 8x spatial compression, shared by camera and LiDAR."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as tn
from .objectives import GaussianPosterior, VaeLossWeights, vae_loss
from .tensor import Tensor

MODALITY_CHANNELS = {"lidar": 1, "camera": 3}

# posterior log-variance bias at init; a narrow posterior keeps sampling noise from
# swamping the latent before the decoder has learnt anything
LOGVAR_INIT = -6.0


@dataclass
class VaeConfig:
    modality: str = "lidar"
    latent_channels: int = 4
    widths: tuple = (8, 16)

    def __post_init__(self):
        if self.modality not in MODALITY_CHANNELS:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.widths = tuple(self.widths)

    @property
    def channels(self):
        return MODALITY_CHANNELS[self.modality]

    def to_dict(self):
        return asdict(self)


def init_vae(cfg: VaeConfig, seed=0):
    rng = np.random.default_rng(seed)
    p = {}
    c1, c2 = cfg.widths
    nn.init_downsampler(p, "enc", cfg.channels, cfg.widths, 2 * cfg.latent_channels, rng)
    p["enc.s3.b"].data[cfg.latent_channels :] = LOGVAR_INIT
    nn.init_conv(p, "dec.c0", cfg.latent_channels, c2, rng)
    nn.init_conv(p, "dec.c1", c2, c1, rng)
    nn.init_conv(p, "dec.c2", c1, c1, rng)
    nn.init_conv(p, "dec.c3", c1, cfg.channels, rng)
    return p


def vae_encode(params, v, cfg: VaeConfig) -> GaussianPosterior:
    """(N, 1+T, H, W, ch) -> posterior over (N, 1+T/4, H/8, W/8, C)."""
    v = tn._wrap(v)
    if v.shape[-1] != cfg.channels:
        raise tn.ShapeError(f"{cfg.modality} VAE expects {cfg.channels} channels, got {v.shape}")
    h = nn.downsampler(params, "enc", v)
    mu, logvar = tn.split(h, [cfg.latent_channels, cfg.latent_channels], axis=-1)
    return GaussianPosterior.from_raw(mu, logvar)


def _up(x, temporal):
    t_ax = x.ndim - 4
    if temporal:
        x = nn.causal_upsample_time(x, t_ax)
    return tn.repeat(tn.repeat(x, 2, -3), 2, -2)


def vae_decode(params, z, cfg: VaeConfig):
    """(N, 1+T/4, h, w, C) -> (N, 1+T, 8h, 8w, ch) in [-1, 1]."""
    z = tn._wrap(z)
    h = tn.gelu(nn.conv(params, "dec.c0", z))
    h = tn.gelu(nn.conv(params, "dec.c1", _up(h, True)))
    h = tn.gelu(nn.conv(params, "dec.c2", _up(h, True)))
    return tn.tanh(nn.conv(params, "dec.c3", _up(h, False)))


def encode_mean(params, v, cfg, batch=8):
    """Posterior means as a float32 array, evaluated without a tape."""
    out = []
    with tn.no_grad():
        for i in range(0, len(v), batch):
            out.append(vae_encode(params, v[i : i + batch], cfg).mu.data)
    return np.concatenate(out).astype(np.float32)


def decode_array(params, z, cfg, batch=8):
    out = []
    with tn.no_grad():
        for i in range(0, len(z), batch):
            out.append(vae_decode(params, z[i : i + batch], cfg).data)
    return np.concatenate(out).astype(np.float32)


def train_vae(params, cfg, data, steps, lr=5e-5, batch=4, weights=None, seed=0, log=None):
    """Fit on ``data`` (N, 1+T, H, W, ch) in [-1, 1]; returns (losses, optimizer)."""
    rng = np.random.default_rng(seed)
    opt = nn.Adam(params, lr=lr)
    weights = weights or VaeLossWeights()
    losses = []
    n = len(data)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch, n), replace=False) if n > batch else np.arange(n)
        v = Tensor(data[idx])
        post = vae_encode(params, v, cfg)
        z = post.sample(rng)
        v_hat = vae_decode(params, z, cfg)
        loss, terms = vae_loss(v, v_hat, post, weights)
        val = loss.item()
        if not np.isfinite(val):
            raise FloatingPointError(f"VAE loss became {val} at step {step}: {terms}")
        opt.zero_grad()
        tn.backward(loss)
        opt.step()
        losses.append(val)
        if log and (step % 50 == 0 or step == steps - 1):
            log(f"vae step {step} loss {val:.5f} " + " ".join(f"{k}={v:.5f}" for k, v in terms.items()))
    return losses, opt
