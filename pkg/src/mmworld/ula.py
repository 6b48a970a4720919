"""Unified Latent Anchoring: closed-form per-channel affine calibration of LiDAR latents.

Given LiDAR statistics ``(mu1_L, s1_L)``, camera statistics on the same data
``(mu1_C, s1_C)`` and the camera VAE's normalisation prior ``(mu_C, s_C)``,
standardising a LiDAR latent, re-scaling it into camera-data units and then
normalising with the camera prior collapses to a single affine map
``(z - mu_L) / s_L``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError(f"mean/std must be matching C-vectors, got {self.mean.shape} and {self.std.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError("latent statistics must be finite")

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


@dataclass
class UlaParams:
    mu_L: np.ndarray
    sigma_L: np.ndarray

    def __post_init__(self):
        self.mu_L = np.asarray(self.mu_L, dtype=np.float64)
        self.sigma_L = np.asarray(self.sigma_L, dtype=np.float64)
        if np.any(self.sigma_L <= 0):
            raise ValueError("sigma_L must be positive")

    def to_dict(self):
        return {"mu_L": self.mu_L.tolist(), "sigma_L": self.sigma_L.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu_L"], d["sigma_L"])


def compute_stats(latents) -> LatentStats:
    """Population mean/std per channel (last axis) over every sample and position."""
    if isinstance(latents, np.ndarray):
        latents = [latents]
    latents = [np.asarray(z) for z in latents]
    if not latents:
        raise ValueError("compute_stats needs at least one latent")
    c = latents[0].shape[-1]
    if any(z.shape[-1] != c for z in latents):
        raise ValueError("latents disagree on channel count")
    count = 0
    total = np.zeros(c, dtype=np.float64)
    for z in latents:
        flat = z.reshape(-1, c).astype(np.float64)
        total += flat.sum(axis=0)
        count += flat.shape[0]
    if count < 2:
        raise ValueError("need at least 2 positions per channel")
    mean = total / count
    sq = np.zeros(c, dtype=np.float64)
    for z in latents:
        d = z.reshape(-1, c).astype(np.float64) - mean
        sq += (d * d).sum(axis=0)
    std = np.sqrt(sq / count)
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        raise ValueError(f"zero-variance latent channels {bad}: calibration undefined")
    return LatentStats(mean, std)


def derive(stats_L: LatentStats, stats_C_data: LatentStats, prior_C: LatentStats) -> UlaParams:
    """Calibrated (mu_L, sigma_L), evaluated exactly and rounded once per channel.

    Exact rational evaluation makes the degenerate cases collapse bit-for-bit:
    equal LiDAR and camera statistics give the camera prior, and camera data
    already matching the prior gives the LiDAR statistics.
    """
    for name, s in (("stats_L", stats_L), ("stats_C_data", stats_C_data), ("prior_C", prior_C)):
        if np.any(s.std <= 0):
            raise ValueError(f"{name}.std must be positive")
    mu, sigma = [], []
    for m1L, s1L, m1C, s1C, mC, sC in zip(
        stats_L.mean, stats_L.std, stats_C_data.mean, stats_C_data.std, prior_C.mean, prior_C.std
    ):
        m1L, s1L, m1C, s1C, mC, sC = (Fraction(float(x)) for x in (m1L, s1L, m1C, s1C, mC, sC))
        ratio = s1L / s1C
        mu.append(float(m1L - m1C * ratio + mC * ratio))
        sigma.append(float(s1L * sC / s1C))
    return UlaParams(mu, sigma)


def apply(z, p: UlaParams):
    z = np.asarray(z)
    out = (z.astype(np.float64) - p.mu_L) / p.sigma_L
    return out.astype(z.dtype) if z.dtype == np.float32 else out


def invert(zn, p: UlaParams):
    zn = np.asarray(zn)
    out = zn.astype(np.float64) * p.sigma_L + p.mu_L
    return out.astype(zn.dtype) if zn.dtype == np.float32 else out


def stepwise(z, stats_L, stats_C_data, prior_C):
    """The uncollapsed calibration chain, kept as an independent reference."""
    z = np.asarray(z, dtype=np.float64)
    x = (z - stats_L.mean) / stats_L.std
    x = x * stats_C_data.std + stats_C_data.mean
    return (x - prior_C.mean) / prior_C.std


def normalize(z, stats: LatentStats):
    z = np.asarray(z)
    return ((z.astype(np.float64) - stats.mean) / stats.std).astype(np.float32)


def denormalize(zn, stats: LatentStats):
    zn = np.asarray(zn)
    return (zn.astype(np.float64) * stats.std + stats.mean).astype(np.float32)
