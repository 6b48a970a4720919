"""Point cloud <-> range image conversion with row repetition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RangeSpec:
    beams: int = 32
    azimuth_bins: int = 1024
    fov_up: float = 10.0
    fov_down: float = -30.0
    r_max: float = 70.0
    repeat_k: int = 4
    normalization: str = "linear"

    def __post_init__(self):
        if self.beams < 1 or self.azimuth_bins < 1:
            raise ValueError(f"range grid must be at least 1x1, got {self.beams}x{self.azimuth_bins}")
        if not self.fov_up > self.fov_down:
            raise ValueError(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.repeat_k not in (1, 2, 4):
            raise ValueError(f"repeat_k must be 1, 2 or 4, got {self.repeat_k}")
        if self.normalization not in ("linear", "log"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def fov_span(self):
        return math.radians(self.fov_up - self.fov_down)

    @property
    def d_azimuth(self):
        return 2 * math.pi / self.azimuth_bins

    @property
    def d_elevation(self):
        return self.fov_span / self.beams

    def quantization_bound(self, r):
        """Worst-case displacement of a point at range ``r`` snapped to its bin centre."""
        return r * (self.d_azimuth / 2 + self.d_elevation / 2)

    def bin_angles(self):
        """Elevation (beams,) and azimuth (azimuth_bins,) of bin centres, radians."""
        v = np.arange(self.beams)
        u = np.arange(self.azimuth_bins)
        lo, hi = math.radians(self.fov_down), math.radians(self.fov_up)
        theta = lo + (1.0 - (v + 0.5) / self.beams) * (hi - lo)
        phi = math.pi * (1.0 - 2.0 * (u + 0.5) / self.azimuth_bins)
        return theta, phi

    def ray_directions(self):
        """Unit directions of every bin-centre ray, shape (beams, azimuth_bins, 3)."""
        theta, phi = self.bin_angles()
        th, ph = np.meshgrid(theta, phi, indexing="ij")
        return np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), np.sin(th)], axis=-1)


@dataclass
class RangeImage:
    spec: RangeSpec
    ranges: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.ranges.shape

    def check(self):
        if np.any(self.ranges[~self.valid] != 0):
            raise ValueError("invalid pixels must hold range 0")
        r = self.ranges[self.valid]
        if np.any(r <= 0) or np.any(r > self.spec.r_max):
            raise ValueError("valid ranges must lie in (0, r_max]")


def empty_image(spec, height=None):
    h = spec.beams if height is None else height
    return RangeImage(spec, np.zeros((h, spec.azimuth_bins), np.float32), np.zeros((h, spec.azimuth_bins), bool))


def pixel_coords(points, spec):
    """Row, column, range and keep-mask of each point under the projection."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(pts, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        theta = np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0))
    lo, hi = math.radians(spec.fov_down), math.radians(spec.fov_up)
    keep = (r > 0) & (r <= spec.r_max) & (theta >= lo) & (theta <= hi)
    u = np.floor(0.5 * (1.0 - phi / math.pi) * spec.azimuth_bins)
    v = np.floor((1.0 - (theta - lo) / (hi - lo)) * spec.beams)
    u = np.clip(np.nan_to_num(u), 0, spec.azimuth_bins - 1).astype(np.int64)
    v = np.clip(np.nan_to_num(v), 0, spec.beams - 1).astype(np.int64)
    return v, u, r, keep


def encode(points, spec: RangeSpec) -> RangeImage:
    """Project a point cloud; the nearest return wins each pixel."""
    img = empty_image(spec)
    v, u, r, keep = pixel_coords(points, spec)
    if not keep.any():
        return img
    v, u, r = v[keep], u[keep], r[keep]
    flat = np.full(spec.beams * spec.azimuth_bins, np.inf)
    np.minimum.at(flat, v * spec.azimuth_bins + u, r)
    flat = flat.reshape(spec.beams, spec.azimuth_bins)
    img.valid = np.isfinite(flat)
    img.ranges = np.where(img.valid, flat, 0.0).astype(np.float32)
    return img


def decode(img: RangeImage) -> np.ndarray:
    """Emit one point per valid pixel along its bin-centre ray."""
    spec = img.spec
    if img.ranges.shape != (spec.beams, spec.azimuth_bins):
        raise ValueError(f"decode expects a {spec.beams}x{spec.azimuth_bins} image, got {img.ranges.shape}")
    dirs = spec.ray_directions()
    r = img.ranges.astype(np.float64)[..., None]
    return (dirs * r)[img.valid]


def repeat_rows(img: RangeImage, k=None):
    """Duplicate each row k times; returns (ranges, valid) grids of height k*H."""
    k = img.spec.repeat_k if k is None else k
    return np.repeat(img.ranges, k, axis=0), np.repeat(img.valid, k, axis=0)


def collapse_rows(ranges, valid, k, spec: RangeSpec) -> RangeImage:
    """Average each k-row group over its valid entries."""
    ranges = np.asarray(ranges, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    h, w = ranges.shape
    if h % k:
        raise ValueError(f"grid height {h} not divisible by repeat factor {k}")
    rg = np.where(valid, ranges, 0.0).reshape(h // k, k, w)
    cnt = valid.reshape(h // k, k, w).sum(axis=1)
    out_valid = cnt > 0
    total = rg.astype(np.float64).sum(axis=1)
    mean = np.divide(total, cnt, out=np.zeros_like(total), where=out_valid)
    # k equal float32 values average back to the same float32 value
    return RangeImage(spec, mean.astype(np.float32), out_valid)


_INVALID_CUT = -1.0 + 1e-3


def normalize(img: RangeImage, spec=None):
    """Map valid ranges into (-1, 1]; invalid pixels become -1. Works on repeated grids too."""
    spec = spec or img.spec
    return normalize_grid(img.ranges, img.valid, spec)


def normalize_grid(ranges, valid, spec):
    r = np.asarray(ranges, dtype=np.float64)
    if spec.normalization == "log":
        x = 2.0 * np.log1p(r) / math.log1p(spec.r_max) - 1.0
    else:
        x = 2.0 * r / spec.r_max - 1.0
    return np.where(valid, x, -1.0).astype(np.float32)


def denormalize_grid(t, spec):
    """Inverse of normalize_grid: returns (ranges, valid) arrays."""
    x = np.asarray(t, dtype=np.float64)
    valid = x > _INVALID_CUT
    if spec.normalization == "log":
        r = np.expm1((x + 1.0) * math.log1p(spec.r_max) / 2.0)
    else:
        r = (x + 1.0) * spec.r_max / 2.0
    r = np.clip(r, np.finfo(np.float32).tiny, spec.r_max)
    return np.where(valid, r, 0.0).astype(np.float32), valid


def denormalize(t, spec: RangeSpec) -> RangeImage:
    ranges, valid = denormalize_grid(t, spec)
    return RangeImage(spec, ranges, valid)


def grid_to_cloud(t, spec: RangeSpec) -> np.ndarray:
    """Normalized (k*H, W) grid -> collapsed image -> point cloud."""
    ranges, valid = denormalize_grid(t, spec)
    return decode(collapse_rows(ranges, valid, spec.repeat_k, spec))


def cloud_to_grid(points, spec: RangeSpec) -> np.ndarray:
    """Point cloud -> normalized grid with rows repeated spec.repeat_k times."""
    img = encode(points, spec)
    ranges, valid = repeat_rows(img)
    return normalize_grid(ranges, valid, spec)
