"""Per-modality layout conditioning: camera colour maps, range-view distance maps, encoder."""

from __future__ import annotations

import numpy as np

from . import geometry as geo
from . import nn
from .rangeview import RangeImage, RangeSpec, pixel_coords
from .scene import PALETTE, SENSOR_HEIGHT, cast_rays, rasterize, sensor_pose

LANE_SAMPLE_STEP = 0.25


def project_camera(scene, frame_idx, cam_idx, palette=PALETTE):
    """Flat-colour layout image in [0, 1]^3 on a black background."""
    if not 0 <= cam_idx < len(scene.cameras):
        raise IndexError(f"camera {cam_idx} out of range")
    return rasterize(scene, frame_idx, cam_idx, palette=palette, background=0.0, shaded=False)


def project_range(scene, frame_idx, spec: RangeSpec, sensor_height=SENSOR_HEIGHT):
    """Single-channel distance map of boxes and lane polylines; empty bins hold 0."""
    dist = cast_rays(scene, frame_idx, spec.ray_directions(), sensor_height, ground=False)
    flat = dist.reshape(-1).copy()

    lines = scene.frames[frame_idx].polylines
    if lines:
        sensor_from_world = geo.invert_pose(sensor_pose(scene, frame_idx, sensor_height))
        pts = np.concatenate([geo.densify(pl.vertices, LANE_SAMPLE_STEP) for pl in lines])
        pts = geo.transform(sensor_from_world, pts)
        v, u, r, keep = pixel_coords(pts, spec)
        np.minimum.at(flat, (v * spec.azimuth_bins + u)[keep], r[keep])

    dist = flat.reshape(spec.beams, spec.azimuth_bins)
    valid = dist <= spec.r_max
    return RangeImage(spec, np.where(valid, dist, 0.0).astype(np.float32), valid)


def replicate3(img):
    """(H, W) or (H, W, 1) -> (H, W, 3) by exact channel copy."""
    a = np.asarray(img.ranges if isinstance(img, RangeImage) else img)
    if a.ndim == 3:
        a = a[..., 0]
    return np.repeat(a[..., None], 3, axis=-1)


def range_layout_input(img: RangeImage):
    """Row-repeated, r_max-scaled, channel-replicated encoder input in [0, 1]."""
    spec = img.spec
    rows = np.repeat(img.ranges, spec.repeat_k, axis=0) / spec.r_max
    return replicate3(rows).astype(np.float32)


def init_layout_encoder(params, rng, widths=(8, 16), c_out=4, name="layout"):
    nn.init_downsampler(params, name, 3, widths, c_out, rng)


def encode_layout(images, params, name="layout"):
    """(..., 1+T, H, W, 3) layout images -> (..., 1+T/4, H/8, W/8, C) condition latents.

    One set of weights serves both modalities.
    """
    return nn.downsampler(params, name, images)
