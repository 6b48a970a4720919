"""Rigid transforms, ray casting against boxes/ground, and pinhole rasterisation."""

from __future__ import annotations

import numpy as np
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon

NEAR_CLIP = 0.1

# faces as corner-index quads; corner i has signs from _CORNER_SIGNS[i]
_CORNER_SIGNS = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1], [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=np.float64,
)
BOX_FACES = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_pose(rotation, translation):
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def invert_pose(pose):
    r, t = pose[:3, :3], pose[:3, 3]
    return make_pose(r.T, -r.T @ t)


def transform(pose, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ pose[:3, :3].T + pose[:3, 3]


def box_corners(center, size, yaw):
    half = 0.5 * np.asarray(size, dtype=np.float64)
    return (_CORNER_SIGNS * half) @ rot_z(yaw).T + np.asarray(center, dtype=np.float64)


# ---------------------------------------------------------------- ray casting


def ray_box_distance(origin, dirs, center, size, yaw):
    """Slab-method hit distance along each ray (inf where missed).

    ``origin`` is (3,), ``dirs`` is (..., 3) with unit rows.
    """
    rot = rot_z(yaw)
    p = rot.T @ (np.asarray(origin, dtype=np.float64) - np.asarray(center, dtype=np.float64))
    d = np.asarray(dirs, dtype=np.float64) @ rot  # == (rot.T @ d.T).T
    half = 0.5 * np.asarray(size, dtype=np.float64)
    d = np.where(np.abs(d) < 1e-15, 1e-15, d)
    t1 = (-half - p) / d
    t2 = (half - p) / d
    tnear = np.minimum(t1, t2).max(axis=-1)
    tfar = np.maximum(t1, t2).min(axis=-1)
    hit = (tfar >= tnear) & (tnear > 0)
    return np.where(hit, tnear, np.inf)


def ray_ground_distance(origin, dirs, ground_z=0.0):
    dz = np.asarray(dirs, dtype=np.float64)[..., 2]
    oz = float(origin[2]) - ground_z
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -oz / dz
    return np.where((dz < 0) & (t > 0), t, np.inf)


# ---------------------------------------------------------------- camera raster


def clip_near(poly, near=NEAR_CLIP):
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= near."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            s = (near - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return np.array(out)


def project_points(cam, pts_cam):
    """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
    pts = np.asarray(pts_cam, dtype=np.float64)
    u = cam["fx"] * pts[..., 0] / pts[..., 2] + cam["cx"]
    v = cam["fy"] * pts[..., 1] / pts[..., 2] + cam["cy"]
    return np.stack([u, v], axis=-1)


def fill_polygon(img, uv, color):
    h, w = img.shape[:2]
    # pixel (r, c) has its centre at (c + 0.5, r + 0.5)
    rr, cc = draw_polygon(uv[:, 1] - 0.5, uv[:, 0] - 0.5, shape=(h, w))
    img[rr, cc] = color


def _clip_segment_2d(p, q, lo, hi):
    """Liang-Barsky clip of segment p->q to the box [lo, hi]; None if outside."""
    t0, t1 = 0.0, 1.0
    d = q - p
    for k in range(2):
        for pk, qk in ((-d[k], p[k] - lo[k]), (d[k], hi[k] - p[k])):
            if pk == 0:
                if qk < 0:
                    return None
                continue
            r = qk / pk
            if pk < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                return None
    return p + t0 * d, p + t1 * d


def draw_segment(img, cam, a_cam, b_cam, color, width=2):
    a, b = np.asarray(a_cam, float), np.asarray(b_cam, float)
    if a[2] < NEAR_CLIP and b[2] < NEAR_CLIP:
        return
    if a[2] < NEAR_CLIP or b[2] < NEAR_CLIP:
        if a[2] < NEAR_CLIP:
            a, b = b, a
        s = (NEAR_CLIP - a[2]) / (b[2] - a[2])
        b = a + s * (b - a)
    h, w = img.shape[:2]
    uv = project_points(cam, np.stack([a, b]))
    seg = _clip_segment_2d(uv[0], uv[1], np.array([-2.0, -2.0]), np.array([w + 2.0, h + 2.0]))
    if seg is None:
        return
    p, q = seg
    rr, cc = draw_line(int(np.floor(p[1])), int(np.floor(p[0])), int(np.floor(q[1])), int(np.floor(q[0])))
    for dr in range(width):
        for dc in range(width):
            r2, c2 = rr + dr, cc + dc
            ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
            img[r2[ok], c2[ok]] = color


def densify(vertices, step):
    """Resample a polyline so consecutive points are at most ``step`` apart."""
    v = np.asarray(vertices, dtype=np.float64)
    out = [v[:1]]
    for a, b in zip(v[:-1], v[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        s = np.arange(1, n + 1)[:, None] / n
        out.append(a + s * (b - a))
    return np.concatenate(out)
