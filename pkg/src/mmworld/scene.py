"""Procedural straight-road driving scenes with analytic LiDAR and camera ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from .rangeview import RangeImage, RangeSpec

SENSOR_HEIGHT = 1.8
SHADE_REF_DEPTH = 5.0

CATEGORIES = ("car", "truck", "bus", "pedestrian", "cyclist")
CATEGORY_SIZES = {
    0: (4.5, 1.9, 1.6),
    1: (7.5, 2.5, 3.0),
    2: (8.5, 2.6, 3.2),
    3: (0.8, 0.8, 1.8),
    4: (1.8, 0.7, 1.7),
}
CATEGORY_WEIGHTS = (0.55, 0.15, 0.05, 0.15, 0.10)
LANE_TYPES = ("edge", "divider")

# RGB in [0, 1]; entries 0-7 categories, 8-9 lane types
PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.60, 0.95),
    (0.95, 0.75, 0.10),
    (0.20, 0.85, 0.30),
    (0.80, 0.30, 0.85),
    (0.95, 0.50, 0.15),
    (0.10, 0.85, 0.85),
    (0.55, 0.35, 0.20),
    (1.00, 1.00, 1.00),
    (0.85, 0.85, 0.35),
)
LANE_PALETTE_OFFSET = 8

SLOT_LENGTH = 10.0
SLOT_RANGE = (-30.0, 60.0)
EGO_CLEARANCE = 10.0


@dataclass
class SceneGenParams:
    seed: int = 0
    T: int = 16
    n_boxes: int = 8
    ego_speed: float = 5.0
    lane_spacing: float = 3.5
    n_lanes: int = 4
    frame_dt: float = 0.5
    n_cameras: int = 2
    cam_width: int = 128
    cam_height: int = 128
    cam_hfov_deg: float = 90.0

    def validate(self):
        if self.T < 0 or self.T % 4:
            raise ValueError(f"T must be a non-negative multiple of 4, got {self.T}")
        if self.n_boxes < 0:
            raise ValueError("n_boxes must be >= 0")
        if self.n_lanes < 1 or self.lane_spacing <= 0:
            raise ValueError("need at least one lane of positive width")
        if self.n_cameras < 1 or self.cam_width < 1 or self.cam_height < 1:
            raise ValueError("need at least one camera of positive size")


@dataclass
class Box:
    center: list
    size: list
    yaw: float
    category: int
    track: int


@dataclass
class Polyline:
    vertices: list
    lane_type: int


@dataclass
class Frame:
    ego_pose: list
    boxes: list = field(default_factory=list)
    polylines: list = field(default_factory=list)


@dataclass
class SceneLayout:
    frames: list
    cameras: list
    params: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        frames = [
            Frame(
                ego_pose=f["ego_pose"],
                boxes=[Box(**b) for b in f["boxes"]],
                polylines=[Polyline(**p) for p in f["polylines"]],
            )
            for f in d["frames"]
        ]
        return cls(frames=frames, cameras=list(d["cameras"]), params=dict(d.get("params", {})))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def ego_pose(self, frame_idx):
        return np.asarray(self.frames[frame_idx].ego_pose, dtype=np.float64)

    def check(self):
        for f in self.frames:
            r = np.asarray(f.ego_pose)[:3, :3]
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
                raise ValueError("ego pose rotation is not orthonormal")
            for b in f.boxes:
                if min(b.size) <= 0:
                    raise ValueError("box sizes must be positive")


def lane_centers(params):
    n = params.n_lanes
    return [(i - (n - 1) / 2) * params.lane_spacing for i in range(n)]


def _camera(params, idx):
    yaw = 2 * math.pi * idx / params.n_cameras
    f = (params.cam_width / 2) / math.tan(math.radians(params.cam_hfov_deg) / 2)
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, fwd])
    pos = np.array([math.cos(yaw), math.sin(yaw), 1.5])
    extr = geo.make_pose(rot, -rot @ pos)
    return {
        "fx": f,
        "fy": f,
        "cx": params.cam_width / 2,
        "cy": params.cam_height / 2,
        "extrinsic": np.round(extr, 12).tolist(),
        "width": params.cam_width,
        "height": params.cam_height,
    }


def generate_scene(params: SceneGenParams) -> SceneLayout:
    """Build a seeded straight-road scene with 1+T frames."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    centers = lane_centers(params)
    ego_lane = (params.n_lanes - 1) // 2
    ego_y = centers[ego_lane]

    n_slots_lane = int((SLOT_RANGE[1] - SLOT_RANGE[0]) / SLOT_LENGTH)
    slots = []
    for li in range(params.n_lanes):
        for si in range(n_slots_lane):
            x = SLOT_RANGE[0] + (si + 0.5) * SLOT_LENGTH
            if li == ego_lane and abs(x) < EGO_CLEARANCE:
                continue
            slots.append((li, x))
    if params.n_boxes > len(slots):
        raise ValueError(f"n_boxes={params.n_boxes} exceeds the {len(slots)} lane slots available")

    # lanes right of centre (y < 0) drive along +x, the rest oncoming
    lane_vel = []
    for li, y in enumerate(centers):
        if li == ego_lane:
            lane_vel.append(params.ego_speed)
        else:
            speed = params.ego_speed * rng.uniform(0.5, 1.5)
            lane_vel.append(speed if y < 0 else -speed)

    chosen = sorted(rng.choice(len(slots), size=params.n_boxes, replace=False).tolist())
    tracks = []
    for track, si in enumerate(chosen):
        li, x = slots[si]
        cat = int(rng.choice(len(CATEGORY_SIZES), p=CATEGORY_WEIGHTS))
        size = CATEGORY_SIZES[cat]
        x0 = x + rng.uniform(-0.25, 0.25)
        y0 = centers[li] + rng.uniform(-0.2, 0.2)
        yaw = 0.0 if lane_vel[li] >= 0 else math.pi
        tracks.append((track, cat, size, x0, y0, yaw, lane_vel[li]))

    n = params.n_lanes
    x_lo = SLOT_RANGE[0] - 40.0
    x_hi = SLOT_RANGE[1] + params.ego_speed * params.frame_dt * params.T + 60.0
    xs = np.arange(x_lo, x_hi + 1e-9, 5.0)
    polylines = []
    for i in range(n + 1):
        y = (i - n / 2) * params.lane_spacing
        ltype = 0 if i in (0, n) else 1
        verts = [[float(x), float(y), 0.0] for x in xs]
        polylines.append(Polyline(vertices=verts, lane_type=ltype))

    frames = []
    for k in range(params.T + 1):
        tk = k * params.frame_dt
        pose = geo.make_pose(np.eye(3), [params.ego_speed * tk, ego_y, 0.0])
        boxes = [
            Box(
                center=[float(x0 + v * tk), float(y0), float(size[2] / 2)],
                size=[float(s) for s in size],
                yaw=float(yaw),
                category=cat,
                track=track,
            )
            for track, cat, size, x0, y0, yaw, v in tracks
        ]
        frames.append(Frame(ego_pose=pose.tolist(), boxes=boxes, polylines=polylines))

    cams = [_camera(params, i) for i in range(params.n_cameras)]
    return SceneLayout(frames=frames, cameras=cams, params=asdict(params))


def scene_prompt(scene: SceneLayout, frame_idx=0):
    """Short text descriptor used as the scene's prompt."""
    counts = {}
    for b in scene.frames[frame_idx].boxes:
        name = CATEGORIES[b.category]
        counts[name] = counts.get(name, 0) + 1
    if not counts:
        return "empty road"
    return "road with " + " ".join(f"{n} {name}" for name, n in sorted(counts.items()))


# ---------------------------------------------------------------- lidar


def sensor_pose(scene, frame_idx, sensor_height=SENSOR_HEIGHT):
    """World-from-sensor transform: ego pose raised by the mount height."""
    return scene.ego_pose(frame_idx) @ geo.make_pose(np.eye(3), [0.0, 0.0, sensor_height])


def cast_rays(scene, frame_idx, dirs_sensor, sensor_height=SENSOR_HEIGHT, ground=True, boxes=True):
    """Nearest hit distance of sensor-frame rays (inf where nothing is hit)."""
    pose = sensor_pose(scene, frame_idx, sensor_height)
    origin = pose[:3, 3]
    dirs = np.asarray(dirs_sensor, dtype=np.float64) @ pose[:3, :3].T
    best = np.full(dirs.shape[:-1], np.inf)
    if ground:
        best = np.minimum(best, geo.ray_ground_distance(origin, dirs))
    if boxes:
        for b in scene.frames[frame_idx].boxes:
            best = np.minimum(best, geo.ray_box_distance(origin, dirs, b.center, b.size, b.yaw))
    return best


def raycast_range_image(scene, frame_idx, spec: RangeSpec, sensor_height=SENSOR_HEIGHT, ground=True):
    dist = cast_rays(scene, frame_idx, spec.ray_directions(), sensor_height, ground=ground)
    valid = dist <= spec.r_max
    return RangeImage(spec, np.where(valid, dist, 0.0).astype(np.float32), valid)


def raycast_lidar(scene, frame_idx, spec: RangeSpec, sensor_height=SENSOR_HEIGHT, ground=True):
    """Sensor-frame hit points of every bin-centre ray within r_max."""
    if not 0 <= frame_idx < scene.n_frames:
        raise IndexError(f"frame {frame_idx} out of range 0..{scene.n_frames - 1}")
    dirs = spec.ray_directions()
    dist = cast_rays(scene, frame_idx, dirs, sensor_height, ground=ground)
    keep = dist <= spec.r_max
    return dirs[keep] * dist[keep][:, None]


# ---------------------------------------------------------------- camera


def camera_frame_points(scene, frame_idx, cam_idx, world_pts):
    cam = scene.cameras[cam_idx]
    cam_from_world = np.asarray(cam["extrinsic"]) @ geo.invert_pose(scene.ego_pose(frame_idx))
    return geo.transform(cam_from_world, world_pts)


def inverse_depth_shade(depth, ref=SHADE_REF_DEPTH):
    return min(1.0, ref / max(float(depth), 1e-6))


def rasterize(scene, frame_idx, cam_idx, palette=PALETTE, background=0.0, shaded=False):
    """Paint lanes, then box faces far-to-near, into an HxWx3 image."""
    cam = scene.cameras[cam_idx]
    img = np.full((cam["height"], cam["width"], 3), background, dtype=np.float32)
    frame = scene.frames[frame_idx]

    for pl in frame.polylines:
        pts = camera_frame_points(scene, frame_idx, cam_idx, pl.vertices)
        base = np.asarray(palette[LANE_PALETTE_OFFSET + pl.lane_type])
        for a, b in zip(pts[:-1], pts[1:]):
            if a[2] < geo.NEAR_CLIP and b[2] < geo.NEAR_CLIP:
                continue
            color = base * inverse_depth_shade(0.5 * (a[2] + b[2])) if shaded else base
            geo.draw_segment(img, cam, a, b, color)

    faces = []
    for b in frame.boxes:
        corners = camera_frame_points(scene, frame_idx, cam_idx, geo.box_corners(b.center, b.size, b.yaw))
        for quad in geo.BOX_FACES:
            poly = corners[list(quad)]
            faces.append((float(poly[:, 2].mean()), b.category, poly))
    faces.sort(key=lambda f: -f[0])
    for depth, cat, poly in faces:
        clipped = geo.clip_near(poly)
        if len(clipped) < 3:
            continue
        color = np.asarray(palette[cat])
        if shaded:
            color = color * inverse_depth_shade(depth)
        geo.fill_polygon(img, geo.project_points(cam, clipped), color)
    return img


def render_camera_target(scene, frame_idx, cam_idx):
    """Desk-scale RGB stand-in: shaded layout over a mid-gray background."""
    return rasterize(scene, frame_idx, cam_idx, background=0.5, shaded=True)
