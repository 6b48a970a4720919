"""Hand-built scenes for geometry oracles."""

import numpy as np

from mmworld.scene import Box, SceneGenParams, generate_scene


def custom_scene(boxes=(), polylines=(), width=128, height=128, f=None, n_cameras=1):
    """One-frame scene with the ego at the world origin and the given geometry."""
    scene = generate_scene(SceneGenParams(seed=0, T=0, n_boxes=0, n_cameras=n_cameras, cam_width=width, cam_height=height))
    fr = scene.frames[0]
    fr.ego_pose = np.eye(4).tolist()
    fr.boxes = [b if isinstance(b, Box) else Box(**b) for b in boxes]
    fr.polylines = list(polylines)
    if f is not None:
        for cam in scene.cameras:
            cam["fx"] = cam["fy"] = f
    return scene


def unit_box(center, size=(1.0, 1.0, 1.0), category=0, yaw=0.0):
    return Box(center=list(center), size=list(size), yaw=yaw, category=category, track=0)


# small end-to-end configuration for the command-line tests
MICRO = {
    "scene.T": 4,
    "scene.cam_width": 32,
    "scene.cam_height": 32,
    "scene.n_scenes": 2,
    "range.beams": 16,
    "range.azimuth_bins": 256,
    "vae.steps": 5,
    "vae.lr": 0.002,
    "vae.kl_weight": 0.0001,
    "dit.steps": 3,
    "dit.lr": 0.001,
    "dit.sample_steps": 2,
}

# criterion number -> one-line verdict, filled by test_acceptance and echoed in the summary
ACCEPTANCE = {}


def verdict(n, name, ok, detail):
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok
