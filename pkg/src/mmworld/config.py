"""Flat, dotted-key run configuration with documented defaults."""

from __future__ import annotations

import hashlib
import json

from .scene import PALETTE

# key: (default, help)
DEFAULTS = {
    "seed": (0, "global seed for every random draw"),
    "scene.T": (16, "frames after the first; 1+T frames per scene, multiple of 4"),
    "scene.n_boxes": (8, "objects per scene"),
    "scene.ego_speed": (5.0, "ego speed, m/s"),
    "scene.lane_spacing": (3.5, "lane width, m"),
    "scene.n_lanes": (4, "number of lanes"),
    "scene.frame_dt": (0.5, "seconds between frames"),
    "scene.n_cameras": (2, "camera views V, evenly spaced in yaw"),
    "scene.cam_width": (128, "camera image width, px (multiple of 16)"),
    "scene.cam_height": (128, "camera image height, px (multiple of 16)"),
    "scene.cam_hfov_deg": (90.0, "camera horizontal field of view, degrees"),
    "scene.n_scenes": (1, "scenes written by scenegen"),
    "scene.sensor_height": (1.8, "LiDAR mount height above the ego origin, m"),
    "range.beams": (32, "range-image rows before repetition"),
    "range.azimuth_bins": (1024, "range-image columns"),
    "range.fov_up": (10.0, "upper vertical field of view, degrees"),
    "range.fov_down": (-30.0, "lower vertical field of view, degrees"),
    "range.r_max": (70.0, "maximum range, m"),
    "range.repeat_k": (4, "row repetition factor (1, 2 or 4)"),
    "range.normalization": ("linear", "range normalisation: linear or log"),
    "layout.palette": ([list(c) for c in PALETTE], "10 RGB colours: categories 0-7, lane types 8-9"),
    "vae.latent_channels": (4, "latent channels C"),
    "vae.width1": (8, "first hidden width"),
    "vae.width2": (16, "second hidden width"),
    "vae.lr": (5e-5, "Adam learning rate"),
    "vae.steps": (200, "optimiser steps"),
    "vae.batch": (4, "clips per step"),
    "vae.clip_T": (-1, "frames after the first per training clip; -1 uses whole scenes"),
    "vae.l1_weight": (1.0, "reconstruction L1 weight"),
    "vae.kl_weight": (1.0, "KL weight"),
    "vae.perceptual_weight": (0.3, "perceptual-feature weight"),
    "dit.D": (16, "token width"),
    "dit.depth": (1, "transformer blocks"),
    "dit.heads": (2, "attention heads"),
    "dit.C_cond": (4, "layout latent channels"),
    "dit.C_emb": (4, "view embedding channels"),
    "dit.text_dim": (8, "text embedding width"),
    "dit.n_text_tokens": (8, "prompt tokens"),
    "dit.vocab": (64, "hash-token vocabulary size"),
    "dit.layout_width1": (8, "layout encoder first width"),
    "dit.layout_width2": (16, "layout encoder second width"),
    "dit.lr": (2e-5, "Adam learning rate"),
    "dit.steps": (100, "optimiser steps"),
    "dit.batch": (1, "scenes per step"),
    "dit.t_mean": (0.0, "logit-normal timestep location"),
    "dit.t_std": (1.0, "logit-normal timestep scale"),
    "dit.sample_steps": (20, "Euler steps when sampling"),
    "metrics.bins": (100, "BEV histogram bins per side"),
    "metrics.extent": (50.0, "BEV half-extent, m"),
    "metrics.z_min": (-3.0, "BEV z-band lower bound, m"),
    "metrics.z_max": (3.0, "BEV z-band upper bound, m"),
    "metrics.fscore_tau": (0.2, "F-score distance threshold, m"),
    "metrics.chamfer_squared": (False, "use squared distances in Chamfer"),
}


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, str):
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return value
    return str(value)


class RunConfig(dict):
    """Dict of every tunable, keyed ``module.name``; unknown keys are rejected."""

    def __init__(self, overrides=None):
        super().__init__({k: v[0] for k, v in DEFAULTS.items()})
        if overrides:
            self.update_checked(overrides)

    def update_checked(self, overrides):
        for k, v in overrides.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self[k] = _coerce(k, v)
        return self

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls(data)

    def section(self, prefix):
        return {k.split(".", 1)[1]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def canonical(self):
        return json.dumps(dict(sorted(self.items())), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_assignment(text):
    """'key=value' with JSON-typed values where they parse."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        v = json.loads(v)
    except json.JSONDecodeError:
        pass
    return k.strip(), v


def describe():
    lines = []
    for k, (d, h) in DEFAULTS.items():
        shown = json.dumps(d) if not isinstance(d, list) else "[...]"
        lines.append(f"  {k} = {shown}  -- {h}")
    return "\n".join(lines)
