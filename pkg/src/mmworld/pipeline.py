"""File-level workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dit, io, nn, ula
from . import vae as vae_mod
from .config import RunConfig
from .layout import project_camera, project_range, range_layout_input
from .metrics import MetricConfig, evaluate
from .objectives import VaeLossWeights
from .rangeview import RangeSpec, cloud_to_grid, grid_to_cloud
from .scene import SceneGenParams, SceneLayout, generate_scene, raycast_lidar, render_camera_target, scene_prompt

log = logging.getLogger("mmworld")


def range_spec(cfg: RunConfig) -> RangeSpec:
    r = cfg.section("range")
    return RangeSpec(
        beams=r["beams"],
        azimuth_bins=r["azimuth_bins"],
        fov_up=r["fov_up"],
        fov_down=r["fov_down"],
        r_max=r["r_max"],
        repeat_k=r["repeat_k"],
        normalization=r["normalization"],
    )


def scene_params(cfg: RunConfig, seed) -> SceneGenParams:
    s = cfg.section("scene")
    return SceneGenParams(
        seed=seed,
        T=s["T"],
        n_boxes=s["n_boxes"],
        ego_speed=s["ego_speed"],
        lane_spacing=s["lane_spacing"],
        n_lanes=s["n_lanes"],
        frame_dt=s["frame_dt"],
        n_cameras=s["n_cameras"],
        cam_width=s["cam_width"],
        cam_height=s["cam_height"],
        cam_hfov_deg=s["cam_hfov_deg"],
    )


def vae_config(cfg: RunConfig, modality) -> vae_mod.VaeConfig:
    return vae_mod.VaeConfig(modality, cfg["vae.latent_channels"], (cfg["vae.width1"], cfg["vae.width2"]))


def dit_config(cfg: RunConfig) -> dit.DiTConfig:
    d = cfg.section("dit")
    return dit.DiTConfig(
        V=cfg["scene.n_cameras"],
        T=cfg["scene.T"],
        H_C=cfg["scene.cam_height"],
        W_C=cfg["scene.cam_width"],
        H_L=cfg["range.beams"] * cfg["range.repeat_k"],
        W_L=cfg["range.azimuth_bins"],
        C_lat=cfg["vae.latent_channels"],
        C_cond=d["C_cond"],
        C_emb=d["C_emb"],
        D=d["D"],
        depth=d["depth"],
        heads=d["heads"],
        text_dim=d["text_dim"],
        n_text_tokens=d["n_text_tokens"],
        vocab=d["vocab"],
        layout_widths=(d["layout_width1"], d["layout_width2"]),
    )


def write_manifest(out_dir, command, cfg: RunConfig, seed, extra=None):
    """Record config hash, seed and content hashes of every file in ``out_dir``."""
    out_dir = Path(out_dir)
    files = {
        str(p.relative_to(out_dir)): io.sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".")
    }
    manifest = {"command": command, "config_hash": cfg.hash(), "seed": seed, "files": files}
    if extra:
        manifest.update(extra)
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- scenes on disk


@dataclass
class SceneData:
    name: str
    scene: SceneLayout
    clouds: list  # per frame (N, 3)
    images: np.ndarray  # (V, 1+T, H, W, 3) in [0, 1]


def simulate(scene, spec, sensor_height):
    clouds = [raycast_lidar(scene, f, spec, sensor_height) for f in range(scene.n_frames)]
    images = np.stack(
        [np.stack([render_camera_target(scene, f, c) for f in range(scene.n_frames)]) for c in range(len(scene.cameras))]
    )
    return clouds, images


def write_scene_dir(root, name, scene, clouds, images):
    d = Path(root) / name
    io.atomic_write(d / "scene.json", scene.to_json().encode())
    for f, pts in enumerate(clouds):
        io.save_ply(d / "lidar" / f"frame_{f:03d}.ply", pts)
    for c in range(images.shape[0]):
        for f in range(images.shape[1]):
            io.save_ppm(d / "camera" / f"cam{c}_frame_{f:03d}.ppm", images[c, f])


def simulate_dataset(cfg: RunConfig, seed=None):
    """In-memory scenegen: scene i uses seed*1000 + i."""
    seed = cfg["seed"] if seed is None else seed
    spec = range_spec(cfg)
    out = []
    for i in range(cfg["scene.n_scenes"]):
        scene = generate_scene(scene_params(cfg, seed * 1000 + i))
        clouds, images = simulate(scene, spec, cfg["scene.sensor_height"])
        out.append(SceneData(f"scene_{i:04d}", scene, clouds, images))
    return out


def generate_dataset(out_dir, cfg: RunConfig, seed=None):
    seed = cfg["seed"] if seed is None else seed
    for sd in simulate_dataset(cfg, seed):
        write_scene_dir(out_dir, sd.name, sd.scene, sd.clouds, sd.images)
    return write_manifest(out_dir, "scenegen", cfg, seed)


def load_dataset(root):
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/scene.json"))
    if not dirs:
        raise FileNotFoundError(f"no scene_*/scene.json under {root}")
    out = []
    for d in dirs:
        scene = SceneLayout.from_json((d / "scene.json").read_text())
        clouds = [io.load_ply(d / "lidar" / f"frame_{f:03d}.ply") for f in range(scene.n_frames)]
        imgs = np.stack(
            [
                np.stack([io.load_ppm(d / "camera" / f"cam{c}_frame_{f:03d}.ppm") for f in range(scene.n_frames)])
                for c in range(len(scene.cameras))
            ]
        )
        out.append(SceneData(d.name, scene, clouds, imgs))
    return out


# ---------------------------------------------------------------- modality tensors


def lidar_video(clouds, spec):
    """(1+T, k*H, W, 1) normalised, row-repeated range grids."""
    return np.stack([cloud_to_grid(c, spec) for c in clouds])[..., None]


def camera_video(images):
    """(V, 1+T, H, W, 3) in [-1, 1]."""
    return (2.0 * np.asarray(images, dtype=np.float32) - 1.0).astype(np.float32)


def video_clouds(grids, spec):
    """Inverse of lidar_video: one decoded cloud per frame."""
    return [grid_to_cloud(g[..., 0], spec) for g in grids]


def clips(video, clip_T):
    """Split a (1+T, ...) video into consecutive (1+clip_T)-frame clips."""
    n = 1 + clip_T
    return [video[s : s + n] for s in range(0, len(video) - n + 1, n)]


def vae_training_data(data, modality, spec, clip_T):
    out = []
    for sd in data:
        if modality == "lidar":
            vids = [lidar_video(sd.clouds, spec)]
        else:
            vids = list(camera_video(sd.images))
        for v in vids:
            out.extend(clips(v, clip_T if clip_T >= 0 else len(v) - 1))
    return np.stack(out).astype(np.float32)


def train_vae(data, modality, cfg: RunConfig, seed=None, log_fn=None):
    seed = cfg["seed"] if seed is None else seed
    vcfg = vae_config(cfg, modality)
    arr = vae_training_data(data, modality, range_spec(cfg), cfg["vae.clip_T"])
    params = vae_mod.init_vae(vcfg, seed)
    weights = VaeLossWeights(cfg["vae.l1_weight"], cfg["vae.kl_weight"], cfg["vae.perceptual_weight"])
    losses, opt = vae_mod.train_vae(
        params, vcfg, arr, cfg["vae.steps"], cfg["vae.lr"], cfg["vae.batch"], weights, seed, log_fn
    )
    return params, vcfg, losses, opt


def lidar_reconstruction(params, vcfg, clouds, spec):
    """Clouds after a deterministic (posterior-mean) VAE round trip."""
    v = lidar_video(clouds, spec)[None]
    z = vae_mod.encode_mean(params, v, vcfg)
    return video_clouds(vae_mod.decode_array(params, z, vcfg)[0], spec)


# ---------------------------------------------------------------- latents and ULA


def lidar_latents(params, vcfg, data, spec):
    return np.stack([vae_mod.encode_mean(params, lidar_video(sd.clouds, spec)[None], vcfg)[0] for sd in data])


def camera_latents(params, vcfg, data):
    return np.stack([vae_mod.encode_mean(params, camera_video(sd.images), vcfg) for sd in data])


@dataclass
class Normalizers:
    ula: ula.UlaParams
    camera_prior: ula.LatentStats

    def to_dict(self):
        return {"ula": self.ula.to_dict(), "camera_prior": self.camera_prior.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(ula.UlaParams.from_dict(d["ula"]), ula.LatentStats.from_dict(d["camera_prior"]))


def calibrate(lidar_vae, camera_vae, data, prior_data, spec):
    """Camera prior from held-out scenes, data statistics from the training scenes."""
    (pl, lcfg), (pc, ccfg) = lidar_vae, camera_vae
    stats_L = ula.compute_stats(lidar_latents(pl, lcfg, data, spec))
    stats_C = ula.compute_stats(camera_latents(pc, ccfg, data))
    prior_C = ula.compute_stats(camera_latents(pc, ccfg, prior_data))
    return Normalizers(ula.derive(stats_L, stats_C, prior_C), prior_C), (stats_L, stats_C, prior_C)


# ---------------------------------------------------------------- DiT data


def scene_conditions(sd: SceneData, dcfg, spec, sensor_height, palette, z1_C, z1_L):
    scene = sd.scene
    layout_C = np.stack(
        [np.stack([project_camera(scene, f, c, palette) for f in range(scene.n_frames)]) for c in range(dcfg.V)]
    )
    layout_L = np.stack([range_layout_input(project_range(scene, f, spec, sensor_height)) for f in range(scene.n_frames)])
    text = dit.tokenize(scene_prompt(scene), dcfg.n_text_tokens, dcfg.vocab)
    return dit.Conditions(
        layout_C[None].astype(np.float32),
        layout_L[None].astype(np.float32),
        z1_C[None, :, :1],
        z1_L[None, :1],
        text[None],
    )


def stack_conditions(conds):
    return dit.Conditions(
        *(np.concatenate([getattr(c, f) for c in conds]) for f in ("layout_C", "layout_L", "frame_C", "frame_L", "text"))
    )


def dit_dataset(data, cfg, lidar_vae, camera_vae, norms: Normalizers):
    spec = range_spec(cfg)
    dcfg = dit_config(cfg)
    (pl, lcfg), (pc, ccfg) = lidar_vae, camera_vae
    zc = ula.normalize(camera_latents(pc, ccfg, data), norms.camera_prior)
    zl = ula.apply(lidar_latents(pl, lcfg, data, spec), norms.ula).astype(np.float32)
    palette = [tuple(c) for c in cfg["layout.palette"]]
    conds = [
        scene_conditions(sd, dcfg, spec, cfg["scene.sensor_height"], palette, zc[i], zl[i]) for i, sd in enumerate(data)
    ]
    return zc, zl, stack_conditions(conds)


def train_dit(zc, zl, conds, cfg: RunConfig, seed=None, params=None, log_fn=None, steps=None):
    seed = cfg["seed"] if seed is None else seed
    dcfg = dit_config(cfg)
    params = params or dit.init_params(dcfg, seed)
    opt = nn.Adam(params, lr=cfg["dit.lr"])
    rng = np.random.default_rng(seed + 1)
    losses = []
    n = len(zc)
    steps = cfg["dit.steps"] if steps is None else steps
    for step in range(steps):
        idx = np.sort(rng.choice(n, size=min(cfg["dit.batch"], n), replace=False))
        batch = (zc[idx], zl[idx], conds.select(idx))
        loss, _ = dit.train_step(params, dcfg, opt, batch, rng, cfg["dit.t_mean"], cfg["dit.t_std"])
        losses.append(loss)
        if log_fn and (step % 100 == 0 or step == steps - 1):
            log_fn(f"dit step {step} loss {loss:.5f}")
    return params, dcfg, losses, opt


def decode_samples(z_C, z_L, lidar_vae, camera_vae, norms: Normalizers, spec):
    """Normalised latents -> (camera frames (B, V, 1+T, H, W, 3) in [0,1], per-sample cloud lists)."""
    (pl, lcfg), (pc, ccfg) = lidar_vae, camera_vae
    zl = ula.invert(z_L, norms.ula).astype(np.float32)
    lid = vae_mod.decode_array(pl, zl, lcfg)
    clouds = [video_clouds(v, spec) for v in lid]
    cams = []
    for zc in z_C:
        raw = ula.denormalize(zc, norms.camera_prior)
        cams.append(np.clip((vae_mod.decode_array(pc, raw, ccfg) + 1.0) / 2.0, 0.0, 1.0))
    return np.stack(cams), clouds


def write_samples(out_dir, names, cams, clouds):
    out_dir = Path(out_dir)
    for name, cam, cl in zip(names, cams, clouds):
        for f, pts in enumerate(cl):
            io.save_ply(out_dir / name / "lidar" / f"frame_{f:03d}.ply", pts)
        for c in range(cam.shape[0]):
            for f in range(cam.shape[1]):
                io.save_ppm(out_dir / name / "camera" / f"cam{c}_frame_{f:03d}.ppm", cam[c, f])


# ---------------------------------------------------------------- evaluation


def metric_config(cfg: RunConfig) -> MetricConfig:
    m = cfg.section("metrics")
    return MetricConfig(m["bins"], m["extent"], m["z_min"], m["z_max"], m["fscore_tau"], m["chamfer_squared"])


def evaluate_dirs(gen_dir, ref_dir, cfg: RunConfig):
    """Pair every PLY under ``gen_dir`` with the same relative path under ``ref_dir``."""
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    rels = sorted(p.relative_to(gen_dir) for p in gen_dir.rglob("*.ply"))
    if not rels:
        raise FileNotFoundError(f"no .ply files under {gen_dir}")
    missing = [str(r) for r in rels if not (ref_dir / r).is_file()]
    if missing:
        raise FileNotFoundError(f"reference lacks {missing[0]} (and {len(missing) - 1} more)")
    gen = [io.load_ply(gen_dir / r) for r in rels]
    ref = [io.load_ply(ref_dir / r) for r in rels]
    return evaluate(gen, ref, metric_config(cfg))


# ---------------------------------------------------------------- gradient checks

GRADCHECK_TARGETS = ("dit", "layout", "vae-lidar", "vae-camera")


def random_conditions(dcfg, rng, B=1):
    return dit.Conditions(
        rng.uniform(0, 1, (B, dcfg.V, 1 + dcfg.T, dcfg.H_C, dcfg.W_C, 3)),
        rng.uniform(0, 1, (B, 1 + dcfg.T, dcfg.H_L, dcfg.W_L, 3)),
        rng.standard_normal((B, dcfg.V, 1, dcfg.H_C // 8, dcfg.W_C // 8, dcfg.C_lat)),
        rng.standard_normal((B, 1, dcfg.H_L // 8, dcfg.W_L // 8, dcfg.C_lat)),
        rng.integers(0, dcfg.vocab, (B, dcfg.n_text_tokens)),
    )


def gradcheck_problem(target, dcfg: dit.DiTConfig, vcfg_widths=(8, 16), latent_channels=4, seed=0):
    """(loss closure, parameter dict) for one of GRADCHECK_TARGETS on random inputs."""
    from . import tensor as tn
    from .layout import encode_layout, init_layout_encoder
    from .objectives import vae_loss

    rng = np.random.default_rng(seed)
    if target == "dit":
        params = dit.init_params(dcfg, seed)
        conds = random_conditions(dcfg, rng)
        z1_C = rng.standard_normal((1, *dcfg.cam_latent))
        z1_L = rng.standard_normal((1, *dcfg.lidar_latent))
        s = dit.noisy_batch(z1_C, z1_L, rng)

        def f():
            u_C, u_L = dit.model_forward(params, dcfg, s.zt_C, s.zt_L, conds, s.t)
            return dit.masked_flow_loss(u_C, u_L, s)

        return f, params
    if target == "layout":
        params = {}
        init_layout_encoder(params, rng, dcfg.layout_widths, dcfg.C_cond)
        x = rng.uniform(0, 1, (1, 1 + dcfg.T, dcfg.H_L, dcfg.W_L, 3))
        w = rng.standard_normal((1, dcfg.T_lat, dcfg.H_L // 8, dcfg.W_L // 8, dcfg.C_cond))

        def f():
            return tn.tsum(encode_layout(tn.Tensor(x), params) * tn.Tensor(w))

        return f, params
    if target in ("vae-lidar", "vae-camera"):
        modality = target.split("-")[1]
        vcfg = vae_mod.VaeConfig(modality, latent_channels, vcfg_widths)
        params = vae_mod.init_vae(vcfg, seed)
        h, w = (dcfg.H_L, dcfg.W_L) if modality == "lidar" else (dcfg.H_C, dcfg.W_C)
        v = rng.uniform(-1, 1, (1, 1 + dcfg.T, h, w, vcfg.channels))

        def recon():
            post = vae_mod.vae_encode(params, tn.Tensor(v), vcfg)
            return post, vae_mod.vae_decode(params, post.sample(np.random.default_rng(seed + 1)), vcfg)

        # L1 terms are kinked wherever a residual or residual gradient is zero. The
        # target sits on a ramp above the initial reconstruction so every residual
        # and every finite-difference feature stays clear of zero under probing.
        with tn.no_grad():
            base = recon()[1].data.astype(np.float64)
        yy, xx = np.mgrid[0:h, 0:w]
        target = tn.Tensor(base + (0.1 + 0.02 * xx + 0.03 * yy)[..., None])

        def f():
            post, v_hat = recon()
            return vae_loss(target, v_hat, post, VaeLossWeights())[0]

        return f, params
    raise ValueError(f"unknown gradcheck target {target!r}; choose from {', '.join(GRADCHECK_TARGETS)}")
