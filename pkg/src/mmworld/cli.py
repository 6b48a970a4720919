"""Command-line entry point: ``mmworld <command> ...``.

Failures print one JSON object on stderr (``{"error": ..., "message": ..., "offset": ...}``)
and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dit, io, nn, pipeline, rangeview, ula
from . import tensor as tn
from . import vae as vae_mod
from .config import ConfigError, RunConfig, describe, parse_assignment
from .layout import project_camera, project_range
from .scene import SceneLayout

log = logging.getLogger("mmworld")


# ---------------------------------------------------------------- helpers


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _file_manifest(path, command, cfg, extra=None):
    """Manifest next to a single-file artifact."""
    m = {"command": command, "config_hash": cfg.hash(), "seed": cfg["seed"], "files": {Path(path).name: io.sha256_file(path)}}
    if extra:
        m.update(extra)
    io.write_json(_sidecar(path), m)


def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_vae(path):
    params, meta, _ = nn.load_checkpoint(_require(path, "VAE checkpoint"))
    vc = meta["vae_config"]
    return params, vae_mod.VaeConfig(vc["modality"], vc["latent_channels"], vc["widths"])


def _load_norms(path):
    return pipeline.Normalizers.from_dict(io.read_json(_require(path, "calibration file")))


def _ckpt_manifest(command, cfg, extra):
    return {"command": command, "config_hash": cfg.hash(), "seed": cfg["seed"], "config": dict(sorted(cfg.items())), **extra}


# ---------------------------------------------------------------- commands


def cmd_scenegen(args, cfg):
    m = pipeline.generate_dataset(args.out, cfg)
    print(json.dumps({"out": str(args.out), "scenes": cfg["scene.n_scenes"], "files": len(m["files"])}))


def cmd_encode_range(args, cfg):
    spec = pipeline.range_spec(cfg)
    img = rangeview.encode(io.load_ply(_require(args.input)), spec)
    io.save_rimg(args.out, img)
    _file_manifest(args.out, "encode-range", cfg)
    print(json.dumps({"out": str(args.out), "valid": int(img.valid.sum())}))


def cmd_decode_range(args, cfg):
    img = io.load_rimg(_require(args.input))
    pts = rangeview.decode(img)
    io.save_ply(args.out, pts)
    _file_manifest(args.out, "decode-range", cfg)
    print(json.dumps({"out": str(args.out), "points": len(pts)}))


def cmd_project_layout(args, cfg):
    scene = SceneLayout.from_json(_require(args.scene).read_text())
    spec = pipeline.range_spec(cfg)
    palette = [tuple(c) for c in cfg["layout.palette"]]
    out = Path(args.out)
    frames = range(scene.n_frames) if args.frame is None else [args.frame]
    for f in frames:
        if not 0 <= f < scene.n_frames:
            raise IndexError(f"frame {f} out of range [0, {scene.n_frames})")
        for c in range(len(scene.cameras)):
            io.save_ppm(out / f"cam{c}_frame_{f:03d}.ppm", project_camera(scene, f, c, palette))
        io.save_rimg(out / f"range_frame_{f:03d}.rimg", project_range(scene, f, spec, cfg["scene.sensor_height"]))
    pipeline.write_manifest(out, "project-layout", cfg, cfg["seed"])
    print(json.dumps({"out": str(out), "frames": len(frames)}))


def cmd_train_vae(args, cfg):
    data = pipeline.load_dataset(_require(args.data))
    params, vcfg, losses, opt = pipeline.train_vae(data, args.modality, cfg, log_fn=log.info)
    manifest = _ckpt_manifest(
        "train-vae", cfg, {"vae_config": vcfg.to_dict(), "losses": losses, "final_loss": losses[-1] if losses else None}
    )
    nn.save_checkpoint(args.out, params, manifest, opt)
    print(json.dumps({"out": str(args.out), "final_loss": manifest["final_loss"]}))


def cmd_ula_stats(args, cfg):
    params, vcfg = _load_vae(args.vae)
    data = pipeline.load_dataset(_require(args.data))
    if vcfg.modality == "lidar":
        z = pipeline.lidar_latents(params, vcfg, data, pipeline.range_spec(cfg))
    else:
        z = pipeline.camera_latents(params, vcfg, data)
    stats = ula.compute_stats(z)
    io.write_json(args.out, {"modality": vcfg.modality, **stats.to_dict()})
    _file_manifest(args.out, "ula-stats", cfg)
    print(json.dumps({"out": str(args.out), **stats.to_dict()}))


def _stats(path, expect):
    d = io.read_json(_require(path, f"{expect} stats"))
    if d.get("modality", expect) != expect:
        raise ValueError(f"{path}: expected {expect} statistics, got {d['modality']}")
    return ula.LatentStats.from_dict(d)


def cmd_ula_calibrate(args, cfg):
    sL = _stats(args.lidar_stats, "lidar")
    sC = _stats(args.camera_stats, "camera")
    prior = _stats(args.camera_prior, "camera")
    norms = pipeline.Normalizers(ula.derive(sL, sC, prior), prior)
    io.write_json(args.out, norms.to_dict())
    _file_manifest(args.out, "ula-calibrate", cfg)
    print(json.dumps({"out": str(args.out), **norms.ula.to_dict()}))


def cmd_ula_apply(args, cfg):
    norms = _load_norms(args.calibration)
    z = io.load_tnsr(_require(args.input))
    if z.shape[-1] != len(norms.ula.mu_L):
        raise tn.ShapeError(f"latent has {z.shape[-1]} channels, calibration has {len(norms.ula.mu_L)}")
    out = ula.invert(z, norms.ula) if args.invert else ula.apply(z, norms.ula)
    io.save_tnsr(args.out, np.asarray(out, dtype=np.float32))
    _file_manifest(args.out, "ula-apply", cfg, {"invert": bool(args.invert)})
    print(json.dumps({"out": str(args.out), "shape": list(z.shape)}))


def cmd_train_dit(args, cfg):
    data = pipeline.load_dataset(_require(args.data))
    lv, cv = _load_vae(args.lidar_vae), _load_vae(args.camera_vae)
    norms = _load_norms(args.calibration)
    zc, zl, conds = pipeline.dit_dataset(data, cfg, lv, cv, norms)
    params, dcfg, losses, opt = pipeline.train_dit(zc, zl, conds, cfg, log_fn=log.info)
    manifest = _ckpt_manifest(
        "train-dit", cfg, {"dit_config": dcfg.to_dict(), "losses": losses, "final_loss": losses[-1] if losses else None}
    )
    nn.save_checkpoint(args.out, params, manifest, opt)
    print(json.dumps({"out": str(args.out), "initial_loss": losses[0] if losses else None, "final_loss": manifest["final_loss"]}))


def cmd_sample(args, cfg):
    params, meta, _ = nn.load_checkpoint(_require(args.dit, "DiT checkpoint"))
    dcfg = dit.DiTConfig(**meta["dit_config"])
    data = pipeline.load_dataset(_require(args.data))
    lv, cv = _load_vae(args.lidar_vae), _load_vae(args.camera_vae)
    norms = _load_norms(args.calibration)
    _, _, conds = pipeline.dit_dataset(data, cfg, lv, cv, norms)
    z_C, z_L = dit.euler_sample(params, dcfg, conds, steps=cfg["dit.sample_steps"], seed=cfg["seed"])
    cams, clouds = pipeline.decode_samples(z_C, z_L, lv, cv, norms, pipeline.range_spec(cfg))
    out = Path(args.out)
    pipeline.write_samples(out, [sd.name for sd in data], cams, clouds)
    io.save_tnsr(out / "latents_camera.tnsr", z_C)
    io.save_tnsr(out / "latents_lidar.tnsr", z_L)
    pipeline.write_manifest(out, "sample", cfg, cfg["seed"])
    print(json.dumps({"out": str(out), "samples": len(data)}))


def cmd_eval(args, cfg):
    report = pipeline.evaluate_dirs(_require(args.gen), _require(args.ref), cfg).to_dict()
    report["config_hash"] = cfg.hash()
    if args.out:
        io.write_json(args.out, report)
    print(io.dumps_json(report).strip())


def cmd_gradcheck(args, cfg):
    dcfg = pipeline.dit_config(cfg)
    f, params = pipeline.gradcheck_problem(
        args.target, dcfg, (cfg["vae.width1"], cfg["vae.width2"]), cfg["vae.latent_channels"], cfg["seed"]
    )
    err = tn.grad_check(f, [params[k] for k in sorted(params)], eps=args.eps, max_entries=args.max_entries, seed=cfg["seed"])
    report = {"target": args.target, "max_rel_error": err, "max_entries": args.max_entries, "eps": args.eps}
    if args.out:
        io.write_json(args.out, report)
    print(json.dumps(report))


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmworld",
        description="Synthetic joint camera + LiDAR world model: data, training, sampling and evaluation.",
        epilog="config keys (override with --set key=value):\n" + describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="JSON object of dotted config keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_, description=help_)
        s.set_defaults(func=fn)
        # allow the global options after the command too
        s.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
        s.add_argument("--set", dest="sub_set", action="append", default=[], help=argparse.SUPPRESS)
        s.add_argument("--seed", dest="sub_seed", type=int, help=argparse.SUPPRESS)
        return s

    s = add("scenegen", cmd_scenegen, "write scene_NNNN/{scene.json, lidar/*.ply, camera/*.ppm}")
    s.add_argument("out")
    s = add("encode-range", cmd_encode_range, "PLY point cloud -> RIMG range image")
    s.add_argument("input")
    s.add_argument("out")
    s = add("decode-range", cmd_decode_range, "RIMG range image -> PLY point cloud")
    s.add_argument("input")
    s.add_argument("out")
    s = add("project-layout", cmd_project_layout, "scene.json -> camera layout PPMs and range layout RIMGs")
    s.add_argument("scene")
    s.add_argument("out")
    s.add_argument("--frame", type=int, help="single frame index (default: all)")
    s = add("train-vae", cmd_train_vae, "fit the toy VAE for one modality on a scenegen directory")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--modality", choices=("lidar", "camera"), required=True)
    s = add("ula-stats", cmd_ula_stats, "per-channel latent mean/std of a VAE over a dataset (JSON)")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--vae", required=True, help="VAE checkpoint directory")
    s = add("ula-calibrate", cmd_ula_calibrate, "derive LiDAR anchoring parameters from three stats files")
    s.add_argument("out")
    s.add_argument("--lidar-stats", required=True)
    s.add_argument("--camera-stats", required=True, help="camera stats on the same scenes as --lidar-stats")
    s.add_argument("--camera-prior", required=True, help="camera normalisation prior (held-out scenes)")
    s = add("ula-apply", cmd_ula_apply, "normalise (or --invert) a LiDAR latent TNSR")
    s.add_argument("input")
    s.add_argument("out")
    s.add_argument("--calibration", required=True)
    s.add_argument("--invert", action="store_true")
    for name, fn, help_ in (
        ("train-dit", cmd_train_dit, "train the joint diffusion transformer with flow matching"),
        ("sample", cmd_sample, "Euler-sample both modalities for every scene layout in a dataset"),
    ):
        s = add(name, fn, help_)
        s.add_argument("data")
        s.add_argument("out")
        s.add_argument("--lidar-vae", required=True)
        s.add_argument("--camera-vae", required=True)
        s.add_argument("--calibration", required=True, help="ula-calibrate output")
        if name == "sample":
            s.add_argument("--dit", required=True, help="train-dit checkpoint directory")
    s = add("eval", cmd_eval, "Chamfer, F-score, MMD and JSD between matching PLY trees")
    s.add_argument("--gen", required=True, help="directory of generated PLY files")
    s.add_argument("--ref", required=True, help="reference directory with the same relative layout")
    s.add_argument("--out", help="also write the report JSON here")
    s = add("gradcheck", cmd_gradcheck, "autodiff vs central differences on random inputs")
    s.add_argument("target", choices=pipeline.GRADCHECK_TARGETS)
    s.add_argument("--eps", type=float, default=1e-3, help="finite-difference step")
    s.add_argument("--max-entries", type=int, default=4, help="entries probed per parameter tensor")
    s.add_argument("--out")
    return p


def resolve_config(args):
    cfg = RunConfig.from_file(_require(args.sub_config or args.config, "config")) if (args.sub_config or args.config) else RunConfig()
    for item in list(args.set) + list(args.sub_set):
        k, v = parse_assignment(item)
        cfg.update_checked({k: v})
    seed = args.sub_seed if args.sub_seed is not None else args.seed
    if seed is not None:
        cfg.update_checked({"seed": seed})
    return cfg


def _fail(exc):
    err = {"error": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else type(exc).__name__}
    if isinstance(exc, io.FormatError):
        err["message"] = exc.args[0]
        err["offset"] = exc.offset
    sys.stderr.write(json.dumps(err) + "\n")
    return 2


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except (ConfigError, FileNotFoundError, io.FormatError, tn.ShapeError, ValueError, KeyError, IndexError, OSError) as exc:
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
