"""Functional layers over flat ``{name: Tensor}`` parameter dicts, plus Adam."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import io
from . import tensor as tn
from .tensor import Tensor


def init_linear(params, name, fan_in, fan_out, rng, zero=False, gain=1.0):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_norm(params, name, dim):
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def linear(params, name, x):
    return tn.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def norm(params, name, x):
    return tn.layernorm(x, params[f"{name}.g"], params[f"{name}.b"])


def prefixed(params, prefix):
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------- causal (1+T) stacks


def causal_pad_time(x, time_axis):
    """Prepend a copy of frame 0 so a stride-2 temporal patch maps frame 0 alone to index 0."""
    sl = [slice(None)] * x.ndim
    sl[time_axis] = slice(0, 1)
    return tn.concat([x[tuple(sl)], x], axis=time_axis)


def causal_upsample_time(x, time_axis):
    """Inverse-shape of causal_pad_time + stride 2: n latent steps -> 2n-1 frames."""
    x = tn.repeat(x, 2, time_axis)
    sl = [slice(None)] * x.ndim
    sl[time_axis] = slice(1, None)
    return x[tuple(sl)]


def init_downsampler(params, name, c_in, widths, c_out, rng):
    c1, c2 = widths
    init_linear(params, f"{name}.s1", 4 * c_in, c1, rng)
    init_linear(params, f"{name}.s2", 8 * c1, c2, rng)
    init_linear(params, f"{name}.s3", 8 * c2, c_out, rng)


def downsampler(params, name, x):
    """(..., 1+T, H, W, C) -> (..., 1+T/4, H/8, W/8, c_out).

    One spatial (1,2,2) block then two causal spatiotemporal (2,2,2) blocks.
    """
    *_, T1, H, W, _ = x.shape
    if (T1 - 1) % 4 or H % 8 or W % 8:
        raise tn.ShapeError(f"need 1+T frames with T % 4 == 0 and H, W % 8 == 0; got T+1={T1}, H={H}, W={W}")
    t_ax = x.ndim - 4
    h = tn.gelu(tn.patch_project(x, (1, 2, 2), params[f"{name}.s1.w"], params[f"{name}.s1.b"]))
    h = tn.gelu(tn.patch_project(causal_pad_time(h, t_ax), (2, 2, 2), params[f"{name}.s2.w"], params[f"{name}.s2.b"]))
    return tn.patch_project(causal_pad_time(h, t_ax), (2, 2, 2), params[f"{name}.s3.w"], params[f"{name}.s3.b"])


def init_conv(params, name, c_in, c_out, rng, k=3, zero=False):
    init_linear(params, name, k * k * c_in, c_out, rng, zero=zero)


def conv(params, name, x):
    return tn.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


# ---------------------------------------------------------------- attention


def split_heads(x, heads):
    *lead, n, d = x.shape
    return tn.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def merge_heads(x):
    *lead, h, n, hd = x.shape
    return tn.swapaxes(x, -2, -3).reshape(*lead, n, h * hd)


def attention(q, k, v, mask=None):
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * scale
    return tn.matmul(tn.softmax(scores, axis=-1), v)


def rotary_tables(positions, head_dim, base=100.0):
    """cos/sin tables (N, head_dim) for per-axis rotary encoding.

    ``positions`` is (N, A) integer coordinates; rotation pairs are dealt to
    the A axes round-robin.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_axes = positions.shape[1]
    pairs = head_dim // 2
    angles = np.zeros((positions.shape[0], pairs))
    for i in range(pairs):
        axis, j = i % n_axes, i // n_axes
        per_axis = max(1, math.ceil(pairs / n_axes))
        angles[:, i] = positions[:, axis] * base ** (-j / per_axis)
    ang = np.repeat(angles, 2, axis=1)
    return np.cos(ang), np.sin(ang)


def rotation_matrix(head_dim):
    """R with (x @ R)[2i] = -x[2i+1], (x @ R)[2i+1] = x[2i]."""
    r = np.zeros((head_dim, head_dim))
    for i in range(0, head_dim, 2):
        r[i + 1, i] = -1.0
        r[i, i + 1] = 1.0
    return r


def apply_rotary(x, cos, sin):
    dt = tn.get_default_dtype()
    rot = Tensor(rotation_matrix(x.shape[-1]), dtype=dt)
    return x * Tensor(cos, dtype=dt) + tn.matmul(x, rot) * Tensor(sin, dtype=dt)


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.m[k] = m.astype(p.dtype)
            self.v[k] = v.astype(p.dtype)
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)

    def state(self):
        arrays = {f"adam.m.{k}": v for k, v in self.m.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return {"t": self.t, "lr": self.lr}, arrays

    def load_state(self, meta, arrays):
        self.t = int(meta["t"])
        for k in self.m:
            self.m[k] = arrays[f"adam.m.{k}"]
            self.v[k] = arrays[f"adam.v.{k}"]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, params, manifest, optimizer=None):
    """Directory of TNSR tensors plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {k: p.data for k, p in params.items()}
    meta = dict(manifest)
    if optimizer is not None:
        opt_meta, opt_arrays = optimizer.state()
        meta["optimizer"] = opt_meta
        arrays.update(opt_arrays)
    files = {}
    for k in sorted(arrays):
        fname = f"{k}.tnsr"
        io.save_tnsr(directory / fname, arrays[k])
        files[k] = fname
    meta["tensors"] = files
    io.write_json(directory / "manifest.json", meta)


def load_checkpoint(directory):
    """Return (params, manifest, optimizer_arrays)."""
    directory = Path(directory)
    meta = io.read_json(directory / "manifest.json")
    params, opt = {}, {}
    for k, fname in meta["tensors"].items():
        arr = io.load_tnsr(directory / fname)
        if k.startswith("adam."):
            opt[k] = arr
        else:
            params[k] = Tensor(arr, requires_grad=True)
    return params, meta, opt
