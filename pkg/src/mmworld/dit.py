"""Dual-modality diffusion transformer with joint camera+LiDAR self-attention."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as tn
from .layout import encode_layout, init_layout_encoder
from .objectives import flow_loss, make_flow_sample, sample_timestep
from .tensor import ShapeError, Tensor

PATCH = (1, 2, 2)


@dataclass
class DiTConfig:
    V: int = 2
    T: int = 4
    H_C: int = 128
    W_C: int = 128
    H_L: int = 64
    W_L: int = 256
    C_lat: int = 4
    C_cond: int = 4
    C_emb: int = 4
    D: int = 16
    depth: int = 1
    heads: int = 2
    text_dim: int = 8
    n_text_tokens: int = 8
    vocab: int = 64
    layout_widths: tuple = (8, 16)
    zero_out: bool = False

    def __post_init__(self):
        self.layout_widths = tuple(self.layout_widths)
        if self.T < 4 or self.T % 4:
            raise ValueError(f"T must be a positive multiple of 4, got {self.T}")
        for name in ("H_C", "W_C", "H_L", "W_L"):
            if getattr(self, name) % 16:
                raise ValueError(f"{name}={getattr(self, name)} must be divisible by 16")
        if self.D % self.heads or (self.D // self.heads) % 2:
            raise ValueError(f"D={self.D} must split into {self.heads} heads of even size")
        if self.V < 1:
            raise ValueError("need at least one camera view")

    @property
    def T_lat(self):
        return 1 + self.T // 4

    @property
    def cam_latent(self):
        return (self.V, self.T_lat, self.H_C // 8, self.W_C // 8, self.C_lat)

    @property
    def lidar_latent(self):
        return (self.T_lat, self.H_L // 8, self.W_L // 8, self.C_lat)

    @property
    def L_C(self):
        return self.T_lat * (self.H_C // 16) * (self.W_C // 16)

    @property
    def L_L(self):
        return self.T_lat * (self.H_L // 16) * (self.W_L // 16)

    @property
    def in_channels(self):
        return self.C_lat + self.C_emb + self.C_cond + self.C_lat + 1

    def to_dict(self):
        return asdict(self)


@dataclass
class Conditions:
    """Per-sample conditioning: layout images, clean first latents, prompt token ids."""

    layout_C: np.ndarray  # (B, V, 1+T, H_C, W_C, 3)
    layout_L: np.ndarray  # (B, 1+T, H_L, W_L, 3)
    frame_C: np.ndarray  # (B, V, 1, H_C/8, W_C/8, C_lat)
    frame_L: np.ndarray  # (B, 1, H_L/8, W_L/8, C_lat)
    text: np.ndarray  # (B, n_text_tokens) int

    def select(self, idx):
        return Conditions(*(np.asarray(a)[idx] for a in (self.layout_C, self.layout_L, self.frame_C, self.frame_L, self.text)))


@dataclass
class TokenBatch:
    camera: Tensor  # (B, V*L_C, D)
    lidar: Tensor  # (B, L_L, D)


# ---------------------------------------------------------------- text


def tokenize(prompt, n_tokens, vocab):
    """Stable hash tokens; id 0 is padding."""
    ids = [1 + zlib.crc32(w.lower().encode()) % (vocab - 1) for w in prompt.split()][:n_tokens]
    return np.array(ids + [0] * (n_tokens - len(ids)), dtype=np.int64)


# ---------------------------------------------------------------- params


def init_params(cfg: DiTConfig, seed=0):
    rng = np.random.default_rng(seed)
    p = {}
    D = cfg.D
    init_layout_encoder(p, rng, cfg.layout_widths, cfg.C_cond)
    p["view_emb"] = Tensor(rng.standard_normal((cfg.V + 1, cfg.C_emb)), requires_grad=True)
    p["text_emb"] = Tensor(rng.standard_normal((cfg.vocab, cfg.text_dim)), requires_grad=True)
    k = 4 * cfg.in_channels
    nn.init_linear(p, "patch_C", k, D, rng)
    nn.init_linear(p, "patch_L", k, D, rng)
    nn.init_linear(p, "temb.l1", D, D, rng)
    nn.init_linear(p, "temb.l2", D, D, rng)
    z = cfg.zero_out
    for i in range(cfg.depth):
        b = f"blk{i}"
        nn.init_norm(p, f"{b}.ln1", D)
        nn.init_linear(p, f"{b}.qkv", D, 3 * D, rng)
        nn.init_linear(p, f"{b}.attn_out", D, D, rng, zero=z)
        nn.init_norm(p, f"{b}.ln2", D)
        nn.init_linear(p, f"{b}.xq", D, D, rng)
        nn.init_linear(p, f"{b}.xkv", cfg.text_dim, 2 * D, rng)
        nn.init_linear(p, f"{b}.xout", D, D, rng, zero=z)
        nn.init_norm(p, f"{b}.ln3", D)
        nn.init_linear(p, f"{b}.ff1", D, 4 * D, rng)
        nn.init_linear(p, f"{b}.ff2", 4 * D, D, rng, zero=z)
    nn.init_linear(p, "unpatch_C", D, 4 * cfg.C_lat, rng)
    nn.init_linear(p, "unpatch_L", D, 4 * cfg.C_lat, rng)
    return p


# ---------------------------------------------------------------- input assembly


def assemble_modality_input(z_t, view_emb, c_layout, c_frame):
    """Channel concat [z_t | view emb | layout latent | first-frame latent | frame-0 indicator].

    ``z_t`` is (..., Tl, h, w, C); ``view_emb`` broadcasts over (Tl, h, w);
    ``c_frame`` is (..., 1, h, w, C) and broadcasts over Tl.
    """
    z_t, view_emb, c_layout, c_frame = (tn._wrap(a) for a in (z_t, view_emb, c_layout, c_frame))
    *lead, Tl, h, w, _ = z_t.shape
    if c_layout.shape[:-1] != z_t.shape[:-1]:
        raise ShapeError(f"layout latent {c_layout.shape} does not match noisy latent {z_t.shape}")
    if c_frame.shape[:-1] != (*lead, 1, h, w):
        raise ShapeError(f"first-frame latent {c_frame.shape} does not match noisy latent {z_t.shape}")
    grid = (*lead, Tl, h, w)
    emb = tn.broadcast_to(view_emb, (*grid, view_emb.shape[-1]))
    frame = tn.broadcast_to(c_frame, (*grid, c_frame.shape[-1]))
    ind = np.zeros((*grid, 1))
    ind[..., 0, :, :, :] = 1.0
    return tn.concat([z_t, emb, c_layout, frame, Tensor(ind, dtype=z_t.dtype)], axis=-1)


# ---------------------------------------------------------------- patchify


def patchify(x, modality, params, cfg):
    """Camera (B, V, Tl, h, w, Cin) -> (B, V*L_C, D) view-major; LiDAR (B, Tl, h, w, Cin) -> (B, L_L, D)."""
    name = "patch_C" if modality == "camera" else "patch_L"
    tok = tn.patch_project(x, PATCH, params[f"{name}.w"], params[f"{name}.b"])
    return tok.reshape(x.shape[0], -1, cfg.D)


def unpatchify(tokens, modality, params, cfg):
    B = tokens.shape[0]
    if modality == "camera":
        V, Tl, h, w, C = cfg.cam_latent
        grid = (B, V, Tl, h // 2, w // 2, cfg.D)
        name = "unpatch_C"
    else:
        Tl, h, w, C = cfg.lidar_latent
        grid = (B, Tl, h // 2, w // 2, cfg.D)
        name = "unpatch_L"
    return tn.patch_unproject(tokens.reshape(grid), PATCH, params[f"{name}.w"], params[f"{name}.b"], C)


def token_positions(cfg):
    """(N, 4) integer (view-or-modality, t, h, w) of every token in [camera | lidar] order."""
    V, Tl = cfg.V, cfg.T_lat
    cam = np.stack(
        np.meshgrid(np.arange(V), np.arange(Tl), np.arange(cfg.H_C // 16), np.arange(cfg.W_C // 16), indexing="ij"), -1
    ).reshape(-1, 4)
    lid = np.stack(
        np.meshgrid([V], np.arange(Tl), np.arange(cfg.H_L // 16), np.arange(cfg.W_L // 16), indexing="ij"), -1
    ).reshape(-1, 4)
    return np.concatenate([cam, lid])


def timestep_embedding(t, dim):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# ---------------------------------------------------------------- block


def self_attention(params, b, h, rope, heads):
    """Joint multi-head self-attention over the full token sequence."""
    D = h.shape[-1]
    q, k, v = tn.split(nn.linear(params, f"{b}.qkv", h), [D, D, D], axis=-1)
    q, k, v = (nn.split_heads(a, heads) for a in (q, k, v))
    cos, sin = rope
    q, k = nn.apply_rotary(q, cos, sin), nn.apply_rotary(k, cos, sin)
    return nn.linear(params, f"{b}.attn_out", nn.merge_heads(nn.attention(q, k, v)))


def cross_attention(params, b, h, ctx_k, ctx_v, heads):
    q = nn.split_heads(nn.linear(params, f"{b}.xq", h), heads)
    k, v = nn.split_heads(ctx_k, heads), nn.split_heads(ctx_v, heads)
    return nn.linear(params, f"{b}.xout", nn.merge_heads(nn.attention(q, k, v)))


def block_forward(tb: TokenBatch, text_emb, t_emb, params, layer, cfg, rope):
    """Pre-norm block: joint self-attn, per-modality text cross-attn, joint FFN."""
    b = f"blk{layer}"
    B = tb.camera.shape[0]
    V, LC, D = cfg.V, cfg.L_C, cfg.D
    n_cam = tb.camera.shape[1]
    x = tn.concat([tb.camera, tb.lidar], axis=1)
    h = nn.norm(params, f"{b}.ln1", x) + t_emb.reshape(B, 1, D)
    x = x + self_attention(params, b, h, rope, cfg.heads)

    xc, xl = tn.split(x, [n_cam, x.shape[1] - n_cam], axis=1)
    ctx = nn.linear(params, f"{b}.xkv", text_emb)  # (B, n, 2D)
    n_txt = ctx.shape[1]
    ctx_k, ctx_v = tn.split(ctx, [D, D], axis=-1)
    # cameras: (B, V*L_C, D) -> (B*V, L_C, D), prompt broadcast to every view
    xc = xc.reshape(B * V, LC, D)
    ck = tn.broadcast_to(ctx_k.reshape(B, 1, n_txt, D), (B, V, n_txt, D)).reshape(B * V, n_txt, D)
    cv = tn.broadcast_to(ctx_v.reshape(B, 1, n_txt, D), (B, V, n_txt, D)).reshape(B * V, n_txt, D)
    xc = xc + cross_attention(params, b, nn.norm(params, f"{b}.ln2", xc), ck, cv, cfg.heads)
    xl = xl + cross_attention(params, b, nn.norm(params, f"{b}.ln2", xl), ctx_k, ctx_v, cfg.heads)
    xc = xc.reshape(B, V * LC, D)

    x = tn.concat([xc, xl], axis=1)
    hf = nn.linear(params, f"{b}.ff2", tn.gelu(nn.linear(params, f"{b}.ff1", nn.norm(params, f"{b}.ln3", x))))
    x = x + hf
    xc, xl = tn.split(x, [n_cam, x.shape[1] - n_cam], axis=1)
    return TokenBatch(xc, xl)


# ---------------------------------------------------------------- model


def encode_conditions(params, cfg, conds: Conditions):
    """Layout latents for both modalities through the shared layout encoder."""
    lc = encode_layout(Tensor(conds.layout_C), params)
    ll = encode_layout(Tensor(conds.layout_L), params)
    return lc, ll


def model_forward(params, cfg: DiTConfig, zt_C, zt_L, conds: Conditions, t):
    """Velocity prediction (u_C, u_L) with the shapes of (zt_C, zt_L)."""
    zt_C, zt_L = tn._wrap(zt_C), tn._wrap(zt_L)
    B = zt_C.shape[0]
    if zt_C.shape != (B, *cfg.cam_latent):
        raise ShapeError(f"camera latent {zt_C.shape} != {(B, *cfg.cam_latent)}")
    if zt_L.shape != (B, *cfg.lidar_latent):
        raise ShapeError(f"lidar latent {zt_L.shape} != {(B, *cfg.lidar_latent)}")
    lc, ll = encode_conditions(params, cfg, conds)

    emb_C = params["view_emb"][: cfg.V].reshape(1, cfg.V, 1, 1, 1, cfg.C_emb)
    emb_L = params["view_emb"][cfg.V :].reshape(1, 1, 1, 1, cfg.C_emb)
    x_C = assemble_modality_input(
        zt_C, tn.broadcast_to(emb_C, (B, cfg.V, 1, 1, 1, cfg.C_emb)), lc, Tensor(conds.frame_C)
    )
    x_L = assemble_modality_input(zt_L, tn.broadcast_to(emb_L, (B, 1, 1, 1, cfg.C_emb)), ll, Tensor(conds.frame_L))

    tb = TokenBatch(patchify(x_C, "camera", params, cfg), patchify(x_L, "lidar", params, cfg))
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    t_emb = Tensor(timestep_embedding(t_arr, cfg.D))
    t_emb = nn.linear(params, "temb.l2", tn.gelu(nn.linear(params, "temb.l1", t_emb)))
    text = tn.take_rows(params["text_emb"], np.asarray(conds.text))
    rope = nn.rotary_tables(token_positions(cfg), cfg.D // cfg.heads)
    for i in range(cfg.depth):
        tb = block_forward(tb, text, t_emb, params, i, cfg, rope)
    return unpatchify(tb.camera, "camera", params, cfg), unpatchify(tb.lidar, "lidar", params, cfg)


def noisy_batch(z1_C, z1_L, rng, t_mean=0.0, t_std=1.0):
    """Flow sample with the first latent frame held clean."""
    B = z1_C.shape[0]
    z0_C = rng.standard_normal(z1_C.shape)
    z0_L = rng.standard_normal(z1_L.shape)
    t = sample_timestep(rng, t_mean, t_std, size=B)
    s = make_flow_sample(z0_C, z0_L, z1_C, z1_L, t)
    s.zt_C[:, :, 0] = z1_C[:, :, 0]
    s.zt_L[:, 0] = z1_L[:, 0]
    return s


def masked_flow_loss(u_C, u_L, s):
    """Flow loss restricted to the generated latent frames (index >= 1)."""
    from .objectives import FlowSample

    tail = FlowSample(s.zt_C[:, :, 1:], s.zt_L[:, 1:], s.t, s.nu_C[:, :, 1:], s.nu_L[:, 1:])
    return flow_loss(u_C[:, :, 1:], u_L[:, 1:], tail)


def train_step(params, cfg, opt, batch, rng, t_mean=0.0, t_std=1.0):
    """One optimiser step on ``batch = (z1_C, z1_L, conds)``; returns (loss, params)."""
    z1_C, z1_L, conds = batch
    s = noisy_batch(z1_C, z1_L, rng, t_mean, t_std)
    u_C, u_L = model_forward(params, cfg, s.zt_C, s.zt_L, conds, s.t)
    loss = masked_flow_loss(u_C, u_L, s)
    val = loss.item()
    if not np.isfinite(val):
        raise FloatingPointError(f"flow loss became {val}; t={s.t.tolist()}")
    opt.zero_grad()
    tn.backward(loss)
    opt.step()
    return val, params


def euler_sample(params, cfg, conds: Conditions, steps=20, seed=0):
    """Integrate dz/dt = u from noise at t=0 to t=1; first latent frame held at its clean value."""
    if steps < 1:
        raise ValueError("need at least one Euler step")
    rng = np.random.default_rng(seed)
    B = len(conds.text)
    z_C = rng.standard_normal((B, *cfg.cam_latent)).astype(np.float32)
    z_L = rng.standard_normal((B, *cfg.lidar_latent)).astype(np.float32)
    dt = 1.0 / steps
    with tn.no_grad():
        for i in range(steps):
            z_C[:, :, 0] = conds.frame_C[:, :, 0]
            z_L[:, 0] = conds.frame_L[:, 0]
            u_C, u_L = model_forward(params, cfg, z_C, z_L, conds, i * dt)
            z_C = (z_C + dt * u_C.data).astype(np.float32)
            z_L = (z_L + dt * u_L.data).astype(np.float32)
    z_C[:, :, 0] = conds.frame_C[:, :, 0]
    z_L[:, 0] = conds.frame_L[:, 0]
    return z_C, z_L
