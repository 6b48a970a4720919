import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmworld import dit, nn
from mmworld import tensor as tn
from mmworld.tensor import ShapeError, Tensor


def tiny(**kw):
    base = dict(V=2, T=4, H_C=32, W_C=32, H_L=32, W_L=64, C_lat=4, D=16, depth=1, heads=2)
    base.update(kw)
    return dit.DiTConfig(**base)


def random_inputs(cfg, seed=0, B=1):
    rng = np.random.default_rng(seed)
    conds = dit.Conditions(
        rng.uniform(0, 1, (B, cfg.V, 1 + cfg.T, cfg.H_C, cfg.W_C, 3)).astype(np.float32),
        rng.uniform(0, 1, (B, 1 + cfg.T, cfg.H_L, cfg.W_L, 3)).astype(np.float32),
        rng.standard_normal((B, cfg.V, 1, cfg.H_C // 8, cfg.W_C // 8, cfg.C_lat)).astype(np.float32),
        rng.standard_normal((B, 1, cfg.H_L // 8, cfg.W_L // 8, cfg.C_lat)).astype(np.float32),
        rng.integers(0, cfg.vocab, (B, cfg.n_text_tokens)),
    )
    zc = rng.standard_normal((B, *cfg.cam_latent)).astype(np.float32)
    zl = rng.standard_normal((B, *cfg.lidar_latent)).astype(np.float32)
    return zc, zl, conds


def test_config_validation():
    with pytest.raises(ValueError, match="multiple of 4"):
        tiny(T=6)
    with pytest.raises(ValueError, match="H_C"):
        tiny(H_C=40)
    with pytest.raises(ValueError):
        tiny(D=15)


def test_token_counts():
    cfg = tiny()
    assert cfg.cam_latent == (2, 2, 4, 4, 4)
    assert cfg.L_C == 8
    zc, zl, conds = random_inputs(cfg)
    p = dit.init_params(cfg)
    x = dit.assemble_modality_input(zc, np.zeros((1, 2, 1, 1, 1, cfg.C_emb)), np.zeros((*zc.shape[:-1], cfg.C_cond)), conds.frame_C)
    assert dit.patchify(x, "camera", p, cfg).shape == (1, 16, cfg.D)


def test_assemble_bookkeeping():
    cfg = tiny()
    zc, _, conds = random_inputs(cfg)
    emb = np.zeros((1, 2, 1, 1, 1, cfg.C_emb))
    emb[:, 1] = 1.0
    lay = np.zeros((*zc.shape[:-1], cfg.C_cond))
    zc[:, 1] = zc[:, 0]
    frame = conds.frame_C.copy()
    frame[:, 1] = frame[:, 0]
    x = dit.assemble_modality_input(zc, emb, lay, frame).data
    assert x.shape[-1] == cfg.in_channels == cfg.C_lat + cfg.C_emb + cfg.C_cond + cfg.C_lat + 1
    diff = np.any(x[:, 0] != x[:, 1], axis=(1, 2, 3))
    emb_ch = slice(cfg.C_lat, cfg.C_lat + cfg.C_emb)
    assert diff[0, emb_ch].all() and diff[0].sum() == cfg.C_emb
    ind = x[..., -1]
    np.testing.assert_array_equal(ind.sum(axis=(-1, -2, -3)), 4 * 4)
    assert ind[:, :, 0].all() and not ind[:, :, 1:].any()
    np.testing.assert_array_equal(x[:, :, 1, ..., 12:16], x[:, :, 0, ..., 12:16])


def test_assemble_extent_mismatch():
    cfg = tiny()
    zc, _, conds = random_inputs(cfg)
    with pytest.raises(ShapeError):
        dit.assemble_modality_input(zc, np.zeros((1, 2, 1, 1, 1, 4)), np.zeros((1, 2, 2, 4, 2, 4)), conds.frame_C)


def test_camera_tokens_are_view_major():
    cfg = tiny()
    p = dit.init_params(cfg)
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 4, 4, cfg.in_channels))
    a = dit.patchify(x, "camera", p, cfg).data
    x[:, 0] += 1.0
    b = dit.patchify(x, "camera", p, cfg).data
    changed = np.any(a != b, axis=-1)[0]
    assert changed[: cfg.L_C].all() and not changed[cfg.L_C :].any()


def test_unpatchify_inverts_patchify_on_latent_channels():
    cfg = tiny()
    p = dit.init_params(cfg)
    rng = np.random.default_rng(0)
    cin, C = cfg.in_channels, cfg.C_lat
    sel = np.zeros((4 * cin, 4 * C))
    for pix in range(4):
        for c in range(C):
            sel[pix * cin + c, pix * C + c] = 1.0
    q = np.linalg.qr(rng.standard_normal((cfg.D, cfg.D)))[0]
    p["patch_C.w"] = Tensor(sel @ q)
    p["patch_C.b"] = Tensor(np.zeros(cfg.D))
    p["unpatch_C.w"] = Tensor(q.T)
    p["unpatch_C.b"] = Tensor(np.zeros(4 * C))
    x = rng.standard_normal((1, 2, 2, 4, 4, cin))
    back = dit.unpatchify(dit.patchify(x, "camera", p, cfg), "camera", p, cfg).data
    np.testing.assert_allclose(back, x[..., :C], atol=1e-5)


def test_model_output_shapes():
    cfg = tiny()
    zc, zl, conds = random_inputs(cfg, B=2)
    uc, ul = dit.model_forward(dit.init_params(cfg), cfg, zc, zl, conds, np.array([0.2, 0.7]))
    assert uc.shape == zc.shape and ul.shape == zl.shape
    with pytest.raises(ShapeError):
        dit.model_forward(dit.init_params(cfg), cfg, zc[:, :1], zl, conds, 0.5)


def _block_inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    tb = dit.TokenBatch(Tensor(rng.standard_normal((1, cfg.V * cfg.L_C, cfg.D))), Tensor(rng.standard_normal((1, cfg.L_L, cfg.D))))
    text = Tensor(rng.standard_normal((1, cfg.n_text_tokens, cfg.text_dim)))
    temb = Tensor(rng.standard_normal((1, cfg.D)))
    rope = nn.rotary_tables(dit.token_positions(cfg), cfg.D // cfg.heads)
    return tb, text, temb, rope


def test_block_shapes_and_zero_init_identity():
    cfg = tiny()
    tb, text, temb, rope = _block_inputs(cfg)
    out = dit.block_forward(tb, text, temb, dit.init_params(cfg), 0, cfg, rope)
    assert out.camera.shape == tb.camera.shape and out.lidar.shape == tb.lidar.shape
    assert not np.allclose(out.camera.data, tb.camera.data)
    zcfg = tiny(zero_out=True)
    out = dit.block_forward(tb, text, temb, dit.init_params(zcfg), 0, zcfg, rope)
    np.testing.assert_array_equal(out.camera.data, tb.camera.data)
    np.testing.assert_array_equal(out.lidar.data, tb.lidar.data)


def test_identity_at_init_reduces_to_linear_map():
    cfg = tiny(zero_out=True, depth=2)
    p = dit.init_params(cfg)
    zc, zl, conds = random_inputs(cfg)
    uc, ul = dit.model_forward(p, cfg, zc, zl, conds, 0.3)
    lc, ll = dit.encode_conditions(p, cfg, conds)
    emb_C = np.broadcast_to(p["view_emb"].data[:2].reshape(1, 2, 1, 1, 1, -1), (1, 2, 1, 1, 1, cfg.C_emb))
    xc = dit.assemble_modality_input(zc, emb_C, lc, conds.frame_C)
    ref = dit.unpatchify(dit.patchify(xc, "camera", p, cfg), "camera", p, cfg)
    np.testing.assert_allclose(uc.data, ref.data, rtol=1e-5, atol=1e-6)


def test_joint_self_attention_permutation_equivariant():
    cfg = tiny()
    p = dit.init_params(cfg)
    rng = np.random.default_rng(3)
    pos = dit.token_positions(cfg)
    h = rng.standard_normal((1, len(pos), cfg.D))
    perm = rng.permutation(len(pos))
    rope = nn.rotary_tables(pos, cfg.D // cfg.heads)
    rope_p = nn.rotary_tables(pos[perm], cfg.D // cfg.heads)
    a = dit.self_attention(p, "blk0", Tensor(h), rope, cfg.heads).data
    b = dit.self_attention(p, "blk0", Tensor(h[:, perm]), rope_p, cfg.heads).data
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-4, atol=1e-5)


def test_lidar_tokens_carry_distinct_modality_index():
    cfg = tiny()
    pos = dit.token_positions(cfg)
    assert set(pos[: cfg.V * cfg.L_C, 0]) == {0, 1}
    assert set(pos[cfg.V * cfg.L_C :, 0]) == {cfg.V}


def test_bidirectional_coupling():
    cfg = tiny()
    p = dit.init_params(cfg, seed=1)
    zc, zl, conds = random_inputs(cfg)
    uc0, ul0 = dit.model_forward(p, cfg, zc, zl, conds, 0.5)
    lid = dit.Conditions(conds.layout_C, conds.layout_L + 0.5, conds.frame_C, conds.frame_L, conds.text)
    uc1, _ = dit.model_forward(p, cfg, zc, zl, lid, 0.5)
    assert np.abs(uc1.data - uc0.data).max() > 1e-6
    _, ul2 = dit.model_forward(p, cfg, zc + 0.5, zl, conds, 0.5)
    assert np.abs(ul2.data - ul0.data).max() > 1e-6


def test_gradcheck_small_config():
    cfg = dit.DiTConfig(V=2, T=4, H_C=16, W_C=16, H_L=16, W_L=32, D=8, heads=2, text_dim=4, n_text_tokens=3, vocab=8, layout_widths=(2, 4))
    p = dit.init_params(cfg, 0)
    zc, zl, conds = random_inputs(cfg)
    s = dit.noisy_batch(zc.astype(np.float64), zl.astype(np.float64), np.random.default_rng(0))

    def f():
        uc, ul = dit.model_forward(p, cfg, s.zt_C, s.zt_L, conds, s.t)
        return dit.masked_flow_loss(uc, ul, s)

    assert tn.grad_check(f, [p[k] for k in sorted(p)], eps=1e-3, max_entries=3) < 1e-3


def test_first_frame_held_clean_and_masked():
    cfg = tiny()
    zc, zl, _ = random_inputs(cfg, B=2)
    s = dit.noisy_batch(zc, zl, np.random.default_rng(0))
    np.testing.assert_array_equal(s.zt_C[:, :, 0], zc[:, :, 0])
    np.testing.assert_array_equal(s.zt_L[:, 0], zl[:, 0])
    uc = s.nu_C.copy()
    ul = s.nu_L.copy()
    uc[:, :, 0] += 100.0
    ul[:, 0] -= 100.0
    assert dit.masked_flow_loss(uc, ul, s).item() == 0.0


def test_overfit_fixed_batch():
    cfg = tiny()
    p = dit.init_params(cfg, 0)
    zc, zl, conds = random_inputs(cfg)
    s = dit.noisy_batch(zc, zl, np.random.default_rng(0))
    opt = nn.Adam(p, lr=3e-3)
    losses = []
    for _ in range(50):
        uc, ul = dit.model_forward(p, cfg, s.zt_C, s.zt_L, conds, s.t)
        loss = dit.masked_flow_loss(uc, ul, s)
        losses.append(loss.item())
        opt.zero_grad()
        tn.backward(loss)
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.25 * losses[0]


def test_train_step_nan_aborts():
    cfg = tiny()
    p = dit.init_params(cfg, 0)
    zc, zl, conds = random_inputs(cfg)
    zc[0, 0, 1, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        dit.train_step(p, cfg, nn.Adam(p), (zc, zl, conds), np.random.default_rng(0))


def test_euler_constant_velocity(monkeypatch):
    cfg = tiny()
    _, _, conds = random_inputs(cfg)
    vc = np.random.default_rng(1).standard_normal(cfg.cam_latent).astype(np.float32)
    vl = np.random.default_rng(2).standard_normal(cfg.lidar_latent).astype(np.float32)
    monkeypatch.setattr(dit, "model_forward", lambda *a, **k: (Tensor(vc[None]), Tensor(vl[None])))
    one = dit.euler_sample({}, cfg, conds, steps=1, seed=4)
    many = dit.euler_sample({}, cfg, conds, steps=8, seed=4)
    np.testing.assert_allclose(one[0], many[0], atol=1e-5)
    np.testing.assert_allclose(one[1], many[1], atol=1e-5)
    np.testing.assert_array_equal(one[0][:, :, 0], conds.frame_C[:, :, 0])
    with pytest.raises(ValueError):
        dit.euler_sample({}, cfg, conds, steps=0)


def test_euler_deterministic():
    cfg = tiny()
    p = dit.init_params(cfg, 2)
    _, _, conds = random_inputs(cfg)
    a = dit.euler_sample(p, cfg, conds, steps=3, seed=9)
    b = dit.euler_sample(p, cfg, conds, steps=3, seed=9)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_tokenize_stable():
    a = dit.tokenize("road with 2 car", 8, 64)
    assert a.tolist() == dit.tokenize("Road with 2 car", 8, 64).tolist()
    assert (a[4:] == 0).all() and (a[:4] > 0).all()


@given(st.sampled_from([1, 2, 3]), st.sampled_from([4, 8]), st.integers(1, 2), st.integers(1, 3), st.integers(1, 2))
def test_shape_roundtrip_property(V, T, hc, wl, depth):
    cfg = dit.DiTConfig(V=V, T=T, H_C=16 * hc, W_C=16, H_L=16, W_L=16 * wl, D=8, depth=depth, heads=2, layout_widths=(2, 4))
    zc, zl, conds = random_inputs(cfg)
    with tn.no_grad():
        uc, ul = dit.model_forward(dit.init_params(cfg), cfg, zc, zl, conds, 0.5)
    assert uc.shape == zc.shape and ul.shape == zl.shape
