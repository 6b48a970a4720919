import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmworld import rangeview as rv
from mmworld.rangeview import RangeImage, RangeSpec

SPEC = RangeSpec()


def cloud_in_fov(rng, n, spec, r_lo=1.0):
    r = rng.uniform(r_lo, spec.r_max, n)
    phi = rng.uniform(-math.pi, math.pi, n)
    theta = rng.uniform(math.radians(spec.fov_down), math.radians(spec.fov_up), n)
    return np.stack([r * np.cos(theta) * np.cos(phi), r * np.cos(theta) * np.sin(phi), r * np.sin(theta)], -1)


def winner_errors(points, spec):
    """Per valid pixel: distance between the decoded point and the point that won the pixel."""
    img = rv.encode(points, spec)
    v, u, r, keep = rv.pixel_coords(points, spec)
    order = np.lexsort((r[keep], (v * spec.azimuth_bins + u)[keep]))
    pix = (v * spec.azimuth_bins + u)[keep][order]
    first = np.r_[True, pix[1:] != pix[:-1]]
    winners = points[keep][order][first]
    win_pix = pix[first]
    dec = rv.decode(img)
    dec_pix = np.flatnonzero(img.valid.reshape(-1))
    assert np.array_equal(dec_pix, win_pix)
    return np.linalg.norm(dec - winners, axis=1), np.linalg.norm(winners, axis=1)


def test_spec_validation():
    for bad in (dict(beams=0), dict(fov_up=-40.0), dict(r_max=0.0), dict(repeat_k=3), dict(normalization="sqrt")):
        with pytest.raises(ValueError):
            RangeSpec(**bad)


def test_empty_cloud():
    img = rv.encode(np.zeros((0, 3)), SPEC)
    assert not img.valid.any() and not img.ranges.any()
    assert rv.decode(img).shape == (0, 3)


def test_single_point_hand_projection():
    img = rv.encode(np.array([[10.0, 0.0, 0.0]]), SPEC)
    assert img.valid.sum() == 1
    assert img.valid[8, 512]
    assert img.ranges[8, 512] == 10.0


def test_min_rule():
    img = rv.encode(np.array([[9.0, 0.0, 0.0], [5.0, 0.0, 0.0]]), SPEC)
    assert img.ranges[8, 512] == 5.0


def test_out_of_range_and_fov_dropped():
    pts = np.array([[80.0, 0, 0], [0, 0, 5.0], [1.0, 0, -5.0]])
    assert not rv.encode(pts, SPEC).valid.any()


def test_single_point_roundtrip_within_bound():
    p = np.array([10.0, 0.0, 0.0])
    back = rv.decode(rv.encode(p[None], SPEC))
    assert len(back) == 1
    assert np.linalg.norm(back[0] - p) <= SPEC.quantization_bound(10.0)


def test_scene_roundtrip_mean_error_bound(rng):
    pts = cloud_in_fov(rng, 10_000, SPEC)
    err, r = winner_errors(pts, SPEC)
    assert np.all(err <= SPEC.quantization_bound(r) * (1 + 1e-6) + 1e-5)
    assert err.mean() <= SPEC.r_max * (math.pi / SPEC.azimuth_bins + SPEC.fov_span / (2 * SPEC.beams))


def test_projection_idempotent(rng):
    img = rv.encode(cloud_in_fov(rng, 5000, SPEC), SPEC)
    again = rv.encode(rv.decode(img), SPEC)
    np.testing.assert_array_equal(again.valid, img.valid)
    np.testing.assert_allclose(again.ranges, img.ranges, rtol=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_encode_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    spec = RangeSpec(beams=8, azimuth_bins=32)
    pts = cloud_in_fov(rng, 200, spec)
    a = rv.encode(pts, spec)
    b = rv.encode(pts[rng.permutation(len(pts))], spec)
    assert a.ranges.tobytes() == b.ranges.tobytes()
    np.testing.assert_array_equal(a.valid, b.valid)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_collapse_repeat_exact(k, rng):
    spec = RangeSpec(repeat_k=k)
    img = rv.encode(cloud_in_fov(rng, 20_000, spec), spec)
    ranges, valid = rv.repeat_rows(img, k)
    assert ranges.shape == (k * spec.beams, spec.azimuth_bins)
    back = rv.collapse_rows(ranges, valid, k, spec)
    assert back.ranges.tobytes() == img.ranges.tobytes()
    np.testing.assert_array_equal(back.valid, img.valid)


def test_repeat_rows_k4_layout(rng):
    img = rv.encode(cloud_in_fov(rng, 5000, SPEC), SPEC)
    ranges, _ = rv.repeat_rows(img, 4)
    assert ranges.shape == (128, 1024)
    for i in range(1, 4):
        np.testing.assert_array_equal(ranges[i], ranges[0])


def test_collapse_averages_valid_entries_only():
    spec = RangeSpec(beams=1, azimuth_bins=3, repeat_k=2)
    ranges = np.array([[2.0, 0.0, 0.0], [4.0, 6.0, 0.0]])
    valid = np.array([[True, False, False], [True, True, False]])
    out = rv.collapse_rows(ranges, valid, 2, spec)
    np.testing.assert_allclose(out.ranges, [[3.0, 6.0, 0.0]])
    np.testing.assert_array_equal(out.valid, [[True, True, False]])
    with pytest.raises(ValueError, match="divisible"):
        rv.collapse_rows(np.zeros((3, 3)), np.zeros((3, 3), bool), 2, spec)


def test_normalize_endpoints():
    spec = RangeSpec(beams=1, azimuth_bins=3)
    img = RangeImage(spec, np.array([[70.0, 35.0, 0.0]], np.float32), np.array([[True, True, False]]))
    t = rv.normalize(img)
    np.testing.assert_allclose(t, [[1.0, 0.0, -1.0]], atol=1e-7)
    back = rv.denormalize(t, spec)
    np.testing.assert_array_equal(back.valid, img.valid)
    np.testing.assert_allclose(back.ranges, img.ranges, rtol=1e-6)


def test_denormalize_clamps_and_cuts():
    spec = RangeSpec(beams=1, azimuth_bins=4)
    back = rv.denormalize(np.array([[1.5, -1.0 + 5e-4, -0.99, -3.0]]), spec)
    np.testing.assert_array_equal(back.valid, [[True, False, True, False]])
    assert back.ranges[0, 0] == spec.r_max
    back.check()


@pytest.mark.parametrize("mode", ["linear", "log"])
def test_normalize_roundtrip(mode, rng):
    spec = RangeSpec(normalization=mode)
    img = rv.encode(cloud_in_fov(rng, 3000, spec), spec)
    back = rv.denormalize(rv.normalize(img), spec)
    np.testing.assert_array_equal(back.valid, img.valid)
    np.testing.assert_allclose(back.ranges, img.ranges, rtol=1e-5)


def test_grid_cloud_helpers(rng):
    spec = RangeSpec(beams=16, azimuth_bins=256, repeat_k=4)
    pts = cloud_in_fov(rng, 2000, spec)
    grid = rv.cloud_to_grid(pts, spec)
    assert grid.shape == (64, 256)
    np.testing.assert_allclose(rv.grid_to_cloud(grid, spec), rv.decode(rv.encode(pts, spec)), atol=1e-4)
