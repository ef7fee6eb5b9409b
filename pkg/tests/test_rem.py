import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevloc import backbone as bb
from bevloc.errors import ParameterError, RangeError
from bevloc.rem import (
    FeatureMap,
    descriptor_at,
    descriptors_at,
    feature_distance_profile,
    pixel_to_cell,
    profile_csv,
    rem_forward,
    rotation_angles,
)


def disk(side):
    c = (side - 1) / 2
    yy, xx = np.mgrid[0:side, 0:side]
    return np.hypot(xx - c, yy - c) <= side / 2 - 1


def test_angles_cover_the_circle():
    assert rotation_angles(4) == pytest.approx([0, math.pi / 2, math.pi, 3 * math.pi / 2])


def test_single_rotation_is_plain_forward(small_net, textured_bev):
    spec, w = small_net
    img = textured_bev.pixels[:96, :96]
    assert np.array_equal(rem_forward(img, spec, w, 1).tensor, bb.forward(img, spec, w))


def test_zero_image_gives_zero_map(small_net):
    spec, w = small_net
    assert not rem_forward(np.zeros((64, 64)), spec, w, 8).tensor.any()


def test_bad_rotation_count(small_net):
    spec, w = small_net
    with pytest.raises(ParameterError):
        rem_forward(np.zeros((32, 32)), spec, w, 0)


def test_map_is_max_of_constituents(small_net, textured_bev):
    spec, w = small_net
    img = textured_bev.pixels[50:146, 50:146]
    maps = [bb.rotate_tensor(bb.forward(bb.rotate_tensor(img, r), spec, w), -r) for r in rotation_angles(4)]
    assert np.array_equal(rem_forward(img, spec, w, 4).tensor, np.max(maps, axis=0))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_quarter_turn_equivariance(small_net, textured_bev, k):
    spec, w = small_net
    img = textured_bev.pixels
    a = rem_forward(np.rot90(img, k), spec, w, 4).tensor
    b = bb.rotate_tensor(rem_forward(img, spec, w, 4).tensor, k * math.pi / 2)
    assert np.abs(a - b).max() <= 1e-4


def test_off_group_equivariance_on_disk(small_net, textured_bev):
    spec, w = small_net
    img = textured_bev.pixels
    alpha = 0.7
    a = rem_forward(bb.rotate_tensor(img, alpha), spec, w, 8).tensor
    ref = rem_forward(img, spec, w, 8).tensor
    b = bb.rotate_tensor(ref, alpha)
    m = disk(a.shape[0])
    err = np.abs(a - b)[m].mean()
    assert err <= 0.05 * (ref.max() - ref.min())


def test_adding_rotations_never_lowers_the_map(small_net, textured_bev):
    spec, w = small_net
    img = textured_bev.pixels[40:136, 40:136]
    coarse = rem_forward(img, spec, w, 2).tensor
    fine = rem_forward(img, spec, w, 4).tensor
    assert np.all(fine >= coarse)


# ---------------------------------------------------------------- descriptors


def test_pixel_to_cell_centres_align():
    assert pixel_to_cell(np.array([[99.5, 99.5]]), 8)[0] == pytest.approx([12.0, 12.0])
    assert pixel_to_cell(np.array([[3.5, 11.5]]), 8)[0] == pytest.approx([0.0, 1.0])


def _random_map(rng, side=6, c=5):
    return FeatureMap(rng.normal(size=(side, side, c)).astype(np.float32), 8, 4)


def test_stride_aligned_keypoint_reads_stored_column(rng):
    fmap = _random_map(rng)
    d = descriptor_at(fmap, 8 * 2 + 3.5, 8 * 4 + 3.5)
    col = fmap.tensor[4, 2].astype(np.float64)
    assert np.allclose(d.vector, col / np.linalg.norm(col), atol=1e-6)
    assert not d.degenerate


def test_zero_map_descriptor_is_flagged():
    fmap = FeatureMap(np.zeros((4, 4, 3), np.float32), 8, 1)
    d = descriptor_at(fmap, 10, 10)
    assert d.degenerate and not d.vector.any()


def test_out_of_bounds_keypoint(rng):
    fmap = _random_map(rng)
    with pytest.raises(RangeError):
        descriptor_at(fmap, -1, 3)
    with pytest.raises(RangeError):
        descriptor_at(fmap, 3, 48, image_size=48)


def _bilinear_oracle(t, u, v):
    h, w, _ = t.shape
    u = min(max(u, 0.0), w - 1)
    v = min(max(v, 0.0), h - 1)
    u0, v0 = int(math.floor(u)), int(math.floor(v))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    return ((1 - fu) * (1 - fv) * t[v0, u0] + fu * (1 - fv) * t[v0, u1]
            + (1 - fu) * fv * t[v1, u0] + fu * fv * t[v1, u1])


@pytest.mark.parametrize("seed", range(50))
def test_descriptors_match_sample_then_normalize(seed):
    rng = np.random.default_rng(seed)
    fmap = _random_map(rng, side=int(rng.integers(3, 9)), c=int(rng.integers(1, 9)))
    size = fmap.tensor.shape[0] * 8
    uv = rng.uniform(0, size - 1, size=(50, 2))
    got, deg = descriptors_at(fmap, uv, size)
    t = fmap.tensor.astype(np.float64)
    for (u, v), g in zip(uv, got):
        cu, cv = (u + 0.5) / 8 - 0.5, (v + 0.5) / 8 - 0.5
        ref = _bilinear_oracle(t, cu, cv)
        assert np.allclose(g, ref / np.linalg.norm(ref), atol=1e-6)
    assert not deg.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_descriptors_are_unit_or_zero(seed):
    rng = np.random.default_rng(seed)
    t = np.maximum(rng.normal(size=(5, 5, 4)), 0).astype(np.float32)
    fmap = FeatureMap(t, 8, 1)
    vecs, deg = descriptors_at(fmap, rng.uniform(0, 39, size=(20, 2)), 40)
    norms = np.linalg.norm(vecs, axis=1)
    assert np.allclose(norms[~deg], 1.0, atol=1e-5)
    assert np.all(norms[deg] == 0)


# ---------------------------------------------------------------- distance profile


def test_profile_zero_displacement(small_net, textured_bev):
    spec, w = small_net
    rows = feature_distance_profile(textured_bev, spec, w, 1, [0, 4])
    assert rows[0] == (0, 0.0)
    assert rows[1][1] > 0


def test_profile_constant_image_is_flat(small_net):
    spec, w = small_net
    # beyond the reach of zero padding every cell sees the same input
    rows = feature_distance_profile(np.full((200, 200), 0.5), spec, w, 1, [0, 2, 4, 8], margin=40)
    assert all(abs(m) < 1e-6 for _, m in rows)


def test_profile_rejects_huge_displacement(small_net):
    spec, w = small_net
    with pytest.raises(ParameterError):
        feature_distance_profile(np.zeros((48, 48)), spec, w, 1, [40])


def test_profile_csv_format():
    text = profile_csv([(0, 0.0), (2, 0.125)])
    assert text == "delta_px,mean_distance\n0,0\n2,0.125\n"


def test_translation_correspondence_is_mostly_unique(small_net, world):
    """Nearest grid descriptor of a shifted scan is usually the true correspondent."""
    from bevloc.geom import Se2Pose
    from bevloc.synthetic import scan_world
    from conftest import bev_of

    spec, w = small_net
    shift = 3.2  # metres = one stride at g = 0.4
    a = bev_of(scan_world(world, Se2Pose(0.0, 0.0, 0.0), noise=0.0, rng=np.random.default_rng(1)))
    b = bev_of(scan_world(world, Se2Pose(shift, 0.0, 0.0), noise=0.0, rng=np.random.default_rng(1)))
    fa = rem_forward(a, spec, w, 4).tensor
    fb = rem_forward(b, spec, w, 4).tensor
    side = fa.shape[0]
    n = side * side
    na = fa.reshape(n, -1) / np.maximum(np.linalg.norm(fa.reshape(n, -1), axis=1, keepdims=True), 1e-12)
    nb = fb.reshape(n, -1) / np.maximum(np.linalg.norm(fb.reshape(n, -1), axis=1, keepdims=True), 1e-12)
    # moving the sensor +x shifts structure one cell left in b
    hits = total = 0
    for r in range(3, side - 3):
        for c in range(4, side - 3):
            q = nb[r * side + c - 1]
            if not q.any():
                continue
            total += 1
            hits += int(np.argmin(((na - q) ** 2).sum(1)) == r * side + c)
    assert total > 100
    assert hits / total >= 0.9
