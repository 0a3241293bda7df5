import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyposcore.geom import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    compose,
    hsv_to_rgb,
    hue_difference,
    normals_from_depth,
    rgb_to_hsv,
    rotation_about_axis,
    rotation_geodesic,
    transform_and_project,
    voxel_downsample,
)


def random_transform(rng, scale=1.0):
    axis = rng.normal(size=3)
    t = RigidTransform(rotation_about_axis(axis, rng.uniform(0, np.pi)), rng.normal(size=3) * scale)
    return t


# --- rigid transforms ------------------------------------------------------


def test_compose_identity():
    t = random_transform(np.random.default_rng(0))
    out = compose(RigidTransform.identity(), t)
    assert np.allclose(out.rotation, t.rotation)
    assert np.allclose(out.translation, t.translation)


def test_compose_with_inverse_is_identity():
    t = random_transform(np.random.default_rng(1))
    out = compose(t, t.inverse())
    assert np.abs(out.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(out.translation).max() < 1e-9


def test_compose_matches_matrix_multiply():
    # two quarter turns equal a half turn, checked element-wise against the
    # plain 4x4 product
    rz90 = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [0.1, 0, 0])
    out = compose(rz90, rz90)
    expected = rz90.as_matrix() @ rz90.as_matrix()
    assert np.abs(out.as_matrix() - expected).max() < 1e-12
    assert np.abs(out.rotation - rotation_about_axis([0, 0, 1], np.pi)).max() < 1e-12


def test_compose_applies_right_argument_first():
    a = random_transform(np.random.default_rng(2))
    b = random_transform(np.random.default_rng(3))
    p = np.array([0.3, -0.2, 0.9])
    assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)))


def test_invalid_rotation_rejected():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transform_is_isometry(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    p, q = rng.normal(size=3), rng.normal(size=3)
    assert abs(np.linalg.norm(t.apply(p) - t.apply(q)) - np.linalg.norm(p - q)) < 1e-9


# --- projection ------------------------------------------------------------

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def test_project_principal_point():
    u, v, z, valid = transform_and_project(RigidTransform.identity(), K, [0, 0, 1.0])
    assert valid and (u, v, z) == (320.0, 240.0, 1.0)


def test_project_hand_computed():
    u, v, z, valid = transform_and_project(RigidTransform.identity(), K, [0.1, 0, 1.0])
    assert valid
    assert u == pytest.approx(370.0, abs=1e-12)


def test_project_behind_camera_flagged():
    *_, valid = transform_and_project(RigidTransform.identity(), K, [0, 0, -0.2])
    assert not valid


def test_backproject_inverts_projection():
    p = np.array([0.05, -0.03, 0.8])
    uv, z, _ = K.project(p[None])
    assert np.allclose(K.backproject(uv[0, 0], uv[0, 1], z[0]), p)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


# --- color -----------------------------------------------------------------


def test_rgb_to_hsv_primaries():
    assert np.allclose(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0])
    assert np.allclose(rgb_to_hsv([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5])
    assert np.allclose(rgb_to_hsv([0.0, 1.0, 0.0]), [1 / 3, 1.0, 1.0])


def test_rgb_to_hsv_matches_reference():
    rng = np.random.default_rng(4)
    for rgb in rng.random((200, 3)):
        ours = rgb_to_hsv(rgb)
        ref = colorsys.rgb_to_hsv(*rgb)
        assert np.allclose(ours, ref, atol=1e-12)


def test_hsv_round_trip():
    rng = np.random.default_rng(5)
    rgb = rng.random((500, 3))
    hsv = rgb_to_hsv(rgb)
    sat_ok = hsv[:, 1] > 0
    back = hsv_to_rgb(hsv)
    assert np.abs(back[sat_ok] - rgb[sat_ok]).max() < 1e-6


def test_hue_difference_wraps():
    assert hue_difference(0.0, 0.9) == pytest.approx(0.1)
    assert hue_difference(0.9, 0.0) == pytest.approx(-0.1)
    assert hue_difference(0.75, 0.25) == pytest.approx(-0.5)


# --- normals from depth ----------------------------------------------------


def test_normals_flat_plane_face_camera():
    depth = np.full((40, 40), 0.8)
    n = normals_from_depth(depth, CameraIntrinsics(300, 300, 20, 20, 40, 40))
    interior = n[2:-2, 2:-2]
    assert np.allclose(interior, [0, 0, -1.0], atol=1e-9)


def test_normals_tilted_ramp():
    k = CameraIntrinsics(300, 300, 20, 20, 40, 40)
    # plane z = z0 + x  (45 degrees about the y axis): z = z0 / (1 - (u-cx)/fx)
    u = np.arange(40, dtype=float)[None, :]
    depth = np.broadcast_to(0.8 / (1.0 - (u - k.cx) / k.fx), (40, 40)).copy()
    n = normals_from_depth(depth, k)
    expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
    interior = n[5:-5, 5:-5].reshape(-1, 3)
    angles = np.degrees(np.arccos(np.clip(interior @ expected, -1, 1)))
    assert angles.max() < 2.0


def test_normals_invalid_near_hole():
    depth = np.full((20, 20), 0.5)
    depth[10, 10] = 0.0
    n = normals_from_depth(depth, CameraIntrinsics(300, 300, 10, 10, 20, 20))
    assert np.all(n[10, 10] == 0)
    for r, c in [(10, 9), (10, 11), (9, 10), (11, 10)]:
        assert np.all(n[r, c] == 0), (r, c)
    assert np.linalg.norm(n[5, 5]) == pytest.approx(1.0)


# --- voxel downsampling ----------------------------------------------------


def unit_normals(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_voxel_merges_two_close_points():
    cloud = PointCloud(
        [[0.001, 0.001, 0.001], [0.002, 0.001, 0.001]],
        [[0, 0, 1.0], [0, 0, 1.0]],
        [[0.2, 0.5, 0.5], [0.4, 0.5, 0.5]],
    )
    out = voxel_downsample(cloud, 0.007)
    assert len(out) == 1
    assert np.allclose(out.positions[0], [0.0015, 0.001, 0.001])


def test_voxel_keeps_regular_grid():
    g = np.arange(5) * 0.010
    xx, yy, zz = np.meshgrid(g, g, g)
    pos = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) + 0.002
    rng = np.random.default_rng(6)
    cloud = PointCloud(pos, unit_normals(len(pos), rng), rng.random((len(pos), 3)))
    out = voxel_downsample(cloud, 0.007)
    assert len(out) == len(pos)


def test_voxel_count_matches_hash_oracle():
    rng = np.random.default_rng(7)
    pos = rng.uniform(-0.1, 0.1, size=(5000, 3))
    cloud = PointCloud(pos, unit_normals(5000, rng), rng.random((5000, 3)))
    leaf = 0.007
    out = voxel_downsample(cloud, leaf)
    bins = set()
    for p in pos:
        bins.add((int(np.floor(p[0] / leaf)), int(np.floor(p[1] / leaf)), int(np.floor(p[2] / leaf))))
    assert len(out) == len(bins)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_voxel_never_grows_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 300))
    cloud = PointCloud(rng.uniform(-0.05, 0.05, (n, 3)), unit_normals(n, rng), rng.random((n, 3)))
    out = voxel_downsample(cloud, 0.007)
    assert len(out) <= n
    again = voxel_downsample(out, 0.007)
    # one merge pass may relocate centroids across voxel borders, but the
    # second pass on an already-merged cloud must not grow
    assert len(again) <= len(out)


def test_voxel_hue_average_is_circular():
    cloud = PointCloud(
        [[0.0, 0.0, 0.0], [0.001, 0.0, 0.0]],
        [[0, 0, 1.0], [0, 0, 1.0]],
        [[0.95, 1.0, 1.0], [0.05, 1.0, 1.0]],
    )
    out = voxel_downsample(cloud, 0.01)
    assert min(out.colors_hsv[0, 0], 1 - out.colors_hsv[0, 0]) < 0.011


# --- rotation distance ------------------------------------------------------


def test_rotation_geodesic_cases():
    r = rotation_about_axis([0, 0, 1], np.pi / 6)
    assert rotation_geodesic(r, r) == 0.0
    assert rotation_geodesic(np.eye(3), r) == pytest.approx(np.pi / 6, abs=1e-12)
    r180 = rotation_about_axis([1, 0, 0], np.pi)
    assert rotation_geodesic(np.eye(3), r180) == pytest.approx(np.pi, abs=1e-9)


def test_rotation_geodesic_matches_axis_angle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        axis = rng.normal(size=3)
        angle = rng.uniform(0, np.pi)
        r = rotation_about_axis(axis, angle)
        assert rotation_geodesic(np.eye(3), r) == pytest.approx(angle, abs=1e-9)
