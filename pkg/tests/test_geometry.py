"""Camera geometry contracts.

Hand-computed expectations use a camera with fx = fy = 100, cx = 19.5,
cy = 11.5 on a 40x24 raster unless stated otherwise. Backprojection of pixel
(u, v) at depth d is ((u - cx) / fx * d, (v - cy) / fy * d, d).
"""

from __future__ import annotations

import numpy as np
import pytest

from benthomap.geometry import (
    CameraIntrinsics,
    DepthMap,
    GeometryError,
    PoseSE3,
    axis_angle_from_rotation,
    backproject,
    bilinear_sample,
    camera_rays,
    orthonormalize_rotation,
    project,
    reproject_image,
    rotation_from_axis_angle,
    se3_compose,
    se3_inverse,
    warp_depth,
)

CAM = CameraIntrinsics(fx=100.0, fy=100.0, cx=19.5, cy=11.5, width=40, height=24)


def random_rotation(rng):
    return rotation_from_axis_angle(rng.normal(size=3))


def random_pose(rng, t_scale=1.0):
    return PoseSE3(random_rotation(rng), rng.normal(size=3) * t_scale)


class TestBackprojectProject:
    def test_backproject_hand_computed(self):
        """Pixel (29.5, 6.5) at depth 2: offsets (10, -5) / 100 * 2."""
        pts, valid = backproject(np.array([[29.5, 6.5]]), np.array([2.0]), CAM)
        np.testing.assert_allclose(pts[0], [0.2, -0.1, 2.0], atol=1e-12)
        assert valid[0]

    def test_principal_point_is_optical_axis(self):
        pts, _ = backproject(np.array([[19.5, 11.5]]), np.array([3.0]), CAM)
        np.testing.assert_allclose(pts[0], [0.0, 0.0, 3.0], atol=1e-12)

    def test_nonpositive_or_nan_depth_invalid(self):
        uv = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        pts, valid = backproject(uv, np.array([0.0, -1.0, np.nan]), CAM)
        assert not valid.any()
        np.testing.assert_array_equal(pts, 0.0)

    def test_project_hand_computed(self):
        uv, front = project(np.array([[0.2, -0.1, 2.0]]), CAM)
        np.testing.assert_allclose(uv[0], [29.5, 6.5], atol=1e-12)
        assert front[0]

    def test_behind_camera_masked_not_clamped(self):
        uv, front = project(np.array([[0.1, 0.1, -1.0], [0.0, 0.0, 0.0]]), CAM)
        assert not front.any()
        np.testing.assert_array_equal(uv, 0.0)

    def test_round_trip_pixel_exact(self):
        """project(backproject(uv, d)) == uv to 1e-9 for random pixels."""
        rng = np.random.default_rng(7)
        uv = rng.uniform([0, 0], [CAM.width - 1, CAM.height - 1], size=(500, 2))
        d = rng.uniform(0.5, 10.0, size=500)
        pts, bv = backproject(uv, d, CAM)
        uv2, front = project(pts, CAM)
        assert bv.all() and front.all()
        np.testing.assert_allclose(uv2, uv, atol=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(GeometryError):
            backproject(np.zeros((3, 2)), np.zeros(4), CAM)
        with pytest.raises(GeometryError):
            project(np.zeros((3, 2)), CAM)

    def test_bad_intrinsics_rejected(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=0, cy=0, width=8, height=8)
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=np.nan, fy=1.0, cx=0, cy=0, width=8, height=8)


class TestSE3:
    def test_identity_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            t = random_pose(rng)
            back = se3_compose(t, se3_inverse(t))
            np.testing.assert_allclose(back.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(back.translation, 0.0, atol=1e-9)

    def test_compose_is_apply_after_apply(self):
        rng = np.random.default_rng(4)
        a, b = random_pose(rng), random_pose(rng)
        p = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            se3_compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12
        )

    def test_long_chain_stays_orthonormal(self):
        """1000 random compositions keep R^T R within 1e-7 of identity."""
        rng = np.random.default_rng(5)
        t = PoseSE3.identity()
        for _ in range(1000):
            t = se3_compose(t, random_pose(rng, t_scale=0.1))
        drift = t.rotation.T @ t.rotation - np.eye(3)
        assert np.abs(drift).max() < 1e-7
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-7

    def test_inverse_transform_points(self):
        rng = np.random.default_rng(6)
        t = random_pose(rng)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(se3_inverse(t).apply(t.apply(p)), p, atol=1e-10)

    def test_orthonormalize_fixes_drift(self):
        rng = np.random.default_rng(8)
        r = random_rotation(rng) + rng.normal(size=(3, 3)) * 1e-4
        fixed = orthonormalize_rotation(r)
        np.testing.assert_allclose(fixed @ fixed.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(fixed) > 0

    def test_axis_angle_round_trip(self):
        rng = np.random.default_rng(9)
        for scale in (1e-9, 1e-4, 0.5, 2.0, 3.1):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * scale
            r = rotation_from_axis_angle(w)
            np.testing.assert_allclose(axis_angle_from_rotation(r), w, atol=1e-7)

    def test_rodrigues_small_angle_matches_series(self):
        w = np.array([1e-9, -2e-9, 5e-10])
        r = rotation_from_axis_angle(w)
        np.testing.assert_allclose(r, np.eye(3) + _hat(w), atol=1e-15)


def _hat(w):
    return np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=np.float64
    )


class TestBilinearSample:
    def test_integer_coordinates_exact(self):
        rng = np.random.default_rng(10)
        grid = rng.uniform(size=(6, 7))
        uv = np.array([[3.0, 2.0], [0.0, 0.0], [6.0, 5.0]])
        vals, valid = bilinear_sample(grid, uv)
        np.testing.assert_array_equal(vals, [grid[2, 3], grid[0, 0], grid[5, 6]])
        assert valid.all()

    def test_midpoint_hand_computed(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        vals, valid = bilinear_sample(grid, np.array([[0.5, 0.5]]))
        assert vals[0] == pytest.approx(1.5)  # mean of the four corners
        assert valid[0]

    def test_outside_invalid_not_clamped(self):
        grid = np.ones((4, 4))
        uv = np.array([[-0.01, 1.0], [3.01, 1.0], [1.0, -5.0], [1.0, 3.5]])
        vals, valid = bilinear_sample(grid, uv)
        assert not valid.any()
        np.testing.assert_array_equal(vals, 0.0)

    def test_continuity_lipschitz(self):
        """Nearby samples differ by at most 2 * max grid gradient * step."""
        rng = np.random.default_rng(11)
        grid = rng.uniform(size=(9, 9))
        gmax = max(
            np.abs(np.diff(grid, axis=0)).max(), np.abs(np.diff(grid, axis=1)).max()
        )
        uv = rng.uniform(0.1, 7.9, size=(200, 2))
        eps = 1e-4
        for delta in (np.array([eps, 0.0]), np.array([0.0, eps])):
            a, _ = bilinear_sample(grid, uv)
            b, _ = bilinear_sample(grid, uv + delta)
            assert np.abs(a - b).max() <= 2 * gmax * eps + 1e-12

    def test_channels_and_validity_mask(self):
        grid = np.stack([np.ones((4, 4)), np.zeros((4, 4))], axis=-1)
        gv = np.ones((4, 4), dtype=bool)
        gv[1, 1] = False
        vals, valid = bilinear_sample(grid, np.array([[1.2, 1.2], [2.5, 2.5]]), gv)
        assert not valid[0]  # touches the invalid corner with nonzero weight
        assert valid[1]
        np.testing.assert_allclose(vals[1], [1.0, 0.0])

    def test_exact_lattice_ignores_zero_weight_invalid_corner(self):
        grid = np.arange(16, dtype=float).reshape(4, 4)
        gv = np.ones((4, 4), dtype=bool)
        gv[2, 2] = False
        vals, valid = bilinear_sample(grid, np.array([[1.0, 2.0]]), gv)
        assert valid[0] and vals[0] == grid[2, 1]


class TestReprojectImage:
    def test_identity_returns_source_exactly(self):
        rng = np.random.default_rng(12)
        img = rng.uniform(size=(CAM.height, CAM.width, 3))
        depth = DepthMap.full(rng.uniform(1.0, 3.0, size=(CAM.height, CAM.width)))
        out, mask = reproject_image(img, depth, PoseSE3.identity(), CAM)
        assert mask.all()
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_planar_scene_translation_shifts_by_fx_tx_over_d(self):
        """Constant depth d, camera step tx along +x: content shifts fx*tx/d px."""
        rng = np.random.default_rng(13)
        img = rng.uniform(size=(CAM.height, CAM.width, 3))
        d, tx = 2.0, 0.1
        shift = CAM.fx * tx / d  # 5 pixels
        assert shift == pytest.approx(5.0)
        depth = DepthMap.full(np.full((CAM.height, CAM.width), d))
        # Pose of camera b in camera a: b moved +x by tx.
        t_ab = PoseSE3(np.eye(3), np.array([tx, 0.0, 0.0]))
        out, mask = reproject_image(img, depth, t_ab, CAM)
        # Target pixel u samples source at u + 5.
        expect = np.zeros_like(img)
        expect[:, : CAM.width - 5] = img[:, 5:]
        assert mask[:, : CAM.width - 5].all()
        assert not mask[:, CAM.width - 5 :].any()
        np.testing.assert_allclose(
            out[:, : CAM.width - 5], expect[:, : CAM.width - 5], atol=1e-9
        )

    def test_invalid_depth_masks_pixel(self):
        img = np.ones((CAM.height, CAM.width, 3))
        vals = np.full((CAM.height, CAM.width), 2.0)
        valid = np.ones_like(vals, dtype=bool)
        valid[3, 7] = False
        out, mask = reproject_image(img, DepthMap(vals, valid), PoseSE3.identity(), CAM)
        assert not mask[3, 7]
        np.testing.assert_array_equal(out[3, 7], 0.0)
        assert mask.sum() == CAM.height * CAM.width - 1

    def test_resolution_mismatch_raises(self):
        img = np.ones((8, 8, 3))
        depth = DepthMap.full(np.ones((8, 8)))
        with pytest.raises(GeometryError):
            reproject_image(img, depth, PoseSE3.identity(), CAM)


class TestWarpDepth:
    def test_identity_keeps_depth(self):
        rng = np.random.default_rng(14)
        depth = DepthMap.full(rng.uniform(1.0, 3.0, size=(CAM.height, CAM.width)))
        out = warp_depth(depth, PoseSE3.identity(), CAM)
        assert out.valid.all()
        np.testing.assert_allclose(out.values, depth.values, atol=1e-9)

    def test_approach_constant_plane(self):
        """Camera b is t=0.4 closer to a plane at depth 2: warped depth 1.6."""
        d, t = 2.0, 0.4
        depth = DepthMap.full(np.full((CAM.height, CAM.width), d))
        t_ab = PoseSE3(np.eye(3), np.array([0.0, 0.0, t]))
        out = warp_depth(depth, t_ab, CAM)
        assert out.valid.mean() > 0.5  # magnification opens gaps near borders
        np.testing.assert_allclose(out.values[out.valid], d - t, atol=1e-9)

    def test_occluder_wins_min_depth(self):
        """Two points landing in one cell keep the nearer depth."""
        vals = np.full((CAM.height, CAM.width), 5.0)
        vals[11, 20] = 1.0  # ray through (20, 11.5-ish) at depth 1
        depth = DepthMap(vals, np.ones_like(vals, dtype=bool))
        out = warp_depth(depth, PoseSE3.identity(), CAM)
        assert out.values[11, 20] == pytest.approx(1.0)


class TestCameraRays:
    def test_rays_match_backprojection_at_unit_depth(self):
        rays = camera_rays(CAM)
        pts, _ = backproject(
            np.array([[5.0, 7.0]]), np.array([1.0]), CAM
        )
        np.testing.assert_allclose(rays[7, 5], pts[0], atol=1e-15)

    def test_scaled_intrinsics_preserve_field_of_view(self):
        half = CAM.scaled(20, 12)
        # Outer pixel-edge directions must agree: pixel centers sit half a
        # pixel from the sensor edge, so compare edge coordinates.
        left_full = (0.0 - 0.5 - CAM.cx) / CAM.fx
        left_half = (0.0 - 0.5 - half.cx) / half.fx
        assert left_full == pytest.approx(left_half)
