"""Loss term contracts, checked against slow scalar-loop oracles.

The vectorized photometric implementation is compared against an explicit
per-window reimplementation to 1e-10. Smoothness expectations are
hand-computed on a 4x4 grid. Geometric-consistency cases use planes where the
warped depth has a closed form.
"""

from __future__ import annotations

import numpy as np
import pytest

from benthomap.geometry import (
    CameraIntrinsics,
    DepthMap,
    PoseSE3,
    rotation_from_axis_angle,
    se3_compose,
    se3_inverse,
)
from benthomap.objective import (
    SSIM_C1,
    SSIM_C2,
    DegenerateMaskError,
    LossBreakdown,
    LossWeights,
    NumericError,
    geometric_consistency,
    photometric_loss,
    smoothness_reg,
    total_objective,
)

CAM = CameraIntrinsics(fx=60.0, fy=60.0, cx=15.5, cy=9.5, width=32, height=20)


def scalar_photometric(img, rec, mask, alpha):
    """Reference reimplementation with explicit window loops."""
    h, w, _ = img.shape
    l1 = []
    for v in range(h):
        for u in range(w):
            if mask[v, u]:
                l1.append(np.mean([abs(img[v, u, c] - rec[v, u, c]) for c in range(3)]))
    l1 = float(np.mean(l1))
    ds = []
    for v in range(1, h - 1):
        for u in range(1, w - 1):
            if not all(mask[v + dy, u + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)):
                continue
            per_ch = []
            for c in range(3):
                x = [img[v + dy, u + dx, c] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
                y = [rec[v + dy, u + dx, c] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
                mx, my = np.mean(x), np.mean(y)
                vx = np.mean(np.square(x)) - mx * mx
                vy = np.mean(np.square(y)) - my * my
                cv = np.mean(np.multiply(x, y)) - mx * my
                num = (2 * mx * my + SSIM_C1) * (2 * cv + SSIM_C2)
                den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
                per_ch.append(num / den)
            ds.append((1.0 - np.mean(per_ch)) / 2.0)
    ssim_term = float(np.mean(ds)) if ds else 0.0
    return alpha * ssim_term + (1 - alpha) * l1


class TestPhotometric:
    def test_identical_images_give_exact_zero(self):
        rng = np.random.default_rng(0)
        img = rng.random((10, 12, 3))
        mask = np.ones((10, 12), dtype=bool)
        assert photometric_loss(img, img.copy(), mask) == 0.0

    def test_pure_l1_black_vs_white(self):
        img = np.zeros((6, 6, 3))
        rec = np.ones((6, 6, 3))
        mask = np.ones((6, 6), dtype=bool)
        assert photometric_loss(img, rec, mask, alpha=0.0) == pytest.approx(1.0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.random((8, 8, 3))
        rec = rng.random((8, 8, 3))
        mask = np.ones((8, 8), dtype=bool)
        want = scalar_photometric(img, rec, mask, alpha=0.85)
        got = photometric_loss(img, rec, mask, alpha=0.85)
        assert abs(got - want) < 1e-10

    def test_matches_scalar_oracle_with_holes(self):
        rng = np.random.default_rng(4)
        img = rng.random((9, 11, 3))
        rec = rng.random((9, 11, 3))
        mask = rng.random((9, 11)) > 0.2
        want = scalar_photometric(img, rec, mask, alpha=0.85)
        got = photometric_loss(img, rec, mask, alpha=0.85)
        assert abs(got - want) < 1e-10

    def test_empty_mask_rejected(self):
        img = np.zeros((4, 4, 3))
        with pytest.raises(DegenerateMaskError):
            photometric_loss(img, img, np.zeros((4, 4), dtype=bool))

    def test_symmetric_when_pure_l1(self):
        rng = np.random.default_rng(5)
        a = rng.random((7, 7, 3))
        b = rng.random((7, 7, 3))
        mask = np.ones((7, 7), dtype=bool)
        assert photometric_loss(a, b, mask, 0.0) == photometric_loss(b, a, mask, 0.0)

    def test_masked_pixels_contribute_nothing(self):
        rng = np.random.default_rng(6)
        img = rng.random((8, 8, 3))
        rec = img.copy()
        mask = np.ones((8, 8), dtype=bool)
        mask[2, 3] = False
        base = photometric_loss(img, rec, mask)
        rec2 = rec.copy()
        rec2[2, 3] = 1.0 - rec2[2, 3]  # garbage under the mask hole
        assert photometric_loss(img, rec2, mask) == base

    def test_single_window_mask_uses_only_that_window(self):
        rng = np.random.default_rng(7)
        img = rng.random((6, 6, 3))
        rec = rng.random((6, 6, 3))
        mask = np.zeros((6, 6), dtype=bool)
        mask[1:4, 1:4] = True  # exactly one full 3x3 window, centered at (2, 2)
        want = scalar_photometric(img, rec, mask, alpha=0.85)
        assert photometric_loss(img, rec, mask, 0.85) == pytest.approx(want, abs=1e-12)

    def test_no_full_window_drops_ssim_term(self):
        rng = np.random.default_rng(8)
        img = rng.random((5, 5, 3))
        rec = rng.random((5, 5, 3))
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, :] = True  # border row: no interior 3x3 window is fully masked
        l1 = np.abs(img - rec).mean(axis=2)[mask].mean()
        want = (1 - 0.85) * l1
        assert photometric_loss(img, rec, mask, 0.85) == pytest.approx(want, abs=1e-12)


class TestSmoothness:
    def test_constant_depth_is_zero(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        depth = DepthMap(np.full((4, 4), 2.0), np.ones((4, 4), dtype=bool))
        assert smoothness_reg(img, depth) == 0.0

    def test_inverse_depth_ramp_hand_computed(self):
        """Columns with inverse depth 1,2,3,4: mean inv 2.5, d* steps of 0.4."""
        inv = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (4, 1))
        depth = DepthMap(1.0 / inv, np.ones((4, 4), dtype=bool))
        img = np.full((4, 4, 3), 0.5)
        assert smoothness_reg(img, depth) == pytest.approx(0.4, abs=1e-12)

    def test_image_edge_damps_depth_edge(self):
        inv = np.tile(np.array([1.0, 1.0, 3.0, 3.0]), (4, 1))
        depth = DepthMap(1.0 / inv, np.ones((4, 4), dtype=bool))
        flat = np.full((4, 4, 3), 0.5)
        edged = flat.copy()
        edged[:, 2:] = 0.9  # brightness edge at the same place as the depth edge
        assert smoothness_reg(edged, depth) < smoothness_reg(flat, depth)

    def test_all_invalid_rejected(self):
        depth = DepthMap(np.ones((3, 3)), np.zeros((3, 3), dtype=bool))
        with pytest.raises(DegenerateMaskError):
            smoothness_reg(np.zeros((3, 3, 3)), depth)

    def test_invalid_pixels_excluded_from_pairs(self):
        rng = np.random.default_rng(9)
        values = rng.uniform(1.0, 3.0, (5, 5))
        valid = np.ones((5, 5), dtype=bool)
        valid[2, 2] = False
        depth = DepthMap(values, valid)
        img = rng.random((5, 5, 3))
        base = smoothness_reg(img, depth)
        spiked = values.copy()
        spiked[2, 2] = 100.0
        assert smoothness_reg(img, DepthMap(spiked, valid)) == base

    def test_scale_invariance_of_normalized_disparity(self):
        rng = np.random.default_rng(10)
        values = rng.uniform(1.0, 3.0, (6, 6))
        depth = DepthMap(values, np.ones((6, 6), dtype=bool))
        scaled = DepthMap(values * 7.3, np.ones((6, 6), dtype=bool))
        img = rng.random((6, 6, 3))
        assert smoothness_reg(img, depth) == pytest.approx(
            smoothness_reg(img, scaled), rel=1e-12
        )


def plane_depth(depth_value, valid=True):
    values = np.full((CAM.height, CAM.width), float(depth_value))
    mask = np.full((CAM.height, CAM.width), valid, dtype=bool)
    return DepthMap(values, mask)


class TestGeometricConsistency:
    def test_consistent_plane_is_exact(self):
        t = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.5]))
        value, grid = geometric_consistency(plane_depth(2.0), plane_depth(1.5), t, CAM)
        assert value < 1e-6
        assert grid.max() < 1e-6

    def test_identity_same_depth_is_zero(self):
        t = PoseSE3(np.eye(3), np.zeros(3))
        value, _ = geometric_consistency(plane_depth(2.0), plane_depth(2.0), t, CAM)
        assert value == 0.0

    def test_three_to_one_ratio_is_half(self):
        t = PoseSE3(np.eye(3), np.zeros(3))
        value, grid = geometric_consistency(plane_depth(2.0), plane_depth(6.0), t, CAM)
        assert value == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(grid, 0.5, atol=1e-6)

    def test_global_scale_invariance(self):
        rng = np.random.default_rng(11)
        values_a = rng.uniform(1.5, 2.5, (CAM.height, CAM.width))
        values_b = rng.uniform(1.5, 2.5, (CAM.height, CAM.width))
        ones = np.ones_like(values_a, dtype=bool)
        t = PoseSE3(rotation_from_axis_angle(np.array([0.01, -0.02, 0.005])),
                    np.array([0.05, 0.0, 0.1]))
        v1, _ = geometric_consistency(DepthMap(values_a, ones), DepthMap(values_b, ones), t, CAM)
        s = 3.7
        t_scaled = PoseSE3(t.rotation, t.translation * s)
        v2, _ = geometric_consistency(
            DepthMap(values_a * s, ones), DepthMap(values_b * s, ones), t_scaled, CAM
        )
        assert v2 == pytest.approx(v1, abs=1e-6)

    def test_no_overlap_rejected(self):
        t = PoseSE3(np.eye(3), np.array([100.0, 0.0, 0.0]))
        with pytest.raises(DegenerateMaskError):
            geometric_consistency(plane_depth(2.0), plane_depth(2.0), t, CAM)


class TestTotalObjective:
    def test_static_identical_pair_leaves_only_smoothness(self):
        rng = np.random.default_rng(12)
        img = rng.random((CAM.height, CAM.width, 3))
        depth = plane_depth(2.0)
        depth.values[:] = rng.uniform(1.8, 2.2, depth.values.shape)
        t = PoseSE3(np.eye(3), np.zeros(3))
        out = total_objective(img, img, depth, depth, t, CAM)
        # The projection round trip is exact to float noise, not bitwise.
        assert out.photometric_ab < 1e-12
        assert out.photometric_ba < 1e-12
        assert out.geometric == 0.0
        want = 0.1 * (out.smooth_a + out.smooth_b)
        assert out.total == pytest.approx(want, abs=1e-12)
        assert out.valid_pixel_count == 2 * CAM.width * CAM.height

    def test_zero_weights_zero_total(self):
        rng = np.random.default_rng(13)
        img_a = rng.random((CAM.height, CAM.width, 3))
        img_b = rng.random((CAM.height, CAM.width, 3))
        t = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.1]))
        weights = LossWeights(photometric=0.0, smoothness=0.0, geometric=0.0)
        out = total_objective(img_a, img_b, plane_depth(2.0), plane_depth(1.9), t, CAM, weights)
        assert out.total == 0.0

    def test_breakdown_total_is_weighted_sum(self):
        rng = np.random.default_rng(14)
        img_a = rng.random((CAM.height, CAM.width, 3))
        img_b = rng.random((CAM.height, CAM.width, 3))
        t = PoseSE3(rotation_from_axis_angle(np.array([0.0, 0.01, 0.0])),
                    np.array([0.02, 0.0, 0.05]))
        w = LossWeights(photometric=1.3, smoothness=0.07, geometric=0.4)
        out = total_objective(img_a, img_b, plane_depth(2.0), plane_depth(2.02), t, CAM, w)
        want = (1.3 * (out.photometric_ab + out.photometric_ba)
                + 0.07 * (out.smooth_a + out.smooth_b)
                + 0.4 * out.geometric)
        assert out.total == pytest.approx(want, rel=1e-12)
        assert all(
            getattr(out, f) >= 0
            for f in ("photometric_ab", "photometric_ba", "smooth_a", "smooth_b", "geometric")
        )

    def test_swap_symmetry(self):
        rng = np.random.default_rng(15)
        img_a = rng.random((CAM.height, CAM.width, 3))
        img_b = rng.random((CAM.height, CAM.width, 3))
        da = DepthMap(rng.uniform(1.8, 2.2, (CAM.height, CAM.width)),
                      np.ones((CAM.height, CAM.width), dtype=bool))
        db = DepthMap(rng.uniform(1.8, 2.2, (CAM.height, CAM.width)),
                      np.ones((CAM.height, CAM.width), dtype=bool))
        t = PoseSE3(rotation_from_axis_angle(np.array([0.005, 0.01, 0.0])),
                    np.array([0.03, -0.01, 0.04]))
        fwd = total_objective(img_a, img_b, da, db, t, CAM)
        rev = total_objective(img_b, img_a, db, da, se3_inverse(t), CAM)
        assert fwd.photometric_ab == pytest.approx(rev.photometric_ba, abs=1e-12)
        assert fwd.smooth_a == rev.smooth_b
        assert fwd.geometric == pytest.approx(rev.geometric, abs=1e-12)
        assert fwd.total == pytest.approx(rev.total, abs=1e-12)

    def test_ground_truth_is_local_minimum_on_rendered_pair(self):
        from benthomap.synth import (
            SceneSpec,
            TrajectorySpec,
            default_intrinsics,
            generate_scene,
            generate_trajectory,
            render_frame,
        )

        scene = generate_scene(SceneSpec(), seed=3)
        cam = default_intrinsics()
        traj = generate_trajectory(TrajectorySpec(frame_count=2), scene, seed=4)
        img_a, depth_a, _ = render_frame(scene, traj[0], cam)
        img_b, depth_b, _ = render_frame(scene, traj[1], cam)
        t_ab = se3_compose(se3_inverse(traj[0]), traj[1])

        base = total_objective(img_a, img_b, depth_a, depth_b, t_ab, cam).total
        rng = np.random.default_rng(16)
        for _ in range(20):
            da = DepthMap(depth_a.values * (1 + rng.uniform(-0.03, 0.03, depth_a.values.shape)),
                          depth_a.valid)
            db = DepthMap(depth_b.values * (1 + rng.uniform(-0.03, 0.03, depth_b.values.shape)),
                          depth_b.valid)
            t = PoseSE3(
                t_ab.rotation @ rotation_from_axis_angle(rng.normal(scale=0.01, size=3)),
                t_ab.translation + rng.normal(scale=0.01, size=3),
            )
            perturbed = total_objective(img_a, img_b, da, db, t, cam).total
            assert perturbed > base

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_non_finite_term_raises_named_error(self):
        img = np.full((CAM.height, CAM.width, 3), 0.5)
        bad = img.copy()
        bad[5, 5, 0] = np.inf
        t = PoseSE3(np.eye(3), np.zeros(3))
        with pytest.raises(NumericError, match="photometric"):
            total_objective(bad, img, plane_depth(2.0), plane_depth(2.0), t, CAM)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(photometric=-1.0).validate()
        with pytest.raises(ValueError):
            LossWeights(alpha=1.5).validate()
