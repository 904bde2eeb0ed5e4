"""Tests for depth/pose estimation backends, fitting, and uncertainty."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from benthomap.estimation import (
    EstimatorParameters,
    FitConfig,
    GroundTruthEstimator,
    OptimizationError,
    SelfSupervisedEstimator,
    UncertaintyMap,
    ValueMap,
    WINDOW_SPAN,
    WindowError,
    WindowEstimate,
    anchored_consistency_samples,
    anchored_depth_samples,
    backend_relative_pose,
    candidate_pairs,
    depth_uncertainty,
    estimate,
    fit_self_supervised,
    initial_parameters,
    pair_consistency_map,
    pixel_uncertainty_filter,
    sliding_window_starts,
)
from benthomap.geometry import DepthMap, PoseSE3, se3_compose, se3_inverse
from benthomap.objective import LossWeights, total_objective
from benthomap.synth import (
    SceneSpec,
    TrajectorySpec,
    default_intrinsics,
    generate_scene,
    generate_trajectory,
    render_frame,
    value_noise,
)
from benthomap.verify import _smooth_noise

CAM_SMALL = default_intrinsics(32, 24)


def smooth_frames(count, seed=0, height=24, width=32):
    rng = np.random.default_rng(seed)
    return [_smooth_noise(rng, height, width) for _ in range(count)]


def quick_config(**overrides):
    base = dict(grid_shape=(3, 4), steps=15, learning_rate=2e-3, eval_every=5)
    base.update(overrides)
    return FitConfig(**base)


# ---------------------------------------------------------------------------
# Shared fitted scenarios (expensive, built once).


@pytest.fixture(scope="session")
def sweep_fit():
    """A conditioned survey sweep and its fitted parameters.

    Steep pitch puts the camera translation perpendicular to the view axis,
    which couples image flow to depth and identifies the pose direction.
    """
    cam = default_intrinsics(76, 44)
    scene = generate_scene(
        SceneSpec(relief_amplitude=0.35, detail_amplitude=0.12), seed=7
    )
    traj = generate_trajectory(
        TrajectorySpec(frame_count=16, pitch_deg=-40.0, speed=0.12, altitude=1.8,
                       position_jitter=0.01),
        scene, seed=7,
    )
    frames, depths = [], []
    for pose in traj:
        image, depth, _ = render_frame(scene, pose, cam)
        frames.append(image)
        depths.append(depth)
    config = FitConfig(steps=1400, learning_rate=3e-3, eval_every=50, seed=0)
    params = fit_self_supervised(frames, cam, config)
    return {"cam": cam, "frames": frames, "depths": depths, "traj": traj,
            "params": params}


@pytest.fixture(scope="session")
def planar_fit():
    """Textured constant-depth plane seen by a laterally translating camera."""
    cam = default_intrinsics(76, 44)
    plane_depth = 2.8
    step = 1.5 * plane_depth / cam.fx  # about 1.5 px of image shift per frame
    n = 12
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    frames = []
    for k in range(n):
        x = (u - cam.cx) * plane_depth / cam.fx + k * step
        y = (v - cam.cy) * plane_depth / cam.fy
        channels = [value_noise(x, y, cell=0.6, seed=s, octaves=3)
                    for s in (101, 102, 103)]
        frames.append(np.clip(np.stack(channels, axis=-1) * 0.8 + 0.1, 0.0, 1.0))
    config = FitConfig(steps=900, learning_rate=3e-3, eval_every=50, seed=0)
    params = fit_self_supervised(frames, cam, config)
    return {"cam": cam, "frames": frames, "params": params,
            "plane_depth": plane_depth, "step": step}


# ---------------------------------------------------------------------------
# Domain types.


class TestTypes:
    def test_parameters_shape_validation(self):
        with pytest.raises(ValueError):
            EstimatorParameters(np.zeros((3, 4)), np.zeros((2, 6)), (24, 32))
        with pytest.raises(ValueError):
            EstimatorParameters(np.zeros((3, 2, 4)), np.zeros((3, 6)), (24, 32))

    def test_decoded_depth_positive_for_extreme_raws(self):
        grids = np.array([[[-40.0, 0.0, 35.0], [-5.0, 12.0, -0.3]]])
        params = EstimatorParameters(grids, np.zeros((0, 6)), (10, 12))
        depth = params.depth(0)
        assert (depth.values > 0).all()
        assert depth.valid.all()

    def test_parameters_pose_accessor(self):
        poses = np.zeros((2, 6))
        poses[0, 3:] = [0.1, -0.2, 0.3]
        params = EstimatorParameters(np.zeros((3, 2, 3)), poses, (8, 8))
        pose = params.pose(0)
        assert np.allclose(pose.rotation, np.eye(3))
        assert np.allclose(pose.translation, [0.1, -0.2, 0.3])

    def test_window_estimate_validation(self):
        d = DepthMap(np.full((4, 4), 2.0), np.ones((4, 4), bool))
        span = tuple(range(7))
        WindowEstimate([d] * 7, [PoseSE3.identity()] * 6, span)
        with pytest.raises(WindowError):
            WindowEstimate([d] * 6, [PoseSE3.identity()] * 5, span)
        with pytest.raises(WindowError):
            WindowEstimate([d] * 7, [PoseSE3.identity()] * 7, span)
        with pytest.raises(WindowError):
            WindowEstimate([d] * 7, [PoseSE3.identity()] * 6, (0, 1, 2, 3, 4, 5, 7))

    def test_uncertainty_map_validation(self):
        with pytest.raises(ValueError):
            UncertaintyMap(-np.ones((3, 3)), np.full((3, 3), 4))
        with pytest.raises(ValueError):
            UncertaintyMap(np.ones((3, 3)), np.full((2, 3), 4))
        u = UncertaintyMap(np.ones((2, 2)), np.array([[0, 1], [2, 5]]))
        assert u.defined.tolist() == [[False, False], [True, True]]

    def test_value_map_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ValueMap(np.zeros(5), np.ones(5, bool))
        m = ValueMap(np.zeros((2, 3)), np.ones((2, 3), bool))
        assert m.shape == (2, 3)

    def test_fit_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(grid_shape=(1, 5)).validate()
        with pytest.raises(ValueError):
            FitConfig(steps=-1).validate()
        with pytest.raises(ValueError):
            FitConfig(learning_rate=0.0).validate()
        with pytest.raises(ValueError):
            FitConfig(threads=0).validate()
        FitConfig().validate()

    def test_initial_parameters_decode_to_two_units(self):
        params = initial_parameters(4, (3, 4), (24, 32))
        depth = params.depth(2)
        assert np.allclose(depth.values, 2.0)
        assert np.array_equal(params.pair_poses, np.zeros((3, 6)))


class TestCandidatePairs:
    def test_adjacent_plus_stride_two(self):
        pairs = candidate_pairs(7)
        assert pairs == [(i, i + 1) for i in range(6)] + [(i, i + 2) for i in range(5)]

    def test_minimal_counts(self):
        assert len(candidate_pairs(2)) == 1
        assert len(candidate_pairs(3)) == 3


# ---------------------------------------------------------------------------
# Fitting mechanics.


class TestFitMechanics:
    def test_zero_iterations_returns_initialization_unchanged(self):
        frames = smooth_frames(7)
        params = fit_self_supervised(frames, CAM_SMALL, quick_config(steps=0))
        init = initial_parameters(7, (3, 4), (24, 32))
        assert np.array_equal(params.depth_grids, init.depth_grids)
        assert np.array_equal(params.pair_poses, init.pair_poses)

    def test_same_seed_bit_identical(self):
        frames = smooth_frames(8, seed=3)
        a = fit_self_supervised(frames, CAM_SMALL, quick_config(seed=11))
        b = fit_self_supervised(frames, CAM_SMALL, quick_config(seed=11))
        assert np.array_equal(a.depth_grids, b.depth_grids)
        assert np.array_equal(a.pair_poses, b.pair_poses)
        assert a.loss_trace == b.loss_trace

    def test_different_seeds_differ(self):
        frames = smooth_frames(8, seed=3)
        a = fit_self_supervised(frames, CAM_SMALL, quick_config(seed=1))
        b = fit_self_supervised(frames, CAM_SMALL, quick_config(seed=2))
        assert not np.array_equal(a.depth_grids, b.depth_grids)

    def test_loss_trace_monotone_non_increasing(self):
        frames = smooth_frames(9, seed=5)
        params = fit_self_supervised(frames, CAM_SMALL,
                                     quick_config(steps=40, eval_every=4))
        trace = params.loss_trace
        assert len(trace) >= 2
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_thread_count_does_not_change_results(self):
        frames = smooth_frames(8, seed=9)
        a = fit_self_supervised(frames, CAM_SMALL, quick_config(threads=1))
        b = fit_self_supervised(frames, CAM_SMALL, quick_config(threads=3))
        assert np.array_equal(a.depth_grids, b.depth_grids)
        assert np.array_equal(a.pair_poses, b.pair_poses)

    def test_short_sequence_rejected(self):
        with pytest.raises(WindowError):
            fit_self_supervised(smooth_frames(6), CAM_SMALL, quick_config())

    def test_wrong_frame_shape_rejected(self):
        frames = smooth_frames(7)
        frames[3] = frames[3][:-2]
        with pytest.raises(ValueError):
            fit_self_supervised(frames, CAM_SMALL, quick_config())

    def test_good_initialization_never_worsened(self):
        frames = smooth_frames(8, seed=7)
        init = initial_parameters(8, (3, 4), (24, 32))
        rng = np.random.default_rng(0)
        init.depth_grids += 0.1 * rng.standard_normal(init.depth_grids.shape)
        init.pair_poses += 0.002 * rng.standard_normal(init.pair_poses.shape)
        params = fit_self_supervised(frames, CAM_SMALL,
                                     quick_config(steps=30, eval_every=3),
                                     init=init)
        assert params.loss_trace[-1] <= params.loss_trace[0]

    def test_mismatched_initialization_rejected(self):
        frames = smooth_frames(8)
        init = initial_parameters(7, (3, 4), (24, 32))
        with pytest.raises(ValueError):
            fit_self_supervised(frames, CAM_SMALL, quick_config(), init=init)

    def test_divergence_raises_with_step_index(self):
        frames = smooth_frames(7, seed=1)
        config = quick_config(steps=40, learning_rate=1e5, eval_every=10)
        with pytest.raises(OptimizationError) as excinfo:
            fit_self_supervised(frames, CAM_SMALL, config)
        assert isinstance(excinfo.value.step, int)
        assert 0 <= excinfo.value.step < 40


# ---------------------------------------------------------------------------
# Window estimation API.


def tiny_rendered_window(frame_count=7):
    cam = default_intrinsics(48, 28)
    scene = generate_scene(SceneSpec(), seed=2)
    traj = generate_trajectory(TrajectorySpec(frame_count=frame_count), scene, seed=2)
    frames, depths = [], []
    for pose in traj:
        image, depth, _ = render_frame(scene, pose, cam)
        frames.append(image)
        depths.append(depth)
    return cam, frames, depths, traj


class TestEstimateWindow:
    def test_ground_truth_backend_is_exact_passthrough(self):
        cam, frames, depths, traj = tiny_rendered_window()
        backend = GroundTruthEstimator(depths=depths, world_poses=traj).fit()
        window = estimate(frames, backend, start=0)
        assert window.window_span == tuple(range(7))
        for got, ref in zip(window.depths, depths):
            assert np.array_equal(got.values, ref.values)
            assert np.array_equal(got.valid, ref.valid)
        for i, pose in enumerate(window.pair_poses):
            ref = se3_compose(se3_inverse(traj[i]), traj[i + 1])
            assert np.allclose(pose.rotation, ref.rotation)
            assert np.allclose(pose.translation, ref.translation)

    def test_window_length_must_be_exact(self):
        cam, frames, depths, traj = tiny_rendered_window()
        backend = GroundTruthEstimator(depths=depths, world_poses=traj).fit()
        with pytest.raises(WindowError):
            estimate(frames[:5], backend)
        with pytest.raises(WindowError):
            estimate(frames + frames[:1], backend)

    def test_mixed_resolution_window_rejected(self):
        cam, frames, depths, traj = tiny_rendered_window()
        backend = GroundTruthEstimator(depths=depths, world_poses=traj).fit()
        frames[2] = frames[2][:-2]
        with pytest.raises(WindowError):
            estimate(frames, backend)

    def test_start_out_of_bounds_rejected(self):
        cam, frames, depths, traj = tiny_rendered_window()
        backend = GroundTruthEstimator(depths=depths, world_poses=traj).fit()
        with pytest.raises(WindowError):
            estimate(frames, backend, start=1)
        with pytest.raises(WindowError):
            estimate(frames, backend, start=-1)

    def test_unfitted_backends_raise(self):
        frames = smooth_frames(7)
        with pytest.raises(NotFittedError):
            estimate(frames, SelfSupervisedEstimator())
        with pytest.raises(NotFittedError):
            estimate(frames, GroundTruthEstimator())

    def test_sliding_window_starts(self):
        assert list(sliding_window_starts(7)) == [0]
        assert list(sliding_window_starts(13)) == list(range(7))
        with pytest.raises(WindowError):
            sliding_window_starts(6)

    def test_fitted_backend_window_contents(self):
        frames = smooth_frames(9, seed=4)
        backend = SelfSupervisedEstimator(grid_shape=(3, 4), steps=10,
                                          learning_rate=2e-3, eval_every=5)
        backend.fit(frames, CAM_SMALL)
        window = estimate(frames[1:8], backend, start=1)
        assert window.window_span == tuple(range(1, 8))
        assert len(window.depths) == WINDOW_SPAN
        assert len(window.pair_poses) == WINDOW_SPAN - 1
        for depth in window.depths:
            assert (depth.values > 0).all()

    def test_static_window_poses_stay_near_identity(self):
        rng = np.random.default_rng(2)
        frame = _smooth_noise(rng, 32, 48)
        frames = [frame.copy() for _ in range(7)]
        cam = default_intrinsics(48, 32)
        backend = SelfSupervisedEstimator(grid_shape=(5, 7), steps=150,
                                          learning_rate=3e-3, eval_every=25)
        backend.fit(frames, cam)
        window = estimate(frames, backend)
        depth_scale = 2.0
        for pose in window.pair_poses:
            assert np.linalg.norm(pose.translation) < 0.01 * depth_scale

    def test_sweep_translation_directions_match_truth(self, sweep_fit):
        params = sweep_fit["params"]
        traj = sweep_fit["traj"]
        for i in range(params.frame_count - 1):
            ref = se3_compose(se3_inverse(traj[i]), traj[i + 1]).translation
            got = params.pair_poses[i, 3:]
            cosine = got @ ref / (np.linalg.norm(got) * np.linalg.norm(ref))
            angle = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
            assert angle < 15.0, f"pair {i}: {angle:.1f} degrees off"

    def test_planar_scene_fit_recovers_flat_consistent_depth(self, planar_fit):
        cam = planar_fit["cam"]
        frames = planar_fit["frames"]
        params = planar_fit["params"]
        geometric_only = LossWeights(photometric=0.0, smoothness=0.0, geometric=1.0)
        residuals = []
        for i in range(params.frame_count - 1):
            breakdown = total_objective(frames[i], frames[i + 1], params.depth(i),
                                        params.depth(i + 1), params.pose(i), cam,
                                        geometric_only)
            residuals.append(breakdown.geometric)
        assert float(np.mean(residuals)) < 0.02
        for i in range(2, params.frame_count - 2):
            values = params.depth(i).values
            spread = (values.max() - values.min()) / values.mean()
            assert spread < 0.05, f"frame {i}: relative spread {spread:.3f}"


class TestBackendProtocol:
    def test_get_params_and_clone(self):
        backend = SelfSupervisedEstimator(steps=7, learning_rate=5e-3, seed=42)
        params = backend.get_params()
        assert params["steps"] == 7
        assert params["learning_rate"] == 5e-3
        copied = clone(backend)
        assert copied.get_params() == params

    def test_set_params_round_trip(self):
        backend = SelfSupervisedEstimator()
        backend.set_params(steps=3, batch_pairs=2)
        assert backend.steps == 3
        assert backend.batch_pairs == 2

    def test_fitted_attributes_exist(self):
        frames = smooth_frames(7, seed=6)
        backend = SelfSupervisedEstimator(grid_shape=(3, 4), steps=5,
                                          learning_rate=1e-3, eval_every=5)
        backend.fit(frames, CAM_SMALL)
        assert backend.parameters_.frame_count == 7
        assert backend.camera_ is CAM_SMALL
        assert backend.loss_trace_ == backend.parameters_.loss_trace

    def test_ground_truth_backend_requires_oracle_data(self):
        with pytest.raises(ValueError):
            GroundTruthEstimator().fit()
        d = DepthMap(np.full((4, 4), 2.0), np.ones((4, 4), bool))
        with pytest.raises(ValueError):
            GroundTruthEstimator(depths=[d], world_poses=[]).fit()


# ---------------------------------------------------------------------------
# Uncertainty.


class ConstantBackend:
    """Minimal backend stub: constant depth, identity poses."""

    def __init__(self, depth=2.0, shape=(24, 32), count=13):
        self.maps = [DepthMap(np.full(shape, depth), np.ones(shape, bool))
                     for _ in range(count)]

    def frame_depth(self, index):
        return self.maps[index]

    def pair_pose(self, index):
        return PoseSE3.identity()


class TestUncertainty:
    def test_identical_estimates_give_exact_zero_variance(self):
        d = DepthMap(np.full((6, 8), 3.7), np.ones((6, 8), bool))
        maps = [DepthMap(d.values.copy(), d.valid.copy()) for _ in range(7)]
        u = depth_uncertainty(maps)
        assert u.variance.max() == 0.0
        assert (u.sample_count == 7).all()

    def test_unit_gap_pair_gives_exact_half(self):
        base = np.full((5, 5), 2.0)
        a = DepthMap(base, np.ones((5, 5), bool))
        b = DepthMap(base + 1.0, np.ones((5, 5), bool))
        u = depth_uncertainty([a, b])
        assert (u.variance == 0.5).all()
        assert u.defined.all()

    def test_matches_unbiased_variance_on_random_stacks(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(1.0, 5.0, size=(6, 4, 4))
        maps = [DepthMap(v, np.ones((4, 4), bool)) for v in values]
        u = depth_uncertainty(maps)
        assert np.allclose(u.variance, values.var(axis=0, ddof=1), atol=1e-12)

    def test_single_estimate_is_undefined_not_an_error(self):
        d = DepthMap(np.full((4, 4), 2.0), np.ones((4, 4), bool))
        u = depth_uncertainty([d])
        assert not u.defined.any()
        assert (u.variance == 0.0).all()
        assert (u.sample_count == 1).all()

    def test_invalid_pixels_do_not_contribute_samples(self):
        values = np.full((3, 3), 2.0)
        full = DepthMap(values, np.ones((3, 3), bool))
        hole = np.ones((3, 3), bool)
        hole[1, 1] = False
        partial = DepthMap(values + 1.0, hole)
        u = depth_uncertainty([full, partial, full])
        assert u.sample_count[1, 1] == 2
        assert u.sample_count[0, 0] == 3

    def test_center_frame_of_thirteen_gets_seven_samples(self):
        backend = ConstantBackend(count=13)
        cam = default_intrinsics(32, 24)
        samples = anchored_depth_samples(backend, cam, 6, 13)
        assert len(samples) == 7
        u = depth_uncertainty(samples)
        assert (u.sample_count == 7).all()
        assert u.variance.max() == 0.0

    def test_edge_frames_get_fewer_windows(self):
        backend = ConstantBackend(count=13)
        cam = default_intrinsics(32, 24)
        assert len(anchored_depth_samples(backend, cam, 0, 13)) == 1
        assert len(anchored_depth_samples(backend, cam, 3, 13)) == 4
        assert len(anchored_depth_samples(backend, cam, 12, 13)) == 1

    def test_relative_pose_chaining(self):
        cam, frames, depths, traj = tiny_rendered_window()
        backend = GroundTruthEstimator(depths=depths, world_poses=traj).fit()
        direct = se3_compose(se3_inverse(traj[1]), traj[4])
        chained = backend_relative_pose(backend, 1, 4)
        assert np.allclose(chained.rotation, direct.rotation, atol=1e-12)
        assert np.allclose(chained.translation, direct.translation, atol=1e-12)
        back = backend_relative_pose(backend, 4, 1)
        inverse = se3_inverse(direct)
        assert np.allclose(back.rotation, inverse.rotation, atol=1e-12)
        assert np.allclose(back.translation, inverse.translation, atol=1e-12)

    def test_consistency_maps_zero_for_perfect_backend(self):
        backend = ConstantBackend(count=13)
        cam = default_intrinsics(32, 24)
        samples = anchored_consistency_samples(backend, cam, 6, 13)
        assert len(samples) == 7
        u = depth_uncertainty(samples)
        assert u.variance.max() == 0.0

    def test_consistency_map_values(self):
        a = DepthMap(np.full((4, 4), 2.0), np.ones((4, 4), bool))
        b = DepthMap(np.full((4, 4), 3.0), np.ones((4, 4), bool))
        m = pair_consistency_map(a, b)
        assert np.allclose(m.values, 1.0 / 5.0, atol=1e-6)
        hole = np.ones((4, 4), bool)
        hole[0, 0] = False
        c = DepthMap(np.full((4, 4), 3.0), hole)
        m2 = pair_consistency_map(a, c)
        assert not m2.valid[0, 0]
        assert m2.values[0, 0] == 0.0


# ---------------------------------------------------------------------------
# Pixel filter.


def full_depth(shape=(10, 10)):
    return DepthMap(np.full(shape, 2.0), np.ones(shape, bool))


class TestPixelFilter:
    def test_fraction_zero_keeps_everything(self):
        depth = full_depth()
        u = UncertaintyMap(np.random.default_rng(0).uniform(size=(10, 10)),
                           np.full((10, 10), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.0)
        assert keep.all()

    def test_order_statistic_on_distinct_variances(self):
        depth = full_depth()
        variance = np.arange(1.0, 101.0).reshape(10, 10)
        u = UncertaintyMap(variance, np.full((10, 10), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.35)
        removed = ~keep
        assert removed.sum() == 35
        assert variance[removed].min() == 66.0
        assert variance[keep].max() == 65.0

    def test_uniform_variance_falls_back_to_index_tie_break(self):
        depth = full_depth()
        u = UncertaintyMap(np.ones((10, 10)), np.full((10, 10), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.35)
        removed_idx = np.nonzero(~keep.ravel())[0]
        assert len(removed_idx) == 35
        assert removed_idx.min() == 65  # the 35 highest row-major indices go
        assert keep.ravel()[:65].all()

    def test_removal_count_is_ceiling(self):
        depth = full_depth((2, 5))
        u = UncertaintyMap(np.arange(10.0).reshape(2, 5), np.full((2, 5), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.35)
        assert (~keep).sum() == 4  # ceil(3.5)

    def test_exact_integer_products_do_not_over_remove(self):
        depth = full_depth((4, 5))
        u = UncertaintyMap(np.arange(20.0).reshape(4, 5), np.full((4, 5), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.2)
        assert (~keep).sum() == 4  # 0.2 * 20 is exactly 4 despite float drift

    def test_invalid_pixels_not_candidates_and_stay_masked(self):
        values = np.full((4, 4), 2.0)
        valid = np.ones((4, 4), bool)
        valid[0] = False
        depth = DepthMap(values, valid)
        u = UncertaintyMap(np.arange(16.0).reshape(4, 4), np.full((4, 4), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.25)
        assert not keep[0].any()
        assert (~keep[1:]).sum() == 3  # ceil(0.25 * 12)

    def test_undefined_pixels_removed_first(self):
        depth = full_depth((3, 3))
        counts = np.full((3, 3), 5)
        counts[2, 2] = 1  # undefined, treated as most uncertain
        u = UncertaintyMap(np.arange(9.0).reshape(3, 3), counts)
        keep = pixel_uncertainty_filter(depth, u, 0.2)
        assert not keep[2, 2]
        assert (~keep).sum() == 2  # ceil(1.8): the undefined one plus variance 7

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        depth = full_depth((6, 6))
        variance = rng.permutation(36).astype(np.float64).reshape(6, 6)
        u = UncertaintyMap(variance, np.full((6, 6), 5))
        keep = pixel_uncertainty_filter(depth, u, 0.3)
        perm = rng.permutation(36)
        shuffled = np.empty(36)
        shuffled[perm] = variance.ravel()
        u2 = UncertaintyMap(shuffled.reshape(6, 6), np.full((6, 6), 5))
        keep2 = pixel_uncertainty_filter(depth, u2, 0.3)
        assert np.array_equal(keep2.ravel()[perm], keep.ravel())

    def test_fraction_bounds_enforced(self):
        depth = full_depth((3, 3))
        u = UncertaintyMap(np.ones((3, 3)), np.full((3, 3), 5))
        with pytest.raises(ValueError):
            pixel_uncertainty_filter(depth, u, 1.0)
        with pytest.raises(ValueError):
            pixel_uncertainty_filter(depth, u, -0.1)

    def test_shape_mismatch_rejected(self):
        depth = full_depth((3, 3))
        u = UncertaintyMap(np.ones((4, 4)), np.full((4, 4), 5))
        with pytest.raises(ValueError):
            pixel_uncertainty_filter(depth, u, 0.2)
