"""Depth and pose estimation backends for frame sequences.

Two interchangeable backends produce per-frame depth maps and per-pair
relative poses over sliding 7-frame windows: a ground-truth backend that
passes through renderer output, and a self-supervised backend that optimizes
coarse inverse-depth grids plus pair poses directly against the photometric
objective. The module also carries the sliding-window uncertainty scheme:
variance across overlapping per-window depth estimates of the same frame,
and the filter that drops the most uncertain pixels.

Backends follow the scikit-learn estimator protocol (constructor parameters
mirrored as attributes, ``fit`` returning self, fitted state in trailing
underscore attributes, ``NotFittedError`` before fit).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    PoseSE3,
    rotation_from_axis_angle,
    se3_compose,
    se3_inverse,
    warp_depth,
)
from .gradients import (
    RAW_FOR_UNIT_HALF,
    PairContext,
    compose_pullback,
    decoded_depth_map,
    pair_loss_and_grad,
    rotation_gradient_to_axis_angle,
)
from .objective import DegenerateMaskError, EPS, LossWeights, NumericError

WINDOW_SPAN = 7


class WindowError(ValueError):
    """A frame window does not satisfy the 7-frame contract."""


class OptimizationError(RuntimeError):
    """The fit diverged; ``step`` records the offending optimizer step."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class FitConfig:
    """Hyperparameters of the self-supervised fit."""

    grid_shape: tuple = (11, 19)
    steps: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_pairs: int = 5
    seed: int = 0
    eval_every: int = 25
    eval_pair_cap: int = 12
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        hc, wc = self.grid_shape
        if hc < 2 or wc < 2:
            raise ValueError("grid_shape must be at least 2x2")
        if self.steps < 0 or self.batch_pairs < 1:
            raise ValueError("steps must be >= 0 and batch_pairs >= 1")
        if self.learning_rate <= 0 or self.eval_every < 1 or self.eval_pair_cap < 1:
            raise ValueError("learning_rate, eval_every, eval_pair_cap must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.weights.validate()


@dataclass
class EstimatorParameters:
    """Flat parameterization: one coarse grid per frame, one 6-vector per pair.

    Decoded depth is 1/softplus of the bilinearly upsampled grid, hence
    strictly positive for every finite parameter value.
    """

    depth_grids: np.ndarray
    pair_poses: np.ndarray
    image_shape: tuple
    loss_trace: list = None

    def __post_init__(self):
        self.depth_grids = np.asarray(self.depth_grids, dtype=np.float64)
        self.pair_poses = np.asarray(self.pair_poses, dtype=np.float64)
        if self.depth_grids.ndim != 3:
            raise ValueError("depth_grids must be (frames, Hc, Wc)")
        n = self.depth_grids.shape[0]
        if self.pair_poses.shape != (max(n - 1, 0), 6):
            raise ValueError("pair_poses must be (frames - 1, 6)")

    @property
    def frame_count(self) -> int:
        return self.depth_grids.shape[0]

    def depth(self, index: int) -> DepthMap:
        return decoded_depth_map(self.depth_grids[index], self.image_shape)

    def pose(self, index: int) -> PoseSE3:
        """Transform carrying frame index+1 coordinates into frame index."""
        params = self.pair_poses[index]
        return PoseSE3(rotation_from_axis_angle(params[:3]), params[3:].copy())


def initial_parameters(frame_count, grid_shape, image_shape) -> EstimatorParameters:
    """Flat start: every depth decodes to 2.0 scene units, poses at identity."""
    hc, wc = grid_shape
    return EstimatorParameters(
        np.full((frame_count, hc, wc), RAW_FOR_UNIT_HALF),
        np.zeros((max(frame_count - 1, 0), 6)),
        tuple(image_shape),
    )


@dataclass
class WindowEstimate:
    """Estimates for one 7-frame window: depths plus adjacent-pair poses."""

    depths: list
    pair_poses: list
    window_span: tuple

    def __post_init__(self):
        self.window_span = tuple(int(i) for i in self.window_span)
        if len(self.window_span) != WINDOW_SPAN:
            raise WindowError(f"window span must cover {WINDOW_SPAN} frames")
        if any(b - a != 1 for a, b in zip(self.window_span, self.window_span[1:])):
            raise WindowError("window frames must be consecutive")
        if len(self.depths) != len(self.window_span):
            raise WindowError("one depth map per window frame required")
        if len(self.pair_poses) != len(self.window_span) - 1:
            raise WindowError("one pose per adjacent frame pair required")


@dataclass
class ValueMap:
    """Per-pixel scalar field with a validity mask.

    Unlike DepthMap this puts no positivity constraint on the values, so it
    can carry consistency ratios and other derived quantities.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.valid.shape != self.values.shape:
            raise ValueError("values and validity must be matching 2-d arrays")

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class UncertaintyMap:
    """Per-pixel variance across overlapping depth estimates.

    ``sample_count`` records how many valid estimates covered each pixel;
    pixels with fewer than two are undefined (variance reported as 0 there,
    the ``defined`` mask is authoritative).
    """

    variance: np.ndarray
    sample_count: np.ndarray

    def __post_init__(self):
        self.variance = np.asarray(self.variance, dtype=np.float64)
        self.sample_count = np.asarray(self.sample_count, dtype=np.int64)
        if self.variance.shape != self.sample_count.shape:
            raise ValueError("variance and sample_count shapes differ")
        if (self.variance < 0).any():
            raise ValueError("variance must be non-negative")

    @property
    def defined(self) -> np.ndarray:
        return self.sample_count >= 2


def _as_frame_list(frames, cam: CameraIntrinsics):
    out = [np.asarray(f, dtype=np.float64) for f in frames]
    shape = (cam.height, cam.width, 3)
    for index, frame in enumerate(out):
        if frame.shape != shape:
            raise ValueError(f"frame {index} has shape {frame.shape}, wanted {shape}")
    return out


def candidate_pairs(frame_count: int):
    """Training pairs: every adjacent pair plus every stride-2 pair."""
    adjacent = [(i, i + 1) for i in range(frame_count - 1)]
    skip = [(i, i + 2) for i in range(frame_count - 2)]
    return adjacent + skip


def _pose_arrays(pose_params):
    omega = pose_params[:3]
    return rotation_from_axis_angle(omega), omega, pose_params[3:]


def fit_self_supervised(frames, cam: CameraIntrinsics, config: FitConfig = None,
                        init: EstimatorParameters = None):
    """Optimize depth grids and pair poses against the pair objective.

    Adam on the empirical mean over sampled pairs; the returned parameters
    are the best seen on a fixed evaluation pair set, so the recorded loss
    trace is monotone non-increasing and a good initialization (``init``,
    for example from an oracle) can only be kept, never worsened.
    Deterministic for a fixed seed, with any thread count: pair evaluations
    within a step may run concurrently but are reduced in sampling order.
    """
    config = config or FitConfig()
    config.validate()
    frames = _as_frame_list(frames, cam)
    n = len(frames)
    if n < WINDOW_SPAN:
        raise WindowError(f"fit needs at least {WINDOW_SPAN} frames, got {n}")

    image_shape = (cam.height, cam.width)
    if init is None:
        params = initial_parameters(n, config.grid_shape, image_shape)
    else:
        if init.frame_count != n or init.depth_grids.shape[1:] != tuple(config.grid_shape):
            raise ValueError("init does not match the sequence length or grid shape")
        params = EstimatorParameters(init.depth_grids.copy(),
                                     init.pair_poses.copy(), image_shape)
    grids = params.depth_grids
    poses = params.pair_poses

    pairs = candidate_pairs(n)
    contexts = {
        (i, j): PairContext(frames[i], frames[j], cam,
                            grid_shape=config.grid_shape, weights=config.weights)
        for i, j in pairs
    }
    picks = np.unique(
        np.round(np.linspace(0, n - 2, min(config.eval_pair_cap, n - 1))).astype(int)
    )
    eval_pairs = [(int(i), int(i) + 1) for i in picks]

    def pair_loss_grad(k):
        i, j = pairs[k]
        if j == i + 1:
            r, _, tr = _pose_arrays(poses[i])
            return (i, j, None) + pair_loss_and_grad(
                grids[i], grids[j], r, tr, contexts[(i, j)]
            )
        r1, _, t1 = _pose_arrays(poses[i])
        r2, _, t2 = _pose_arrays(poses[i + 1])
        r = r1 @ r2
        tr = r1 @ t2 + t1
        return (i, j, (r1, t1, r2, t2)) + pair_loss_and_grad(
            grids[i], grids[j], r, tr, contexts[(i, j)]
        )

    def eval_loss(grids, poses):
        total = 0.0
        for i, j in eval_pairs:
            r, _, tr = _pose_arrays(poses[i])
            breakdown, *_ = pair_loss_and_grad(grids[i], grids[j], r, tr,
                                               contexts[(i, j)])
            total += breakdown.total
        return total / len(eval_pairs)

    rng = np.random.default_rng(config.seed)
    m_g = np.zeros_like(grids)
    v_g = np.zeros_like(grids)
    m_p = np.zeros_like(poses)
    v_p = np.zeros_like(poses)

    best_loss = eval_loss(grids, poses)
    best = (grids.copy(), poses.copy())
    trace = [best_loss]

    pool = (ThreadPoolExecutor(max_workers=config.threads)
            if config.threads > 1 else None)
    try:
        for step in range(config.steps):
            replace = len(pairs) < config.batch_pairs
            batch = rng.choice(len(pairs), size=config.batch_pairs, replace=replace)
            g_grids = np.zeros_like(grids)
            g_poses = np.zeros_like(poses)
            share = 1.0 / config.batch_pairs
            try:
                if pool is None:
                    results = map(pair_loss_grad, batch)
                else:
                    results = pool.map(pair_loss_grad, batch)
                for i, j, chain, _, ga, gb, g_r, g_t in results:
                    g_grids[i] += share * ga
                    g_grids[j] += share * gb
                    if chain is None:
                        g_poses[i, :3] += share * rotation_gradient_to_axis_angle(
                            poses[i, :3], g_r
                        )
                        g_poses[i, 3:] += share * g_t
                    else:
                        r1, t1, r2, t2 = chain
                        g_r1, g_t1, g_r2, g_t2 = compose_pullback(
                            r1, t1, r2, t2, g_r, g_t
                        )
                        g_poses[i, :3] += share * rotation_gradient_to_axis_angle(
                            poses[i, :3], g_r1
                        )
                        g_poses[i, 3:] += share * g_t1
                        g_poses[i + 1, :3] += share * rotation_gradient_to_axis_angle(
                            poses[i + 1, :3], g_r2
                        )
                        g_poses[i + 1, 3:] += share * g_t2
            except (NumericError, DegenerateMaskError) as exc:
                raise OptimizationError(f"diverged at step {step}: {exc}",
                                        step=step) from exc

            t_adam = step + 1
            for param, grad, m, v in ((grids, g_grids, m_g, v_g),
                                      (poses, g_poses, m_p, v_p)):
                m *= config.beta1
                m += (1.0 - config.beta1) * grad
                v *= config.beta2
                v += (1.0 - config.beta2) * grad * grad
                m_hat = m / (1.0 - config.beta1 ** t_adam)
                v_hat = v / (1.0 - config.beta2 ** t_adam)
                param -= config.learning_rate * m_hat / (np.sqrt(v_hat)
                                                         + config.adam_eps)

            if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
                try:
                    loss = eval_loss(grids, poses)
                except (NumericError, DegenerateMaskError) as exc:
                    raise OptimizationError(f"diverged at step {step}: {exc}",
                                            step=step) from exc
                if not np.isfinite(loss):
                    raise OptimizationError(
                        f"non-finite evaluation loss at step {step}", step=step
                    )
                if loss < best_loss:
                    best_loss = loss
                    best = (grids.copy(), poses.copy())
                trace.append(best_loss)
    finally:
        if pool is not None:
            pool.shutdown()

    return EstimatorParameters(best[0], best[1], image_shape, loss_trace=trace)


# ---------------------------------------------------------------------------
# Backends.


class GroundTruthEstimator(BaseEstimator):
    """Oracle backend: passes through renderer depths and trajectory poses."""

    def __init__(self, depths=None, world_poses=None):
        self.depths = depths
        self.world_poses = world_poses

    def fit(self, frames=None, cam=None):
        if self.depths is None or self.world_poses is None:
            raise ValueError("ground-truth backend needs depths and world_poses")
        if len(self.depths) != len(self.world_poses):
            raise ValueError("one world pose per depth map required")
        self.frame_count_ = len(self.depths)
        return self

    def _check(self):
        if not hasattr(self, "frame_count_"):
            raise NotFittedError("GroundTruthEstimator is not fitted; call fit()")

    def frame_depth(self, index: int) -> DepthMap:
        self._check()
        return self.depths[index]

    def pair_pose(self, index: int) -> PoseSE3:
        self._check()
        return se3_compose(se3_inverse(self.world_poses[index]),
                           self.world_poses[index + 1])

    def window_estimate(self, start: int, frames=None) -> WindowEstimate:
        self._check()
        span = _window_span(start, self.frame_count_)
        return WindowEstimate(
            depths=[self.frame_depth(i) for i in span],
            pair_poses=[self.pair_pose(i) for i in span[:-1]],
            window_span=span,
        )


class SelfSupervisedEstimator(BaseEstimator):
    """Direct-optimization backend over the photometric pair objective."""

    def __init__(self, grid_shape=(11, 19), steps=2000, learning_rate=1e-4,
                 beta1=0.9, beta2=0.999, adam_eps=1e-8, batch_pairs=5, seed=0,
                 eval_every=25, eval_pair_cap=12, threads=1, weights=None):
        self.grid_shape = grid_shape
        self.steps = steps
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.batch_pairs = batch_pairs
        self.seed = seed
        self.eval_every = eval_every
        self.eval_pair_cap = eval_pair_cap
        self.threads = threads
        self.weights = weights

    def _config(self) -> FitConfig:
        return FitConfig(
            grid_shape=tuple(self.grid_shape),
            steps=self.steps,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            batch_pairs=self.batch_pairs,
            seed=self.seed,
            eval_every=self.eval_every,
            eval_pair_cap=self.eval_pair_cap,
            threads=self.threads,
            weights=self.weights if self.weights is not None else LossWeights(),
        )

    def fit(self, frames, cam: CameraIntrinsics):
        self.parameters_ = fit_self_supervised(frames, cam, self._config())
        self.camera_ = cam
        self.loss_trace_ = list(self.parameters_.loss_trace)
        self.frame_count_ = self.parameters_.frame_count
        return self

    def _check(self):
        if not hasattr(self, "parameters_"):
            raise NotFittedError("SelfSupervisedEstimator is not fitted; call fit()")

    def frame_depth(self, index: int) -> DepthMap:
        self._check()
        return self.parameters_.depth(index)

    def pair_pose(self, index: int) -> PoseSE3:
        self._check()
        return self.parameters_.pose(index)

    def window_estimate(self, start: int, frames=None) -> WindowEstimate:
        self._check()
        span = _window_span(start, self.frame_count_)
        return WindowEstimate(
            depths=[self.frame_depth(i) for i in span],
            pair_poses=[self.pair_pose(i) for i in span[:-1]],
            window_span=span,
        )


def _window_span(start: int, frame_count: int) -> tuple:
    if start < 0 or start + WINDOW_SPAN > frame_count:
        raise WindowError(
            f"window [{start}, {start + WINDOW_SPAN}) outside sequence of "
            f"{frame_count} frames"
        )
    return tuple(range(start, start + WINDOW_SPAN))


def estimate(frames, backend, start: int = 0) -> WindowEstimate:
    """Depths and pair poses for one 7-frame window.

    ``frames`` is the window itself; ``start`` locates it in the sequence the
    backend was fitted on.
    """
    frames = list(frames)
    if len(frames) != WINDOW_SPAN:
        raise WindowError(f"expected a {WINDOW_SPAN}-frame window, got {len(frames)}")
    shapes = {np.asarray(f).shape for f in frames}
    if len(shapes) != 1:
        raise WindowError("window frames must share one resolution")
    return backend.window_estimate(start, frames)


def sliding_window_starts(frame_count: int) -> range:
    if frame_count < WINDOW_SPAN:
        raise WindowError(f"need at least {WINDOW_SPAN} frames, got {frame_count}")
    return range(frame_count - WINDOW_SPAN + 1)


def backend_relative_pose(backend, source: int, target: int) -> PoseSE3:
    """Transform carrying ``target``-frame coordinates into ``source``'s frame."""
    if source == target:
        return PoseSE3.identity()
    if source < target:
        pose = backend.pair_pose(source)
        for k in range(source + 1, target):
            pose = se3_compose(pose, backend.pair_pose(k))
        return pose
    return se3_inverse(backend_relative_pose(backend, target, source))


def anchored_depth_samples(backend, cam: CameraIntrinsics, frame: int,
                           frame_count: int):
    """One depth estimate of ``frame`` per sliding window that covers it.

    Each window is represented by its center (anchor) frame: the anchor's
    depth map is carried into ``frame`` through the chained pair poses, and
    the frame's own map stands in when it is the anchor. Disagreement across
    windows is what the uncertainty map measures.
    """
    anchor_offset = WINDOW_SPAN // 2
    samples = []
    for start in sliding_window_starts(frame_count):
        if not start <= frame < start + WINDOW_SPAN:
            continue
        anchor = start + anchor_offset
        if anchor == frame:
            samples.append(backend.frame_depth(frame))
        else:
            to_frame = backend_relative_pose(backend, anchor, frame)
            samples.append(warp_depth(backend.frame_depth(anchor), to_frame, cam))
    return samples


def pair_consistency_map(warped: DepthMap, observed: DepthMap) -> ValueMap:
    """Scale-normalized per-pixel disagreement between two depth fields.

    |a - b| / (a + b + eps), defined where both inputs are valid; this is the
    integrand of the geometric consistency term, kept as a map.
    """
    if warped.shape != observed.shape:
        raise ValueError("depth shapes differ")
    valid = warped.valid & observed.valid
    num = np.abs(warped.values - observed.values)
    den = warped.values + observed.values + EPS
    return ValueMap(np.where(valid, num / den, 0.0), valid)


def anchored_consistency_samples(backend, cam: CameraIntrinsics, frame: int,
                                 frame_count: int):
    """Secondary uncertainty channel: one consistency map per covering window.

    Each window's anchored re-decoding of ``frame`` is compared against the
    frame's own depth; the window anchored at the frame itself contributes an
    all-zero map (its estimate is the frame's own).
    """
    own = backend.frame_depth(frame)
    anchor_offset = WINDOW_SPAN // 2
    samples = []
    for start in sliding_window_starts(frame_count):
        if not start <= frame < start + WINDOW_SPAN:
            continue
        anchor = start + anchor_offset
        if anchor == frame:
            samples.append(ValueMap(np.zeros(own.shape), own.valid.copy()))
        else:
            to_frame = backend_relative_pose(backend, anchor, frame)
            warped = warp_depth(backend.frame_depth(anchor), to_frame, cam)
            samples.append(pair_consistency_map(warped, own))
    return samples


# ---------------------------------------------------------------------------
# Uncertainty.


def depth_uncertainty(estimates) -> UncertaintyMap:
    """Unbiased per-pixel variance across depth estimates of one frame.

    Works for any per-pixel samples with values and a validity mask, so the
    consistency maps of the secondary channel aggregate the same way. A
    single estimate yields a map flagged undefined everywhere, not an error.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("at least one depth estimate required")
    shape = estimates[0].shape
    if any(e.shape != shape for e in estimates):
        raise ValueError("depth estimates must share one shape")
    values = np.stack([e.values for e in estimates])
    valid = np.stack([e.valid for e in estimates])
    count = valid.sum(axis=0)

    # Shift by the first valid sample per pixel so identical estimates give an
    # exact zero instead of accumulated rounding.
    first = np.argmax(valid, axis=0)
    reference = np.take_along_axis(values, first[None], axis=0)[0]
    shifted = np.where(valid, values - reference, 0.0)
    safe_count = np.maximum(count, 1)
    mean = shifted.sum(axis=0) / safe_count
    squared = (np.where(valid, shifted - mean, 0.0) ** 2).sum(axis=0)
    variance = np.where(count >= 2, squared / np.maximum(count - 1, 1), 0.0)
    return UncertaintyMap(variance, count)


def ceil_fraction(fraction: float, count: int) -> int:
    """ceil(fraction * count) with protection against float drift.

    0.35 * 100 lands a hair above 35.0 in binary, so a raw ceiling would
    remove one pixel too many; values within rounding distance of an integer
    snap to it first.
    """
    exact = fraction * count
    nearest = round(exact)
    if abs(exact - nearest) < 1e-9 * max(1.0, count):
        return int(nearest)
    return int(math.ceil(exact))


def pixel_uncertainty_filter(depth: DepthMap, uncertainty: UncertaintyMap,
                             fraction: float = 0.35) -> np.ndarray:
    """Keep-mask that drops the most uncertain valid pixels.

    Exactly ceil(fraction * valid-pixel-count) pixels are removed, highest
    variance first; undefined pixels (fewer than two samples) count as most
    uncertain; ties resolve by keeping the lower row-major index.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    if uncertainty.variance.shape != depth.shape:
        raise ValueError("uncertainty and depth shapes differ")
    keep = depth.valid.copy()
    n_valid = int(keep.sum())
    n_remove = ceil_fraction(fraction, n_valid)
    if n_remove == 0:
        return keep
    flat_valid = np.nonzero(keep.ravel())[0]
    score = np.where(uncertainty.defined, uncertainty.variance, np.inf)
    score = score.ravel()[flat_valid]
    order = np.lexsort((-flat_valid, -score))
    removed = flat_valid[order[:n_remove]]
    keep.ravel()[removed] = False
    return keep
