"""Incremental TSDF fusion of depth, color, and class labels.

The volume is sparse: 8x8x8-voxel blocks allocated on first touch, addressed
by integer block coordinates in a hash map. Each voxel carries a truncated
signed distance, an integration weight, weight-averaged color and depth
variance, and a class-vote histogram. Updates follow the standard projective
rule sdf <- (w*sdf + min(truncation, d_pixel - d_voxel)) / (w + 1) applied
along each kept pixel ray inside the truncation band, with the weight capped
so long sequences can still adapt to drift.

All operations are deterministic: updates are applied in row-major pixel
order per voxel, and extraction orders points by axis then voxel key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import ceil_fraction
from .geometry import MIN_DEPTH, CameraIntrinsics, DepthMap, PoseSE3, camera_rays, se3_inverse
from .semantics import UNLABELED_ID

DEFAULT_VOXEL_SIZE = 0.02
WEIGHT_CAP = 64.0
BLOCK = 8

# Voxel coordinates are packed into one int64 key: 21 bits per axis with a
# half-range offset so negative indices pack cleanly.
_AXIS_BITS = 21
_AXIS_OFFSET = 1 << 20
_KEY_DX = np.int64(1) << np.int64(2 * _AXIS_BITS)
_KEY_DY = np.int64(1) << np.int64(_AXIS_BITS)
_KEY_DZ = np.int64(1)


class FusionError(ValueError):
    """Invalid fusion input or volume state."""


def _pack(ix, iy, iz):
    sx = ix.astype(np.int64) + _AXIS_OFFSET
    sy = iy.astype(np.int64) + _AXIS_OFFSET
    sz = iz.astype(np.int64) + _AXIS_OFFSET
    if ((sx | sy | sz) < 0).any() or ((sx | sy | sz) >> _AXIS_BITS).any():
        raise FusionError("voxel coordinates out of addressable range")
    return (sx << (2 * _AXIS_BITS)) | (sy << _AXIS_BITS) | sz


def _unpack(keys):
    mask = np.int64((1 << _AXIS_BITS) - 1)
    sx = (keys >> (2 * _AXIS_BITS)) & mask
    sy = (keys >> _AXIS_BITS) & mask
    sz = keys & mask
    return sx - _AXIS_OFFSET, sy - _AXIS_OFFSET, sz - _AXIS_OFFSET


@dataclass
class SemanticPointCloud:
    """Point set with color, class id, and a scalar uncertainty per point."""

    positions: np.ndarray
    colors: np.ndarray
    class_ids: np.ndarray
    uncertainties: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.class_ids = np.asarray(self.class_ids, dtype=np.uint8).reshape(n)
        self.uncertainties = np.asarray(self.uncertainties,
                                        dtype=np.float64).reshape(n)
        if n and not np.isfinite(self.positions).all():
            raise FusionError("point positions must be finite")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def take(self, selection) -> "SemanticPointCloud":
        return SemanticPointCloud(
            self.positions[selection],
            self.colors[selection],
            self.class_ids[selection],
            self.uncertainties[selection],
        )

    @staticmethod
    def empty() -> "SemanticPointCloud":
        return SemanticPointCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                                  np.zeros(0, dtype=np.uint8), np.zeros(0))


class TsdfVolume:
    """Sparse block-hashed truncated signed distance volume."""

    def __init__(self, voxel_size: float = DEFAULT_VOXEL_SIZE,
                 truncation: float = None, class_count: int = 20):
        if voxel_size <= 0:
            raise FusionError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation) if truncation is not None else 4.0 * voxel_size
        if self.truncation <= 0:
            raise FusionError("truncation must be positive")
        self.class_count = int(class_count)
        if self.class_count < 1:
            raise FusionError("class_count must be positive")
        self.blocks = {}  # packed block key -> pool slot
        self.rejected_pixel_count = 0
        self._capacity = 0
        self._sdf = None
        self._weight = None
        self._rgb = None
        self._var = None
        self._hist = None

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def voxel_count(self) -> int:
        """Number of voxels that have received at least one update."""
        if not self.blocks:
            return 0
        n = len(self.blocks)
        return int((self._weight[:n] > 0).sum())

    def _grow(self, needed: int):
        if needed <= self._capacity:
            return
        cap = max(64, self._capacity)
        while cap < needed:
            cap *= 2
        cells = BLOCK ** 3

        def grown(old, shape, dtype):
            fresh = np.zeros(shape, dtype=dtype)
            if old is not None:
                fresh[: old.shape[0]] = old
            return fresh

        self._sdf = grown(self._sdf, (cap, cells), np.float64)
        self._weight = grown(self._weight, (cap, cells), np.float64)
        self._rgb = grown(self._rgb, (cap, cells, 3), np.float64)
        self._var = grown(self._var, (cap, cells), np.float64)
        self._hist = grown(self._hist, (cap, cells, self.class_count), np.uint16)
        self._capacity = cap

    def _slots_for(self, block_keys: np.ndarray) -> np.ndarray:
        """Pool slot per packed block key, allocating new blocks as needed."""
        slots = np.empty(len(block_keys), dtype=np.int64)
        fresh = [k for k in block_keys.tolist() if k not in self.blocks]
        if fresh:
            self._grow(len(self.blocks) + len(fresh))
            for key in fresh:
                self.blocks.setdefault(key, len(self.blocks))
        for i, key in enumerate(block_keys.tolist()):
            slots[i] = self.blocks[key]
        return slots

    def voxel_arrays(self):
        """Flat copies of key, sdf, weight, mean color, mean variance, votes."""
        n = len(self.blocks)
        if n == 0:
            empty = np.zeros(0)
            return (np.zeros(0, dtype=np.int64), empty, empty,
                    np.zeros((0, 3)), empty,
                    np.zeros((0, self.class_count), dtype=np.uint16))
        block_keys = np.fromiter(self.blocks.keys(), dtype=np.int64, count=n)
        order = np.argsort(np.fromiter(self.blocks.values(), dtype=np.int64,
                                       count=n))
        block_keys = block_keys[order]
        # Block keys pack block coordinates in the same 21-bit layout.
        mask = np.int64((1 << _AXIS_BITS) - 1)
        bx = ((block_keys >> (2 * _AXIS_BITS)) & mask)
        by = ((block_keys >> _AXIS_BITS) & mask)
        bz = (block_keys & mask)
        local = np.arange(BLOCK ** 3, dtype=np.int64)
        lx, ly, lz = local >> 6, (local >> 3) & 7, local & 7
        sx = (bx[:, None] * BLOCK + lx[None, :]).ravel()
        sy = (by[:, None] * BLOCK + ly[None, :]).ravel()
        sz = (bz[:, None] * BLOCK + lz[None, :]).ravel()
        keys = (sx << (2 * _AXIS_BITS)) | (sy << _AXIS_BITS) | sz
        return (keys, self._sdf[:n].ravel().copy(),
                self._weight[:n].ravel().copy(),
                self._rgb[:n].reshape(-1, 3).copy(),
                self._var[:n].ravel().copy(),
                self._hist[:n].reshape(-1, self.class_count).copy())


def _voxel_block_keys(voxel_keys: np.ndarray) -> np.ndarray:
    """Packed block key for each packed voxel key."""
    mask = np.int64((1 << _AXIS_BITS) - 1)
    sx = (voxel_keys >> (2 * _AXIS_BITS)) & mask
    sy = (voxel_keys >> _AXIS_BITS) & mask
    sz = voxel_keys & mask
    return ((sx >> 3) << (2 * _AXIS_BITS)) | ((sy >> 3) << _AXIS_BITS) | (sz >> 3)


def _pool_indices(vol: TsdfVolume, voxel_keys: np.ndarray) -> np.ndarray:
    """Flat index into the volume pools for each packed voxel key."""
    block_keys = _voxel_block_keys(voxel_keys)
    unique_blocks, inverse = np.unique(block_keys, return_inverse=True)
    slots = vol._slots_for(unique_blocks)
    mask = np.int64((1 << _AXIS_BITS) - 1)
    sx = (voxel_keys >> (2 * _AXIS_BITS)) & mask
    sy = (voxel_keys >> _AXIS_BITS) & mask
    sz = voxel_keys & mask
    within = ((sx & 7) << 6) | ((sy & 7) << 3) | (sz & 7)
    return slots[inverse] * (BLOCK ** 3) + within


def integrate_frame(vol: TsdfVolume, frame: np.ndarray, depth: DepthMap,
                    keep_mask: np.ndarray, labels, pose_world: PoseSE3,
                    cam: CameraIntrinsics, variance: np.ndarray = None) -> TsdfVolume:
    """Fuse one frame into the volume along each kept pixel ray.

    Every voxel within the truncation band of a kept pixel's surface point
    receives the projective update; voxels more than one truncation behind
    the surface are left alone. Kept pixels whose depth is missing or
    non-finite are rejected and counted on the volume. ``labels`` may be None
    (no votes cast); ``variance`` optionally carries per-pixel depth variance
    to be averaged into the voxels the same way color is.
    """
    h, w = cam.height, cam.width
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (h, w, 3):
        raise FusionError(f"frame must be ({h}, {w}, 3)")
    if depth.shape != (h, w):
        raise FusionError("depth resolution must match the intrinsics")
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (h, w):
        raise FusionError("keep_mask resolution must match the intrinsics")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (h, w):
            raise FusionError("labels resolution must match the intrinsics")
    if variance is not None:
        variance = np.asarray(variance, dtype=np.float64)
        if variance.shape != (h, w):
            raise FusionError("variance resolution must match the intrinsics")

    finite = np.isfinite(depth.values)
    usable = keep_mask & depth.valid & finite
    vol.rejected_pixel_count += int((keep_mask & ~usable).sum())
    if not usable.any():
        return vol

    rays = camera_rays(cam)[usable]
    d = depth.values[usable]
    pixel_ids = np.nonzero(usable.ravel())[0]

    # Sample the ray through the truncation band at half-voxel spacing; the
    # per-(pixel, voxel) duplicates this creates are removed below.
    step = vol.voxel_size * 0.5
    offsets = np.arange(-vol.truncation, vol.truncation + 0.5 * step, step)
    zs = d[:, None] + offsets[None, :]
    ok = zs > MIN_DEPTH
    points_cam = rays[:, None, :] * zs[..., None]
    points_world = pose_world.apply(points_cam[ok])
    sample_px = np.broadcast_to(pixel_ids[:, None], zs.shape)[ok]

    idx = np.floor(points_world / vol.voxel_size)
    keys = _pack(idx[:, 0], idx[:, 1], idx[:, 2])

    order = np.lexsort((sample_px, keys))
    keys = keys[order]
    sample_px = sample_px[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = (keys[1:] != keys[:-1]) | (sample_px[1:] != sample_px[:-1])
    keys = keys[first]
    sample_px = sample_px[first]

    # Signed distance of each update: pixel depth minus the camera-frame z of
    # the voxel center, capped at +truncation, discarded below -truncation.
    vx, vy, vz = _unpack(keys)
    centers = (np.stack([vx, vy, vz], axis=1) + 0.5) * vol.voxel_size
    world_to_cam = se3_inverse(pose_world)
    z_center = centers @ world_to_cam.rotation[2] + world_to_cam.translation[2]
    depth_flat = depth.values.ravel()
    sdf_update = depth_flat[sample_px] - z_center
    in_band = sdf_update >= -vol.truncation
    keys = keys[in_band]
    sample_px = sample_px[in_band]
    sdf_update = np.minimum(sdf_update[in_band], vol.truncation)
    if len(keys) == 0:
        return vol

    color_flat = frame.reshape(-1, 3)
    label_flat = labels.ravel() if labels is not None else None
    var_flat = variance.ravel() if variance is not None else None

    pool_idx = _pool_indices(vol, keys)
    sdf_pool = vol._sdf.reshape(-1)
    weight_pool = vol._weight.reshape(-1)
    rgb_pool = vol._rgb.reshape(-1, 3)
    var_pool = vol._var.reshape(-1)
    hist_pool = vol._hist.reshape(-1, vol.class_count)

    # Updates are already grouped by voxel and ordered by pixel; apply them
    # round-robin (r-th update of every voxel at once) so multi-hit voxels
    # chain their running means exactly as a per-pixel sequential pass would.
    boundaries = np.ones(len(keys), dtype=bool)
    boundaries[1:] = keys[1:] != keys[:-1]
    starts = np.nonzero(boundaries)[0]
    counts = np.diff(np.append(starts, len(keys)))
    max_hits = int(counts.max())
    for hit in range(max_hits):
        active = counts > hit
        rows = starts[active] + hit
        targets = pool_idx[rows]
        px = sample_px[rows]
        w_now = weight_pool[targets]
        denom = w_now + 1.0
        sdf_pool[targets] = (w_now * sdf_pool[targets] + sdf_update[rows]) / denom
        rgb_pool[targets] = (w_now[:, None] * rgb_pool[targets]
                             + color_flat[px]) / denom[:, None]
        if var_flat is not None:
            var_pool[targets] = (w_now * var_pool[targets] + var_flat[px]) / denom
        else:
            var_pool[targets] = (w_now * var_pool[targets]) / denom
        weight_pool[targets] = np.minimum(denom, WEIGHT_CAP)
        if label_flat is not None:
            votes = label_flat[px]
            cast = votes < vol.class_count
            hist_pool[targets[cast], votes[cast].astype(np.int64)] += 1
    return vol


def extract_point_cloud(vol: TsdfVolume, min_weight: float = 1.0) -> SemanticPointCloud:
    """Surface points at signed-distance zero-crossings of voxel-grid edges.

    An edge between a voxel and its +x/+y/+z neighbor yields a point when
    both endpoints carry at least ``min_weight`` and the signed distances
    change sign; the position is linearly interpolated, color and uncertainty
    follow the interpolation, and the class is the argmax of the summed
    endpoint vote histograms with ties resolved toward the lower id. An empty
    volume yields an empty cloud.
    """
    if min_weight <= 0:
        raise FusionError("min_weight must be positive; zero would admit "
                          "never-observed voxels")
    keys, sdf, weight, rgb, var, hist = vol.voxel_arrays()
    eligible = weight >= min_weight
    if not eligible.any():
        return SemanticPointCloud.empty()
    keys = keys[eligible]
    sdf = sdf[eligible]
    rgb = rgb[eligible]
    var = var[eligible]
    hist = hist[eligible]

    order = np.argsort(keys)
    keys = keys[order]
    sdf = sdf[order]
    rgb = rgb[order]
    var = var[order]
    hist = hist[order]

    vx, vy, vz = _unpack(keys)
    centers = (np.stack([vx, vy, vz], axis=1) + 0.5) * vol.voxel_size

    points, colors, classes, uncertainties = [], [], [], []
    axis_steps = ((_KEY_DX, np.array([1.0, 0.0, 0.0])),
                  (_KEY_DY, np.array([0.0, 1.0, 0.0])),
                  (_KEY_DZ, np.array([0.0, 0.0, 1.0])))
    negative = sdf < 0.0
    for key_step, direction in axis_steps:
        neighbor = keys + key_step
        pos = np.searchsorted(keys, neighbor)
        pos = np.clip(pos, 0, len(keys) - 1)
        found = keys[pos] == neighbor
        crossing = found & (negative != negative[pos])
        if not crossing.any():
            continue
        a = np.nonzero(crossing)[0]
        b = pos[a]
        t = sdf[a] / (sdf[a] - sdf[b])
        points.append(centers[a] + t[:, None] * direction[None, :] * vol.voxel_size)
        colors.append((1.0 - t)[:, None] * rgb[a] + t[:, None] * rgb[b])
        uncertainties.append((1.0 - t) * var[a] + t * var[b])
        votes = hist[a].astype(np.int64) + hist[b].astype(np.int64)
        classes.append(np.argmax(votes, axis=1).astype(np.uint8))

    if not points:
        return SemanticPointCloud.empty()
    return SemanticPointCloud(
        np.concatenate(points, axis=0),
        np.concatenate(colors, axis=0),
        np.concatenate(classes, axis=0),
        np.concatenate(uncertainties, axis=0),
    )


def point_uncertainty_filter(cloud: SemanticPointCloud,
                             fraction: float = 0.20) -> SemanticPointCloud:
    """Drop the highest-uncertainty points, exactly ceil(fraction * N) of them.

    Ties resolve by point index: among equal uncertainties the higher index
    is removed first, mirroring the pixel-level filter.
    """
    if not 0.0 <= fraction < 1.0:
        raise FusionError("fraction must be in [0, 1)")
    n = len(cloud)
    n_remove = ceil_fraction(fraction, n)
    keep = np.ones(n, dtype=bool)
    if n_remove:
        indices = np.arange(n)
        order = np.lexsort((-indices, -cloud.uncertainties))
        keep[order[:n_remove]] = False
    return cloud.take(keep)


def splat_point_cloud(frame: np.ndarray, depth: DepthMap, keep_mask: np.ndarray,
                      labels, pose_world: PoseSE3, cam: CameraIntrinsics,
                      variance: np.ndarray = None) -> SemanticPointCloud:
    """Debug-mode cloud: one raw point per kept valid pixel, no fusion."""
    h, w = cam.height, cam.width
    frame = np.asarray(frame, dtype=np.float64)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    usable = keep_mask & depth.valid & np.isfinite(depth.values)
    rays = camera_rays(cam)[usable]
    positions = pose_world.apply(rays * depth.values[usable][:, None])
    colors = frame[usable]
    if labels is None:
        class_ids = np.full(len(positions), UNLABELED_ID, dtype=np.uint8)
    else:
        class_ids = np.asarray(labels)[usable].astype(np.uint8)
    if variance is None:
        uncertainties = np.zeros(len(positions))
    else:
        uncertainties = np.asarray(variance, dtype=np.float64)[usable]
    return SemanticPointCloud(positions, colors, class_ids, uncertainties)
