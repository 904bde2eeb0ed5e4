"""Camera geometry for differentiable reprojection.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (optical axis). Pixel (0, 0) is the
  top-left corner of the image; continuous pixel coordinates (u, v) index
  columns and rows.
* Images (``Frame``) are float arrays of shape (H, W, 3) with values in [0, 1].
* ``PoseSE3`` acts on points as p -> R p + t. For a frame pair (a, b) the pair
  transform T_ab maps coordinates expressed in frame b into frame a, i.e. it is
  the pose of camera b in camera a's frame. Chaining along a trajectory is
  therefore ``se3_compose(T_ab, T_bc) == T_ac`` and world poses are
  camera-to-world maps.
* Depths below ``MIN_DEPTH`` are treated as invalid rather than clamped, and
  samples falling outside the image domain are invalid rather than clamped.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Depth values at or below this are considered degenerate and masked out.
MIN_DEPTH = 1e-6

# Sample coordinates within this distance of the image boundary are snapped
# onto it instead of being declared out of bounds. Exact round trips (identity
# warps) land at -1e-15-ish for border pixels; genuine out-of-view samples are
# orders of magnitude further out.
BOUNDARY_EPS = 1e-9

# A Frame is a plain (H, W, 3) float array in [0, 1]; a type alias keeps call
# signatures readable without wrapping every image in a class.
Frame = np.ndarray


class GeometryError(ValueError):
    """Raised for malformed geometric inputs (shapes, invalid intrinsics)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a fixed image resolution.

    Attributes:
        fx, fy: focal lengths in pixels (must be positive).
        cx, cy: principal point in pixels.
        width, height: image resolution the intrinsics refer to.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.fx) and np.isfinite(self.fy)):
            raise GeometryError("focal lengths must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise GeometryError("image resolution must be at least 2x2")

    def matrix(self) -> np.ndarray:
        """3x3 intrinsic matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, new_width: int, new_height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a different raster resolution."""
        sx = new_width / self.width
        sy = new_height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=new_width,
            height=new_height,
        )


@dataclass
class DepthMap:
    """Per-pixel depth with an explicit validity mask.

    ``values`` is (H, W) float; entries where ``valid`` is False carry no
    meaning and must not be read.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > MIN_DEPTH)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.valid.shape != self.values.shape:
            raise GeometryError("depth values and validity must be matching 2-d arrays")
        # Non-finite or non-positive depths are never valid regardless of mask.
        self.valid = self.valid & np.isfinite(self.values) & (self.values > MIN_DEPTH)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @staticmethod
    def full(values: np.ndarray) -> "DepthMap":
        """Depth map valid wherever the values are finite and positive."""
        values = np.asarray(values, dtype=np.float64)
        return DepthMap(values, np.isfinite(values) & (values > MIN_DEPTH))


@dataclass
class PoseSE3:
    """Rigid transform acting on points as p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise GeometryError("pose needs a 3x3 rotation and length-3 translation")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError("homogeneous pose must be 4x4")
        return PoseSE3(m[:3, :3].copy(), m[:3, 3].copy())


def orthonormalize_rotation(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto the nearest proper rotation (Frobenius)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def se3_inverse(pose: PoseSE3) -> PoseSE3:
    """Inverse transform: (R, t)^-1 = (R^T, -R^T t)."""
    rt = pose.rotation.T
    return PoseSE3(rt.copy(), -rt @ pose.translation)


def se3_compose(first: PoseSE3, second: PoseSE3) -> PoseSE3:
    """Composition ``first`` after ``second``: result(p) = first(second(p)).

    The composed rotation is re-orthonormalized so long chains cannot drift
    away from the group.
    """
    r = orthonormalize_rotation(first.rotation @ second.rotation)
    t = first.rotation @ second.translation + first.translation
    return PoseSE3(r, t)


def rotation_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (3,):
        raise GeometryError("axis-angle vector must have shape (3,)")
    theta2 = float(omega @ omega)
    k = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta2 < 1e-16:
        # Second-order Taylor expansion, exact to machine precision here.
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def axis_angle_from_rotation(r: np.ndarray) -> np.ndarray:
    """Logarithm map, inverse of :func:`rotation_from_axis_angle`."""
    r = orthonormalize_rotation(r)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal difference vanishes; recover the axis from
        # the symmetric part instead.
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        # Fix signs using the largest component.
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = m[:, i] / axis[i]
            axis = axis / np.linalg.norm(axis)
        return axis * theta
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis * (theta / (2.0 * np.sin(theta)))


@lru_cache(maxsize=32)
def _cached_rays(cam: CameraIntrinsics) -> np.ndarray:
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    rays = np.empty((cam.height, cam.width, 3))
    rays[..., 0] = (uu - cam.cx) / cam.fx
    rays[..., 1] = (vv - cam.cy) / cam.fy
    rays[..., 2] = 1.0
    return rays


def camera_rays(cam: CameraIntrinsics) -> np.ndarray:
    """Unit-depth ray directions K^-1 [u, v, 1] for every pixel, (H, W, 3).

    The returned array is cached and read-only semantics apply: callers must
    not mutate it.
    """
    return _cached_rays(cam)


def backproject(uv: np.ndarray, depth: np.ndarray, cam: CameraIntrinsics):
    """Lift pixels to camera-frame 3D points.

    Args:
        uv: (..., 2) continuous pixel coordinates.
        depth: (...) depths along the optical axis.
        cam: intrinsics.

    Returns:
        (points, valid): (..., 3) points with p_z = depth, and a boolean mask
        that is False where the depth is non-finite or <= MIN_DEPTH. Points at
        invalid entries are zero-filled.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if uv.shape[-1] != 2 or uv.shape[:-1] != depth.shape:
        raise GeometryError("uv must be (..., 2) with depth matching its batch shape")
    valid = np.isfinite(depth) & (depth > MIN_DEPTH)
    d = np.where(valid, depth, 0.0)
    points = np.empty(depth.shape + (3,))
    points[..., 0] = (uv[..., 0] - cam.cx) / cam.fx * d
    points[..., 1] = (uv[..., 1] - cam.cy) / cam.fy * d
    points[..., 2] = d
    return points, valid


def project(points: np.ndarray, cam: CameraIntrinsics):
    """Project camera-frame points to continuous pixel coordinates.

    Returns:
        (uv, in_front): (..., 2) pixel coordinates and a mask that is False
        where the point sits at or behind the camera (z <= MIN_DEPTH). The uv
        values at masked entries are zero-filled, never clamped into view.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise GeometryError("points must have shape (..., 3)")
    z = points[..., 2]
    in_front = np.isfinite(z) & (z > MIN_DEPTH)
    z_safe = np.where(in_front, z, 1.0)
    uv = np.empty(points.shape[:-1] + (2,))
    uv[..., 0] = np.where(in_front, cam.fx * points[..., 0] / z_safe + cam.cx, 0.0)
    uv[..., 1] = np.where(in_front, cam.fy * points[..., 1] / z_safe + cam.cy, 0.0)
    return uv, in_front


def _corner_indices(uv: np.ndarray, height: int, width: int):
    """Clamped corner indices and fractional weights for bilinear lookups."""
    u = uv[..., 0]
    v = uv[..., 1]
    x0 = np.clip(np.floor(u), 0, width - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, height - 2).astype(np.int64)
    fu = u - x0
    fv = v - y0
    return x0, y0, fu, fv


def bilinear_sample(grid: np.ndarray, uv: np.ndarray, grid_valid: np.ndarray = None):
    """Bilinearly interpolate a regular grid at continuous pixel coordinates.

    Args:
        grid: (H, W) or (H, W, C) array.
        uv: (..., 2) sample coordinates; (0, 0) is the center of the top-left
            cell, so integer coordinates return grid values exactly.
        grid_valid: optional (H, W) boolean mask. A sample is valid only when
            every corner that receives nonzero interpolation weight is valid.

    Returns:
        (values, valid). Samples outside [0, W-1] x [0, H-1] are invalid and
        zero-filled, not clamped.
    """
    grid = np.asarray(grid, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape[-1] != 2:
        raise GeometryError("uv must have shape (..., 2)")
    if grid.ndim not in (2, 3):
        raise GeometryError("grid must be (H, W) or (H, W, C)")
    height, width = grid.shape[:2]
    if height < 2 or width < 2:
        raise GeometryError("grid must be at least 2x2")

    u = uv[..., 0]
    v = uv[..., 1]
    inside = (
        np.isfinite(u) & np.isfinite(v)
        & (u >= -BOUNDARY_EPS) & (u <= width - 1.0 + BOUNDARY_EPS)
        & (v >= -BOUNDARY_EPS) & (v <= height - 1.0 + BOUNDARY_EPS)
    )
    u = np.clip(u, 0.0, width - 1.0)
    v = np.clip(v, 0.0, height - 1.0)
    uv_safe = np.where(inside[..., None], np.stack([u, v], axis=-1), 0.0)
    x0, y0, fu, fv = _corner_indices(uv_safe, height, width)
    x1 = x0 + 1
    y1 = y0 + 1

    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = fu * (1.0 - fv)
    w10 = (1.0 - fu) * fv
    w11 = fu * fv

    flat = grid.reshape(height * width, -1)
    channels = flat.shape[1]
    i00 = y0 * width + x0
    i01 = y0 * width + x1
    i10 = y1 * width + x0
    i11 = y1 * width + x1
    values = (
        w00[..., None] * flat[i00]
        + w01[..., None] * flat[i01]
        + w10[..., None] * flat[i10]
        + w11[..., None] * flat[i11]
    )
    valid = inside
    if grid_valid is not None:
        grid_valid = np.asarray(grid_valid, dtype=bool)
        if grid_valid.shape != (height, width):
            raise GeometryError("grid_valid must match the grid resolution")
        gv = grid_valid.reshape(-1)
        eps = 1e-12
        corners_ok = (
            (gv[i00] | (w00 <= eps))
            & (gv[i01] | (w01 <= eps))
            & (gv[i10] | (w10 <= eps))
            & (gv[i11] | (w11 <= eps))
        )
        valid = valid & corners_ok
    values = np.where(valid[..., None], values, 0.0)
    if grid.ndim == 2:
        values = values[..., 0]
    elif channels != grid.shape[2]:  # pragma: no cover - defensive
        raise GeometryError("channel bookkeeping failure")
    return values, valid


def reproject_image(
    source: Frame,
    target_depth: DepthMap,
    target_to_source: PoseSE3,
    cam: CameraIntrinsics,
):
    """Synthesize the target view of ``source`` by inverse warping.

    Every target pixel is backprojected with ``target_depth`` (which lives on
    the grid being synthesized), mapped through ``target_to_source`` into the
    source camera frame, projected, and bilinearly sampled from ``source``.
    For a frame pair (a, b), synthesizing I_b-hat from I_a passes b's depth and
    the pair transform T_ab (pose of camera b in camera a's frame).

    Returns:
        (image, mask): the synthesized (H, W, 3) image and a boolean mask that
        is False where the target depth is invalid, the transformed point falls
        behind the source camera, or the sample lands outside the source image.
        Masked pixels are zero-filled.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 3 or source.shape[2] != 3:
        raise GeometryError("source frame must be (H, W, 3)")
    if target_depth.shape != (cam.height, cam.width):
        raise GeometryError("target depth resolution must match the intrinsics")
    if source.shape[:2] != (cam.height, cam.width):
        raise GeometryError("source resolution must match the intrinsics")

    rays = camera_rays(cam)
    depth = np.where(target_depth.valid, target_depth.values, 0.0)
    points = rays * depth[..., None]
    warped = target_to_source.apply(points)
    uv, in_front = project(warped, cam)
    values, sample_ok = bilinear_sample(source, uv)
    mask = target_depth.valid & in_front & sample_ok
    return np.where(mask[..., None], values, 0.0), mask


def warp_depth(depth_a: DepthMap, t_ab: PoseSE3, cam: CameraIntrinsics) -> DepthMap:
    """Resample frame a's depth into frame b's grid.

    Each valid source pixel is backprojected, expressed in frame b via the
    inverse of ``t_ab`` (t_ab maps b coordinates into a), and its new z value
    is splatted onto the nearest target cell. Where several points land in one
    cell the smallest depth wins (nearest surface); cells receiving no point
    are invalid.
    """
    if depth_a.shape != (cam.height, cam.width):
        raise GeometryError("depth resolution must match the intrinsics")
    rays = camera_rays(cam)
    d = np.where(depth_a.valid, depth_a.values, 0.0)
    points = rays * d[..., None]
    t_ba = se3_inverse(t_ab)
    q = t_ba.apply(points)
    uv, in_front = project(q, cam)
    ok = depth_a.valid & in_front
    col = np.rint(uv[..., 0]).astype(np.int64)
    row = np.rint(uv[..., 1]).astype(np.int64)
    ok &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)

    out = np.full(cam.height * cam.width, np.inf)
    idx = (row * cam.width + col)[ok]
    np.minimum.at(out, idx, q[..., 2][ok])
    out = out.reshape(cam.height, cam.width)
    valid = np.isfinite(out)
    return DepthMap(np.where(valid, out, 0.0), valid)
