"""Self-supervised alignment objective for depth and pose estimates.

Three ingredients: a photometric term comparing a frame against its
reconstruction from a neighboring view, an edge-aware smoothness regularizer
on mean-normalized inverse depth, and a geometric-consistency term comparing
depth maps carried across views. ``total_objective`` evaluates all of them
symmetrically for a frame pair. Analytic gradients of the same quantities
live in the ``gradients`` module; the implementations here are the reference
forward pass and stay free of bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    PoseSE3,
    reproject_image,
    se3_inverse,
    warp_depth,
)

# Guard for the ratio denominator in the geometric term. The SSIM constants
# below are larger than this and do their own stabilizing; adding the guard
# to SSIM as well would break the exactness of L_P(I, I) = 0.
EPS = 1e-7

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


class DegenerateMaskError(ValueError):
    """Raised when a loss term has no valid pixels to average over."""


class NumericError(ArithmeticError):
    """Raised when a loss term evaluates to a non-finite value.

    The message names the offending term.
    """


@dataclass(frozen=True)
class LossWeights:
    """Weights of the objective components plus the SSIM/L1 mixing factor."""

    photometric: float = 1.0
    smoothness: float = 0.1
    geometric: float = 0.5
    alpha: float = 0.85

    def validate(self):
        if min(self.photometric, self.smoothness, self.geometric) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-component values of one pair evaluation.

    ``photometric_ab`` reconstructs frame b from frame a; ``photometric_ba``
    the reverse. ``valid_pixel_count`` totals the pixels contributing to the
    two photometric masks.
    """

    photometric_ab: float
    photometric_ba: float
    smooth_a: float
    smooth_b: float
    geometric: float
    total: float
    valid_pixel_count: int


def _box3_sum(grid: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 box sum, same shape as the input."""
    pad = ((1, 1), (1, 1)) + ((0, 0),) * (grid.ndim - 2)
    p = np.pad(grid, pad)
    out = np.zeros_like(grid, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy : dy + grid.shape[0], dx : dx + grid.shape[1]]
    return out


def ssim_window_mask(mask: np.ndarray) -> np.ndarray:
    """Pixels whose full 3x3 neighborhood is valid and inside the image."""
    counts = _box3_sum(mask.astype(np.float64))
    return counts > 8.5


def photometric_loss(image, reconstruction, mask, alpha: float = 0.85) -> float:
    """SSIM/L1 mixture over the masked pixels.

    value = alpha * mean((1 - SSIM) / 2) + (1 - alpha) * mean|I - reconstruction|

    The L1 part averages over every masked pixel; the SSIM part averages over
    the subset whose whole 3x3 window is masked and in bounds (it is zero when
    that subset is empty). Identical images give exactly zero.
    """
    image = np.asarray(image, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape != reconstruction.shape:
        raise ValueError("image and reconstruction shapes differ")
    if not mask.any():
        raise DegenerateMaskError("photometric mask is empty")

    diff = np.abs(image - reconstruction).mean(axis=2)
    l1 = diff[mask].mean()

    if alpha == 0.0:
        return float(l1)

    eroded = ssim_window_mask(mask)
    if not eroded.any():
        return float((1.0 - alpha) * l1)

    with np.errstate(invalid="ignore", over="ignore"):
        mu_x = _box3_sum(image) / 9.0
        mu_y = _box3_sum(reconstruction) / 9.0
        var_x = _box3_sum(image * image) / 9.0 - mu_x * mu_x
        var_y = _box3_sum(reconstruction * reconstruction) / 9.0 - mu_y * mu_y
        cov = _box3_sum(image * reconstruction) / 9.0 - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        ssim = num / den
    dssim = (1.0 - ssim.mean(axis=2)) / 2.0
    return float(alpha * dssim[eroded].mean() + (1.0 - alpha) * l1)


def smoothness_reg(image, depth: DepthMap) -> float:
    """Edge-aware first-order smoothness of mean-normalized inverse depth.

    Horizontal and vertical neighbor differences of d* = (1/D) / mean(1/D)
    are weighted by exp(-|dI|) and averaged separately over the pairs where
    both pixels carry valid depth; the two means are summed.
    """
    image = np.asarray(image, dtype=np.float64)
    if not depth.valid.any():
        raise DegenerateMaskError("smoothness needs at least one valid depth")
    inv = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.values, 1.0), 0.0)
    mean_inv = inv[depth.valid].mean()
    dstar = inv / mean_inv

    total = 0.0
    for axis in (1, 0):
        if axis == 1:
            pair_ok = depth.valid[:, 1:] & depth.valid[:, :-1]
            dd = np.abs(dstar[:, 1:] - dstar[:, :-1])
            di = np.abs(image[:, 1:] - image[:, :-1]).mean(axis=2)
        else:
            pair_ok = depth.valid[1:, :] & depth.valid[:-1, :]
            dd = np.abs(dstar[1:, :] - dstar[:-1, :])
            di = np.abs(image[1:, :] - image[:-1, :]).mean(axis=2)
        if pair_ok.any():
            total += (dd * np.exp(-di))[pair_ok].mean()
    return float(total)


def geometric_consistency(depth_a: DepthMap, depth_b: DepthMap, t_ab: PoseSE3,
                          cam: CameraIntrinsics):
    """Scale-invariant disagreement between depths carried across a pair.

    Depth a is warped into frame b's grid and compared against depth b with
    the symmetric ratio |w - d| / (w + d + eps) per pixel.

    Returns:
        (value, inconsistency map): the mean ratio over pixels valid in both
        maps, and the per-pixel ratio grid (zero outside the overlap).
    """
    warped = warp_depth(depth_a, t_ab, cam)
    both = warped.valid & depth_b.valid
    if not both.any():
        raise DegenerateMaskError("no overlap between warped and target depth")
    inconsistency = np.zeros(depth_b.values.shape)
    w = warped.values[both]
    d = depth_b.values[both]
    inconsistency[both] = np.abs(w - d) / (w + d + EPS)
    return float(inconsistency[both].mean()), inconsistency


def total_objective(image_a, image_b, depth_a: DepthMap, depth_b: DepthMap,
                    t_ab: PoseSE3, cam: CameraIntrinsics,
                    weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Symmetric pair objective.

    ``t_ab`` maps frame-b coordinates into frame a (the pose of camera b
    expressed in camera a's frame); the reverse direction uses its inverse.
    The geometric term is the mean of the two directional evaluations.
    """
    weights.validate()
    t_ba = se3_inverse(t_ab)

    recon_b, mask_b = reproject_image(image_a, depth_b, t_ab, cam)
    recon_a, mask_a = reproject_image(image_b, depth_a, t_ba, cam)
    photometric_ab = photometric_loss(image_b, recon_b, mask_b, weights.alpha)
    photometric_ba = photometric_loss(image_a, recon_a, mask_a, weights.alpha)

    smooth_a = smoothness_reg(image_a, depth_a)
    smooth_b = smoothness_reg(image_b, depth_b)

    g_ab, _ = geometric_consistency(depth_a, depth_b, t_ab, cam)
    g_ba, _ = geometric_consistency(depth_b, depth_a, t_ba, cam)
    geometric = 0.5 * (g_ab + g_ba)

    total = (
        weights.photometric * (photometric_ab + photometric_ba)
        + weights.smoothness * (smooth_a + smooth_b)
        + weights.geometric * geometric
    )
    breakdown = LossBreakdown(
        photometric_ab=photometric_ab,
        photometric_ba=photometric_ba,
        smooth_a=smooth_a,
        smooth_b=smooth_b,
        geometric=geometric,
        total=float(total),
        valid_pixel_count=int(mask_b.sum()) + int(mask_a.sum()),
    )
    for name in ("photometric_ab", "photometric_ba", "smooth_a", "smooth_b",
                 "geometric", "total"):
        if not np.isfinite(getattr(breakdown, name)):
            raise NumericError(f"non-finite loss term {name!r}")
    return breakdown
