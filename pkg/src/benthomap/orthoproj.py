"""Gravity-aligned 2D projection of semantic point clouds.

Points are binned onto a grid in the plane normal to gravity. Within each
cell only the top fraction of points by elevation is kept (the shallowest
points, nearest the camera), which suppresses stray points reconstructed
below the true surface. The cell class is a hard majority vote over the
selected points, color and height are their means.

Cover statistics normalize per-class cell counts by the occupied cell count,
and hole analysis reports unoccupied area fully enclosed by the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fusion import SemanticPointCloud
from .semantics import UNLABELED_ID, ClassTaxonomy

SELECT_FRACTION = 0.30
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class OrthoError(ValueError):
    """Invalid projection input or degenerate grid."""


@dataclass
class OrthoGrid:
    """Occupancy grid on the plane normal to gravity.

    ``axis_u`` and ``axis_v`` span the plane (columns and rows), ``origin``
    holds the plane coordinates of cell (0, 0)'s corner, snapped to whole
    cells so reruns land on the same lattice. ``mean_height`` is elevation
    measured against gravity, so larger means shallower. Class, color, and
    height carry meaning only where ``occupied`` is set; elsewhere they hold
    the unlabeled id, zeros, and NaN.
    """

    cell_size: float
    gravity: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    origin: np.ndarray
    occupied: np.ndarray
    class_ids: np.ndarray
    mean_rgb: np.ndarray
    mean_height: np.ndarray

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        self.axis_u = np.asarray(self.axis_u, dtype=np.float64).reshape(3)
        self.axis_v = np.asarray(self.axis_v, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.ndim != 2:
            raise OrthoError("occupancy must be a 2-D grid")
        shape = self.occupied.shape
        self.class_ids = np.asarray(self.class_ids, dtype=np.uint8)
        self.mean_rgb = np.asarray(self.mean_rgb, dtype=np.float64)
        self.mean_height = np.asarray(self.mean_height, dtype=np.float64)
        if (self.class_ids.shape != shape or self.mean_height.shape != shape
                or self.mean_rgb.shape != shape + (3,)):
            raise OrthoError("per-cell arrays must share the occupancy shape")
        if self.cell_size <= 0:
            raise OrthoError("cell_size must be positive")

    @property
    def shape(self):
        return self.occupied.shape

    @property
    def occupied_count(self) -> int:
        return int(self.occupied.sum())


def _plane_basis(gravity: np.ndarray):
    g = np.asarray(gravity, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(g) - 1.0) > 1e-9:
        raise OrthoError("gravity must be a unit vector")
    ref = np.array([1.0, 0.0, 0.0]) if abs(g[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ g) * g
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(g, e1)
    return g, e1, e2


def _cells_ceil_fraction(fraction: float, counts: np.ndarray) -> np.ndarray:
    """Vector form of the drift-guarded ceiling, floored at one point."""
    exact = fraction * counts
    nearest = np.round(exact)
    snap = np.abs(exact - nearest) < 1e-9 * np.maximum(1, counts)
    k = np.where(snap, nearest, np.ceil(exact)).astype(np.int64)
    return np.maximum(1, k)


def ortho_project(cloud: SemanticPointCloud, gravity, cell_size: float,
                  scale: float = 1.0) -> OrthoGrid:
    """Project a point cloud onto the plane normal to gravity.

    ``scale`` converts reconstruction units to scene units before gridding,
    for clouds whose metric scale was recovered from a reference object. Per
    occupied cell the top 30 percent of points by elevation are selected
    (rounded up, never fewer than one, elevation ties resolved toward the
    lower point index); the class is their majority vote with ties toward
    the lower id, color and height their means.
    """
    if len(cloud) == 0:
        raise OrthoError("cannot project an empty cloud")
    if cell_size <= 0:
        raise OrthoError("cell_size must be positive")
    if scale <= 0:
        raise OrthoError("scale must be positive")
    g, e1, e2 = _plane_basis(gravity)

    points = cloud.positions * float(scale)
    u = points @ e1
    v = points @ e2
    height = -(points @ g)

    origin = np.array([np.floor(u.min() / cell_size) * cell_size,
                       np.floor(v.min() / cell_size) * cell_size])
    iu = np.floor((u - origin[0]) / cell_size).astype(np.int64)
    iv = np.floor((v - origin[1]) / cell_size).astype(np.int64)
    n_cols = int(iu.max()) + 1
    n_rows = int(iv.max()) + 1
    cell_of_point = iv * n_cols + iu

    order = np.lexsort((np.arange(len(cloud)), -height, cell_of_point))
    cell_sorted = cell_of_point[order]
    height_sorted = height[order]
    color_sorted = cloud.colors[order]
    class_sorted = cloud.class_ids[order]

    occupied_cells, starts, counts = np.unique(cell_sorted, return_index=True,
                                               return_counts=True)
    keep_k = _cells_ceil_fraction(SELECT_FRACTION, counts)
    group = np.repeat(np.arange(len(occupied_cells)), counts)
    rank = np.arange(len(cell_sorted)) - starts[group]
    selected = rank < keep_k[group]

    sel_group = group[selected]
    votes = np.bincount(sel_group * 256 + class_sorted[selected].astype(np.int64),
                        minlength=len(occupied_cells) * 256)
    cell_class = np.argmax(votes.reshape(len(occupied_cells), 256), axis=1)
    sel_counts = np.bincount(sel_group, minlength=len(occupied_cells))
    cell_height = (np.bincount(sel_group, weights=height_sorted[selected],
                               minlength=len(occupied_cells)) / sel_counts)
    cell_rgb = np.stack([
        np.bincount(sel_group, weights=color_sorted[selected, c],
                    minlength=len(occupied_cells)) / sel_counts
        for c in range(3)
    ], axis=1)

    occupied = np.zeros((n_rows, n_cols), dtype=bool)
    class_ids = np.full((n_rows, n_cols), UNLABELED_ID, dtype=np.uint8)
    mean_rgb = np.zeros((n_rows, n_cols, 3))
    mean_height = np.full((n_rows, n_cols), np.nan)
    rows, cols = occupied_cells // n_cols, occupied_cells % n_cols
    occupied[rows, cols] = True
    class_ids[rows, cols] = cell_class.astype(np.uint8)
    mean_rgb[rows, cols] = cell_rgb
    mean_height[rows, cols] = cell_height

    return OrthoGrid(cell_size=float(cell_size), gravity=g, axis_u=e1,
                     axis_v=e2, origin=origin, occupied=occupied,
                     class_ids=class_ids, mean_rgb=mean_rgb,
                     mean_height=mean_height)


def benthic_cover(grid: OrthoGrid, taxonomy: ClassTaxonomy) -> np.ndarray:
    """Per-class fraction of occupied cells, indexed by class id.

    Fractions are normalized by the occupied cell count and sum to one.
    """
    if grid.occupied_count == 0:
        raise OrthoError("cover is undefined on a grid with no occupied cells")
    ids = grid.class_ids[grid.occupied].astype(np.int64)
    if ids.max() >= len(taxonomy):
        raise OrthoError("grid carries class ids outside the taxonomy")
    counts = np.bincount(ids, minlength=len(taxonomy))
    return counts / grid.occupied_count


def hole_fraction(grid: OrthoGrid) -> float:
    """Fraction of map area made of fully enclosed unoccupied cells.

    A hole is a 4-connected unoccupied region with no path to the grid
    boundary; the fraction normalizes by occupied plus enclosed cells, so a
    map without holes reports exactly zero.
    """
    if grid.occupied_count == 0:
        raise OrthoError("holes are undefined on a grid with no occupied cells")
    empty = ~grid.occupied
    labels, _ = ndimage.label(empty, structure=_FOUR_CONNECTED)
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    open_ids = np.unique(border[border > 0])
    enclosed = empty & (labels > 0) & ~np.isin(labels, open_ids)
    n_enclosed = int(enclosed.sum())
    return n_enclosed / (grid.occupied_count + n_enclosed)


def rgb_raster(grid: OrthoGrid) -> np.ndarray:
    """(H, W, 3) uint8 render of mean cell color, black where unoccupied."""
    out = np.zeros(grid.shape + (3,), dtype=np.uint8)
    occ = grid.occupied
    out[occ] = np.clip(np.round(grid.mean_rgb[occ] * 255.0), 0, 255).astype(np.uint8)
    return out


def class_raster(grid: OrthoGrid, taxonomy: ClassTaxonomy) -> np.ndarray:
    """(H, W, 3) uint8 render of cell classes in the taxonomy palette."""
    occ = grid.occupied
    ids = grid.class_ids[occ].astype(np.int64)
    if occ.any() and ids.max() >= len(taxonomy):
        raise OrthoError("grid carries class ids outside the taxonomy")
    out = np.zeros(grid.shape + (3,), dtype=np.uint8)
    out[occ] = taxonomy.palette()[ids]
    return out


def height_raster(grid: OrthoGrid) -> np.ndarray:
    """(H, W) uint8 render of cell elevation, brighter is shallower.

    Occupied cells map to 1..255 so they stay distinct from the unoccupied
    background at 0; a perfectly flat map renders fully bright.
    """
    out = np.zeros(grid.shape, dtype=np.uint8)
    occ = grid.occupied
    if not occ.any():
        return out
    h = grid.mean_height[occ]
    span = float(h.max() - h.min())
    frac = (h - h.min()) / span if span > 0 else np.ones_like(h)
    out[occ] = np.round(1.0 + 254.0 * frac).astype(np.uint8)
    return out
