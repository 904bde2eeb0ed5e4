"""Procedural underwater scenes with exact geometry for testing and evaluation.

World frame: x along the transect, y lateral, z pointing down (gravity is +z).
The seafloor is a heightfield z = floor(x, y) stored on a texel grid and
interpolated bilinearly; every consumer (renderer, marker placement, surface
oracles) evaluates the same interpolant, so rendered depths are exact for the
surface being measured. Appearance is a per-texel albedo texture from seeded
value noise, multiplied by a water tint that depends only on the seafloor
depth at the point, never on the viewing ray, which keeps a surface point's
color identical across viewpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, PoseSE3
from .semantics import ClassTaxonomy, default_taxonomy


class SceneError(ValueError):
    """Raised for unbuildable scene or trajectory specifications."""


# ---------------------------------------------------------------------------
# Seeded value noise on an unbounded lattice.

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z + _M1) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z ^= z >> np.uint64(30)
    z *= _M2
    z ^= z >> np.uint64(27)
    z *= _M3
    z ^= z >> np.uint64(31)
    return z


def _lattice_values(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic uniform [0, 1) values on integer lattice points."""
    a = _mix(ix.astype(np.int64).view(np.uint64) ^ np.uint64(0x5851F42D4C957F2D))
    b = _mix(a ^ iy.astype(np.int64).view(np.uint64))
    c = _mix(b ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    return (c >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x, y, cell: float, seed: int, octaves: int = 1, persistence: float = 0.5):
    """Multi-octave value noise in [0, 1], C2-smooth, seeded and unbounded.

    Args:
        x, y: coordinate arrays (broadcast together).
        cell: correlation length of the base octave in world units.
        seed: lattice seed; different seeds give independent fields.
        octaves: number of frequency doublings.
        persistence: amplitude falloff per octave.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if cell <= 0:
        raise SceneError("noise cell size must be positive")
    total = np.zeros(np.broadcast(x, y).shape)
    amp, norm, freq = 1.0, 0.0, 1.0 / cell
    for octave in range(octaves):
        px = x * freq
        py = y * freq
        ix = np.floor(px)
        iy = np.floor(py)
        fx = _smoothstep(px - ix)
        fy = _smoothstep(py - iy)
        salt = (seed * 1000003 + octave * 8191) & 0xFFFFFFFFFFFFFFFF
        v00 = _lattice_values(ix, iy, salt)
        v01 = _lattice_values(ix + 1, iy, salt)
        v10 = _lattice_values(ix, iy + 1, salt)
        v11 = _lattice_values(ix + 1, iy + 1, salt)
        top = v00 + (v01 - v00) * fx
        bottom = v10 + (v11 - v10) * fx
        total += amp * (top + (bottom - top) * fy)
        norm += amp
        amp *= persistence
        freq *= 2.0
    return total / norm


# ---------------------------------------------------------------------------
# Scene specification and construction.


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a procedural transect scene (world units)."""

    x_extent: tuple = (-1.0, 7.0)
    y_extent: tuple = (-2.0, 2.0)
    texel_size: float = 0.02
    base_depth: float = 2.5
    relief_amplitude: float = 0.22
    relief_cell: float = 1.4
    relief_octaves: int = 3
    class_fractions: tuple = (
        ("sand", 0.28),
        ("rock", 0.2),
        ("rubble", 0.14),
        ("massive_coral", 0.2),
        ("branching_coral", 0.1),
        ("macroalgae", 0.08),
    )
    class_cell: float = 0.45
    # Texture correlation lengths are chosen so the finest octave spans
    # several pixels at survey altitude; sharper texture cannot be resampled
    # at subpixel offsets without visible error, which would defeat
    # photometric alignment for any method.
    texture_cell: float = 0.8
    texture_octaves: int = 3
    detail_cell: float = 0.18
    detail_amplitude: float = 0.08
    tint_strength: float = 1.0
    marker_count: int = 4
    max_range: float = 30.0

    def validate(self):
        if self.x_extent[1] <= self.x_extent[0] or self.y_extent[1] <= self.y_extent[0]:
            raise SceneError("scene extents must be non-empty")
        if self.texel_size <= 0:
            raise SceneError("texel size must be positive")
        fracs = dict(self.class_fractions)
        if not fracs:
            raise SceneError("at least one class fraction is required")
        total = sum(fracs.values())
        if abs(total - 1.0) > 1e-9:
            raise SceneError(f"class fractions must sum to 1, got {total}")
        if any(f < 0 for f in fracs.values()):
            raise SceneError("class fractions must be non-negative")
        if self.marker_count < 2:
            raise SceneError("scenes carry at least two markers")


@dataclass
class SyntheticScene:
    """A realized scene: texel grids plus exact marker geometry."""

    spec: SceneSpec
    seed: int
    taxonomy: ClassTaxonomy
    floor: np.ndarray  # (ny, nx) seafloor z per texel
    classes: np.ndarray  # (ny, nx) uint8 class id per texel
    albedo: np.ndarray  # (ny, nx, 3) float albedo per texel
    marker_positions: np.ndarray  # (M, 3) world points on the surface

    @property
    def origin(self):
        return (self.spec.x_extent[0], self.spec.y_extent[0])

    @property
    def mean_floor_z(self) -> float:
        return float(self.floor.mean())

    def _grid_uv(self, x, y):
        ox, oy = self.origin
        return (
            (np.asarray(x, dtype=np.float64) - ox) / self.spec.texel_size,
            (np.asarray(y, dtype=np.float64) - oy) / self.spec.texel_size,
        )

    def in_extent(self, x, y):
        u, v = self._grid_uv(x, y)
        ny, nx = self.floor.shape
        return (u >= 0) & (u <= nx - 1) & (v >= 0) & (v <= ny - 1)

    def _bilinear(self, grid, x, y):
        u, v = self._grid_uv(x, y)
        ny, nx = self.floor.shape
        u = np.clip(u, 0.0, nx - 1.0)
        v = np.clip(v, 0.0, ny - 1.0)
        x0 = np.clip(np.floor(u), 0, nx - 2).astype(np.int64)
        y0 = np.clip(np.floor(v), 0, ny - 2).astype(np.int64)
        fu = u - x0
        fv = v - y0
        if grid.ndim == 3:
            fu = fu[..., None]
            fv = fv[..., None]
        tl = grid[y0, x0]
        tr = grid[y0, x0 + 1]
        bl = grid[y0 + 1, x0]
        br = grid[y0 + 1, x0 + 1]
        top = tl + (tr - tl) * fu
        bottom = bl + (br - bl) * fu
        return top + (bottom - top) * fv

    def floor_z(self, x, y):
        """Seafloor depth-down coordinate at (x, y), bilinear in the texel grid."""
        return self._bilinear(self.floor, x, y)

    def floor_slope(self, x, y, step: float = 1e-4):
        """Gradient magnitude of the heightfield, for point-to-surface oracles."""
        gx = (self.floor_z(x + step, y) - self.floor_z(x - step, y)) / (2 * step)
        gy = (self.floor_z(x, y + step) - self.floor_z(x, y - step)) / (2 * step)
        return np.sqrt(gx * gx + gy * gy)

    def class_at(self, x, y):
        """Class id of the nearest texel (uint8)."""
        u, v = self._grid_uv(x, y)
        ny, nx = self.floor.shape
        col = np.clip(np.rint(u), 0, nx - 1).astype(np.int64)
        row = np.clip(np.rint(v), 0, ny - 1).astype(np.int64)
        return self.classes[row, col]

    def albedo_at(self, x, y):
        return self._bilinear(self.albedo, x, y)

    def tint(self, z):
        """Water color multiplier at seafloor depth z (view independent)."""
        depth = np.maximum(np.asarray(z, dtype=np.float64), 0.0)
        k = np.array([0.22, 0.05, 0.03]) * self.spec.tint_strength
        return np.exp(-k * depth[..., None])

    def surface_color(self, x, y):
        """Final rendered color of a surface point, in [0, 1]."""
        rgb = self.albedo_at(x, y) * self.tint(self.floor_z(x, y))
        return np.clip(rgb, 0.0, 1.0)

    def marker_distances(self) -> np.ndarray:
        """Exact pairwise marker distances, (M, M)."""
        d = self.marker_positions[:, None, :] - self.marker_positions[None, :, :]
        return np.linalg.norm(d, axis=2)

    def texel_cover_fractions(self) -> dict:
        """Realized per-class texel fractions over the whole scene."""
        counts = np.bincount(self.classes.reshape(-1), minlength=len(self.taxonomy))
        total = self.classes.size
        return {
            self.taxonomy.classes[i].name: counts[i] / total
            for i in range(len(self.taxonomy))
            if counts[i] > 0
        }


def _box_blur(grid: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Repeated separable 3x3 box blur with edge replication."""
    out = grid.astype(np.float64)
    for _ in range(iterations):
        padded = np.pad(out, ((1, 1), (0, 0)) + ((0, 0),) * (out.ndim - 2), mode="edge")
        out = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
        padded = np.pad(out, ((0, 0), (1, 1)) + ((0, 0),) * (out.ndim - 2), mode="edge")
        out = (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0
    return out


def generate_scene(spec: SceneSpec = SceneSpec(), seed: int = 0, taxonomy=None) -> SyntheticScene:
    """Build a scene deterministically from (spec, seed)."""
    spec.validate()
    taxonomy = taxonomy or default_taxonomy()
    ox, oy = spec.x_extent[0], spec.y_extent[0]
    nx = int(round((spec.x_extent[1] - ox) / spec.texel_size)) + 1
    ny = int(round((spec.y_extent[1] - oy) / spec.texel_size)) + 1
    xs = ox + np.arange(nx) * spec.texel_size
    ys = oy + np.arange(ny) * spec.texel_size
    xx, yy = np.meshgrid(xs, ys)

    relief = value_noise(
        xx, yy, spec.relief_cell, seed * 7 + 1, spec.relief_octaves
    )
    floor = spec.base_depth + (relief - 0.5) * 2.0 * spec.relief_amplitude

    # Class field: a smooth random field thresholded at rank quantiles, so the
    # realized texel fractions match the request to within one texel.
    fracs = dict(spec.class_fractions)
    names = list(fracs.keys())
    share = np.array([fracs[n] for n in names])
    class_field = value_noise(xx, yy, spec.class_cell, seed * 7 + 2, 2)
    order = np.argsort(class_field, axis=None, kind="stable")
    counts = np.floor(np.cumsum(share) * class_field.size + 0.5).astype(np.int64)
    counts[-1] = class_field.size
    classes = np.empty(class_field.size, dtype=np.uint8)
    start = 0
    for name, stop in zip(names, counts):
        classes[order[start:stop]] = taxonomy.id_of(name)
        start = stop
    classes = classes.reshape(ny, nx)

    # Albedo: per-class base color with markers painted in, softened by a box
    # blur so color edges span several texels, then modulated by noise. The
    # palette contrast is compressed so blurred class edges stay gentle enough
    # for sub-pixel image resampling; labels keep the crisp class field.
    palette = taxonomy.palette().astype(np.float64) / 255.0
    base = palette[classes.astype(np.int64)]
    base = 0.45 + 0.6 * (base - 0.45)

    # Markers: distinctive disks anchored exactly on the interpolated surface,
    # placed in the interior of the extent.
    rng = np.random.default_rng((seed, 0xA11C0))
    sx, ex = spec.x_extent
    sy, ey = spec.y_extent
    m = spec.marker_count
    mx = sx + (ex - sx) * (0.2 + 0.6 * np.arange(m) / max(m - 1, 1))
    my = rng.uniform(sy + 0.25 * (ey - sy), ey - 0.25 * (ey - sy), size=m)

    radius = max(3, int(round(0.07 / spec.texel_size)))
    for cx, cy in zip(mx, my):
        cu = int(round((cx - ox) / spec.texel_size))
        cv = int(round((cy - oy) / spec.texel_size))
        u0, u1 = max(cu - radius, 0), min(cu + radius + 1, nx)
        v0, v1 = max(cv - radius, 0), min(cv + radius + 1, ny)
        du = np.arange(u0, u1) - cu
        dv = np.arange(v0, v1) - cv
        rr = np.sqrt(du[None, :] ** 2 + dv[:, None] ** 2)
        disk = rr <= radius
        core = rr <= radius * 0.45
        patch = base[v0:v1, u0:u1]
        patch[disk] = 0.06
        patch[core] = 0.95

    base = _box_blur(base, iterations=6)

    coarse = value_noise(xx, yy, spec.texture_cell, seed * 7 + 3, spec.texture_octaves)
    fine = value_noise(xx, yy, spec.detail_cell, seed * 7 + 4, 1)
    albedo = base * (0.55 + 0.6 * coarse[..., None])
    albedo = albedo + spec.detail_amplitude * (fine[..., None] - 0.5)
    albedo = np.clip(albedo, 0.02, 1.0)

    scene = SyntheticScene(
        spec=spec,
        seed=seed,
        taxonomy=taxonomy,
        floor=floor,
        classes=classes,
        albedo=albedo,
        marker_positions=np.zeros((0, 3)),
    )
    mz = scene.floor_z(mx, my)
    scene.marker_positions = np.stack([mx, my, mz], axis=1)
    return scene


# ---------------------------------------------------------------------------
# Rendering.


def render_frame(scene: SyntheticScene, pose_world: PoseSE3, cam: CameraIntrinsics):
    """Ray-cast one frame.

    Args:
        scene: the scene to render.
        pose_world: camera-to-world pose (points in camera frame map to world).
        cam: intrinsics.

    Returns:
        (image, depth, labels): (H, W, 3) float image in [0, 1], a DepthMap
        whose values are exact camera-frame z of the hit points (invalid where
        the ray misses the seafloor), and (H, W) uint8 class labels with the
        background class where the ray sees open water.
    """
    from .geometry import camera_rays

    rays_cam = camera_rays(cam).reshape(-1, 3)
    dirs = rays_cam @ pose_world.rotation.T
    origin = pose_world.translation
    n = dirs.shape[0]

    zmin = float(scene.floor.min())
    zmax = float(scene.floor.max())
    dz = dirs[:, 2]
    descending = dz > 1e-9
    above = origin[2] < zmin - 1e-9
    if not above:
        raise SceneError("camera must be above the seafloor relief")

    s_lo = np.where(descending, (zmin - origin[2]) / np.where(descending, dz, 1.0), np.inf)
    s_hi = np.where(descending, (zmax - origin[2]) / np.where(descending, dz, 1.0), np.inf)
    s_lo = np.maximum(s_lo * 0.999, 1e-3)
    s_hi = np.minimum(s_hi * 1.001, scene.spec.max_range)
    can_hit = descending & (s_lo < s_hi)
    s_lo = np.where(can_hit, s_lo, 0.0)
    s_hi = np.where(can_hit, s_hi, 0.0)

    steps = 160
    hit = np.zeros(n, dtype=bool)
    s_a = np.zeros(n)
    s_b = np.zeros(n)
    active = can_hit.copy()
    prev_s = s_lo.copy()
    # f(s) = ray z - floor z: negative above the surface. March until the
    # first sign change, then bisect inside the bracketing interval.
    ts = np.linspace(0.0, 1.0, steps)
    for i in range(1, steps):
        if not active.any():
            break
        s = s_lo + (s_hi - s_lo) * ts[i]
        px = origin[0] + s * dirs[:, 0]
        py = origin[1] + s * dirs[:, 1]
        pz = origin[2] + s * dz
        inside = scene.in_extent(px, py)
        f = np.where(inside, pz - scene.floor_z(px, py), -1.0)
        crossing = active & (f >= 0.0)
        s_a[crossing] = prev_s[crossing]
        s_b[crossing] = s[crossing]
        hit |= crossing
        active &= ~crossing
        prev_s = np.where(active, s, prev_s)

    idx = np.nonzero(hit)[0]
    if idx.size:
        lo = s_a[idx]
        hi = s_b[idx]
        d = dirs[idx]
        for _ in range(46):
            mid = 0.5 * (lo + hi)
            px = origin[0] + mid * d[:, 0]
            py = origin[1] + mid * d[:, 1]
            pz = origin[2] + mid * d[:, 2]
            f = pz - scene.floor_z(px, py)
            below = f >= 0.0
            hi = np.where(below, mid, hi)
            lo = np.where(below, lo, mid)
        s_hit = 0.5 * (lo + hi)
        hx = origin[0] + s_hit * d[:, 0]
        hy = origin[1] + s_hit * d[:, 1]
        on_map = scene.in_extent(hx, hy)
        keep = idx[on_map]
        s_keep = s_hit[on_map]
        hx, hy = hx[on_map], hy[on_map]
    else:
        keep = idx
        s_keep = np.zeros(0)
        hx = hy = np.zeros(0)

    h, w = cam.height, cam.width
    image = np.zeros((n, 3))
    labels = np.full(n, scene.taxonomy.id_of("background"), dtype=np.uint8)
    depth = np.zeros(n)
    valid = np.zeros(n, dtype=bool)

    water = np.array([0.03, 0.18, 0.26])
    image[:] = water
    if keep.size:
        image[keep] = scene.surface_color(hx, hy)
        labels[keep] = scene.class_at(hx, hy)
        # rays_cam carries z = 1, so the march parameter is the camera depth.
        depth[keep] = s_keep
        valid[keep] = True

    return (
        image.reshape(h, w, 3),
        DepthMap(depth.reshape(h, w), valid.reshape(h, w)),
        labels.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# Trajectories.


@dataclass(frozen=True)
class TrajectorySpec:
    """A swimmer-style forward sweep with smooth bounded jitter.

    Angles are degrees. ``pitch_deg`` follows the convention that 0 is
    horizontal and -90 looks straight down; surveys use -5 to -40.
    """

    frame_count: int = 60
    altitude: float = 2.0
    speed: float = 0.05
    start_x: float = 0.0
    pitch_deg: float = -20.0
    pitch_jitter_deg: float = 3.0
    yaw_jitter_deg: float = 3.0
    roll_jitter_deg: float = 2.0
    position_jitter: float = 0.03
    max_step_deg: float = 2.0

    def validate(self):
        if self.frame_count < 1:
            raise SceneError("trajectory needs at least one frame")
        if not (1.0 <= self.altitude <= 5.0):
            raise SceneError("altitude must stay in the 1 to 5 survey band")
        if not (-40.0 <= self.pitch_deg <= -5.0):
            raise SceneError("pitch must stay in the -5 to -40 degree band")
        if self.max_step_deg <= 0:
            raise SceneError("per-frame rotation bound must be positive")


def _smooth_jitter(rng, n, amplitude, max_step, n_waves=3):
    """Sum of random-phase sinusoids: smooth, bounded by amplitude, with a
    per-frame increment provably below max_step."""
    if amplitude <= 0 or n == 1:
        return np.zeros(n)
    k = np.arange(n)
    out = np.zeros(n)
    # Pick frequencies low enough that the slope bound amp * 2 pi f holds.
    f_max = max_step / (2.0 * math.pi * amplitude)
    for w in range(n_waves):
        f = f_max * rng.uniform(0.2, 0.95) / n_waves
        phase = rng.uniform(0.0, 2.0 * math.pi)
        out += (amplitude / n_waves) * np.sin(2.0 * math.pi * f * k + phase)
    return out


def _rotation_from_angles(yaw, pitch, roll):
    """Camera-to-world rotation from heading angles (radians).

    Columns are the camera axes in world coordinates: x right, y down,
    z forward. Gravity is world +z.
    """
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    forward = np.array([cp * cy, cp * sy, -sp])
    gravity = np.array([0.0, 0.0, 1.0])
    right0 = np.cross(gravity, forward)
    nr = np.linalg.norm(right0)
    if nr < 1e-12:
        raise SceneError("degenerate view direction (straight down)")
    right0 /= nr
    cr, sr = math.cos(roll), math.sin(roll)
    right = cr * right0 + sr * np.cross(forward, right0)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def generate_trajectory(
    spec: TrajectorySpec, scene: SyntheticScene, seed: int = 0
) -> list:
    """Deterministic list of camera-to-world poses for (spec, scene, seed)."""
    spec.validate()
    n = spec.frame_count
    rng = np.random.default_rng((seed, 0x7124))
    deg = math.pi / 180.0

    pitch = spec.pitch_deg * deg + _smooth_jitter(
        rng, n, spec.pitch_jitter_deg * deg, spec.max_step_deg * deg * 0.3
    )
    yaw = _smooth_jitter(rng, n, spec.yaw_jitter_deg * deg, spec.max_step_deg * deg * 0.3)
    roll = _smooth_jitter(rng, n, spec.roll_jitter_deg * deg, spec.max_step_deg * deg * 0.3)

    x = spec.start_x + spec.speed * np.arange(n) + _smooth_jitter(
        rng, n, spec.position_jitter, spec.position_jitter
    )
    y = _smooth_jitter(rng, n, spec.position_jitter * 6, spec.position_jitter)
    z = scene.mean_floor_z - spec.altitude + _smooth_jitter(
        rng, n, spec.position_jitter * 3, spec.position_jitter
    )

    poses = []
    for k in range(n):
        r = _rotation_from_angles(yaw[k], pitch[k], roll[k])
        poses.append(PoseSE3(r, np.array([x[k], y[k], z[k]])))
    return poses


def default_intrinsics(width: int = 152, height: int = 88) -> CameraIntrinsics:
    """Renderer intrinsics: 70 degree horizontal field of view."""
    fx = 0.5 * width / math.tan(0.5 * 70.0 * math.pi / 180.0)
    return CameraIntrinsics(
        fx=fx,
        fy=fx,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["class_fractions"] = [[k, v] for k, v in spec.class_fractions]
    return d


def scene_spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    if "class_fractions" in d:
        d["class_fractions"] = tuple((str(k), float(v)) for k, v in d["class_fractions"])
    for key in ("x_extent", "y_extent"):
        if key in d:
            d[key] = tuple(float(v) for v in d[key])
    return SceneSpec(**d)
