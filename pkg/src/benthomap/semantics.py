"""Benthic class taxonomy, patch tiling, and label handling.

Segmentation runs on fixed-size patches cut from the full-resolution video
frame, resampled to the working resolution of the classifier. Per-patch class
probabilities are stitched back by averaging in overlap regions; hard labels
come from the argmax with ties resolved toward the lower class id. Probability
grids are resampled bilinearly, hard label grids with nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

# Label value reserved for pixels with no class information.
UNLABELED_ID = 255

ROLES = ("substrate", "live_coral", "mobile", "unwanted")


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy definitions."""


class TilingError(ValueError):
    """Raised when a frame cannot be tiled or stitched."""


@dataclass(frozen=True)
class BenthicClass:
    id: int
    name: str
    color: tuple
    role: str


@dataclass
class ClassTaxonomy:
    """The class vocabulary: dense ids, display colors, roles, groupings.

    ``groupings`` maps a grouping name to a dict from class name to group
    name, used to summarize fine classes into coarser reporting categories.
    """

    classes: list
    groupings: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        names = [c.name for c in self.classes]
        if sorted(ids) != list(range(len(self.classes))):
            raise TaxonomyError("class ids must be dense 0..C-1")
        if len(set(names)) != len(names):
            raise TaxonomyError("class names must be unique")
        if len(self.classes) - 1 >= UNLABELED_ID:
            raise TaxonomyError("class ids collide with the unlabeled sentinel")
        for c in self.classes:
            if c.role not in ROLES:
                raise TaxonomyError(f"unknown role {c.role!r} for class {c.name!r}")
        for special in ("background", "human", "fish"):
            n = names.count(special)
            if n != 1:
                raise TaxonomyError(f"taxonomy needs exactly one {special!r} class")
        self.classes = sorted(self.classes, key=lambda c: c.id)
        for grouping_name, mapping in self.groupings.items():
            missing = set(mapping) - set(names)
            if missing:
                raise TaxonomyError(
                    f"grouping {grouping_name!r} references unknown classes {sorted(missing)}"
                )

    def __len__(self):
        return len(self.classes)

    @property
    def names(self) -> list:
        return [c.name for c in self.classes]

    def id_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise TaxonomyError(f"unknown class {name!r}")

    def palette(self) -> np.ndarray:
        """(C, 3) uint8 display colors indexed by class id."""
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def ids_with_role(self, role: str) -> list:
        return [c.id for c in self.classes if c.role == role]

    def group_mapping(self, grouping: str):
        """Resolve a grouping to (group_names, id_to_group index array)."""
        if grouping not in self.groupings:
            raise TaxonomyError(f"unknown grouping {grouping!r}")
        mapping = self.groupings[grouping]
        targets = []
        for c in self.classes:
            targets.append(mapping.get(c.name, c.name))
        group_names = sorted(set(targets))
        index = {g: i for i, g in enumerate(group_names)}
        id_to_group = np.array([index[t] for t in targets], dtype=np.int64)
        return group_names, id_to_group

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"id": c.id, "name": c.name, "color": list(c.color), "role": c.role}
                for c in self.classes
            ],
            "groupings": {k: dict(v) for k, v in self.groupings.items()},
        }

    @staticmethod
    def from_dict(data: dict) -> "ClassTaxonomy":
        classes = [
            BenthicClass(
                id=int(c["id"]),
                name=str(c["name"]),
                color=tuple(int(x) for x in c["color"]),
                role=str(c["role"]),
            )
            for c in data["classes"]
        ]
        return ClassTaxonomy(classes, dict(data.get("groupings", {})))

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @staticmethod
    def load(path) -> "ClassTaxonomy":
        with open(path) as fh:
            return ClassTaxonomy.from_dict(yaml.safe_load(fh))


def _default_classes():
    # 20 benthic survey categories. Colors are display-only.
    rows = [
        (0, "background", (40, 60, 90), "unwanted"),
        (1, "human", (230, 60, 60), "unwanted"),
        (2, "fish", (70, 170, 240), "mobile"),
        (3, "sea_urchin", (40, 20, 60), "mobile"),
        (4, "anemone", (230, 140, 200), "mobile"),
        (5, "sand", (215, 200, 160), "substrate"),
        (6, "rock", (120, 115, 110), "substrate"),
        (7, "rubble", (165, 150, 125), "substrate"),
        (8, "dark", (25, 25, 30), "substrate"),
        (9, "macroalgae", (60, 110, 50), "substrate"),
        (10, "seagrass", (90, 150, 70), "substrate"),
        (11, "trash", (240, 240, 240), "substrate"),
        (12, "transect_line", (250, 220, 60), "substrate"),
        (13, "massive_coral", (200, 120, 80), "live_coral"),
        (14, "branching_coral", (235, 170, 120), "live_coral"),
        (15, "encrusting_coral", (180, 90, 140), "live_coral"),
        (16, "soft_coral", (150, 120, 200), "live_coral"),
        (17, "dead_coral", (140, 140, 135), "substrate"),
        (18, "dead_massive_coral", (150, 145, 130), "substrate"),
        (19, "dead_branching_coral", (160, 155, 140), "substrate"),
    ]
    return [BenthicClass(*r) for r in rows]


def default_taxonomy() -> ClassTaxonomy:
    """The built-in 20-class benthic taxonomy with the standard grouping."""
    substrate_like = [
        "sand",
        "rock",
        "rubble",
        "macroalgae",
        "dead_coral",
        "dead_massive_coral",
        "dead_branching_coral",
    ]
    grouping = {name: "non_live_substrate" for name in substrate_like}
    for name in ("massive_coral", "branching_coral", "encrusting_coral", "soft_coral"):
        grouping[name] = "live_coral"
    return ClassTaxonomy(_default_classes(), {"substrate_vs_live": grouping})


# Default set of classes removed before fusion: water column, divers, and
# anything that moves between frames.
DEFAULT_UNWANTED = ("background", "human", "fish")


@dataclass
class LabelMap:
    """Per-pixel class probabilities with derived hard labels.

    ``probabilities`` is (H, W, C) float32; rows summing to zero mean the
    pixel is unlabeled and the hard label is the sentinel.
    """

    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float32)
        if self.probabilities.ndim != 3:
            raise TaxonomyError("probabilities must be (H, W, C)")

    @property
    def shape(self):
        return self.probabilities.shape[:2]

    def labels(self) -> np.ndarray:
        """(H, W) uint8 argmax labels, ties to the lower id, sentinel where empty."""
        total = self.probabilities.sum(axis=2)
        out = np.argmax(self.probabilities, axis=2).astype(np.uint8)
        out[total <= 0.0] = UNLABELED_ID
        return out

    @staticmethod
    def from_labels(labels: np.ndarray, num_classes: int) -> "LabelMap":
        """One-hot probabilities from hard labels (sentinel rows stay zero)."""
        labels = np.asarray(labels)
        probs = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
        known = labels != UNLABELED_ID
        if (labels[known] >= num_classes).any():
            raise TaxonomyError("label id outside the taxonomy")
        idx = np.nonzero(known)
        probs[idx[0], idx[1], labels[known].astype(np.int64)] = 1.0
        return LabelMap(probs)


@dataclass(frozen=True)
class PatchPlacement:
    """Where a patch sits in the full frame (pixel units, top-left origin)."""

    x0: int
    y0: int
    width: int
    height: int


def _tile_starts(total: int, patch: int):
    if patch > total:
        raise TilingError(f"patch size {patch} exceeds frame extent {total}")
    if patch == total:
        return [0]
    n = int(np.ceil(total / patch))
    span = total - patch
    return [int(round(i * span / (n - 1))) for i in range(n)]


def tile_frame(frame: np.ndarray, patch_size=(800, 500), working_size=(416, 416)):
    """Cut a full-resolution frame into overlapping patches.

    Args:
        frame: (H, W, 3) image.
        patch_size: (width, height) of the crop taken from the frame.
        working_size: (width, height) each crop is resampled to (bilinear).

    Returns:
        (patches, placements): list of (wh, ww, 3) arrays and the matching
        :class:`PatchPlacement` records, ordered row-major over the tile grid.
        A 1920x1080 frame with the defaults yields 3x3 = 9 patches overlapping
        240 px horizontally and 210 px vertically.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise TilingError("frame must be (H, W, 3)")
    h, w = frame.shape[:2]
    pw, ph = int(patch_size[0]), int(patch_size[1])
    xs = _tile_starts(w, pw)
    ys = _tile_starts(h, ph)
    patches, placements = [], []
    for y0 in ys:
        for x0 in xs:
            crop = frame[y0 : y0 + ph, x0 : x0 + pw]
            patches.append(resize_bilinear(crop, working_size[0], working_size[1]))
            placements.append(PatchPlacement(x0, y0, pw, ph))
    return patches, placements


def resize_bilinear(image: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Bilinear resampling with pixel centers aligned to the image corners."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if out_width == w and out_height == h:
        return image.copy()
    u = np.linspace(0.0, w - 1.0, out_width)
    v = np.linspace(0.0, h - 1.0, out_height)
    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = (u - x0)[None, :]
    fv = (v - y0)[:, None]
    if image.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    tl = image[np.ix_(y0, x0)]
    tr = image[np.ix_(y0, x0 + 1)]
    bl = image[np.ix_(y0 + 1, x0)]
    br = image[np.ix_(y0 + 1, x0 + 1)]
    top = tl + (tr - tl) * fu
    bottom = bl + (br - bl) * fu
    return top + (bottom - top) * fv


def resize_labels_nearest(labels: np.ndarray, out_width: int, out_height: int):
    """Nearest-neighbor resampling for hard label grids."""
    labels = np.asarray(labels)
    h, w = labels.shape[:2]
    cols = np.clip(np.rint(np.linspace(0.0, w - 1.0, out_width)), 0, w - 1).astype(int)
    rows = np.clip(np.rint(np.linspace(0.0, h - 1.0, out_height)), 0, h - 1).astype(int)
    return labels[np.ix_(rows, cols)]


def stitch_probabilities(patch_probs, placements, frame_size) -> LabelMap:
    """Average per-patch class probabilities back onto the full frame.

    Args:
        patch_probs: list of (h, w, C) probability grids at working resolution.
        placements: matching :class:`PatchPlacement` list.
        frame_size: (width, height) of the target frame.

    Returns:
        LabelMap at frame resolution. Overlap regions hold the mean of the
        contributing patches.

    Raises:
        TilingError: if any frame pixel is covered by no patch.
    """
    if len(patch_probs) != len(placements):
        raise TilingError("patch and placement counts differ")
    if not placements:
        raise TilingError("no patches to stitch")
    width, height = int(frame_size[0]), int(frame_size[1])
    channels = np.asarray(patch_probs[0]).shape[2]
    acc = np.zeros((height, width, channels), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.float64)
    for probs, place in zip(patch_probs, placements):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[2] != channels:
            raise TilingError("inconsistent class counts across patches")
        if place.x0 < 0 or place.y0 < 0 or place.x0 + place.width > width or place.y0 + place.height > height:
            raise TilingError("placement outside the frame")
        up = resize_bilinear(probs, place.width, place.height)
        acc[place.y0 : place.y0 + place.height, place.x0 : place.x0 + place.width] += up
        count[place.y0 : place.y0 + place.height, place.x0 : place.x0 + place.width] += 1.0
    if (count == 0).any():
        raise TilingError("stitching left uncovered pixels")
    return LabelMap((acc / count[..., None]).astype(np.float32))


def mask_unwanted(labels: np.ndarray, taxonomy: ClassTaxonomy, unwanted=DEFAULT_UNWANTED):
    """Boolean keep-mask: False for unwanted classes and unlabeled pixels."""
    labels = np.asarray(labels)
    unwanted_ids = {taxonomy.id_of(name) for name in unwanted}
    keep = labels != UNLABELED_ID
    for uid in sorted(unwanted_ids):
        keep &= labels != uid
    return keep


def group_labels(labels: np.ndarray, taxonomy: ClassTaxonomy, grouping: str):
    """Map class labels onto group indices; sentinel stays sentinel.

    Returns (group_names, grouped_labels).
    """
    group_names, id_to_group = taxonomy.group_mapping(grouping)
    labels = np.asarray(labels)
    out = np.full(labels.shape, UNLABELED_ID, dtype=np.uint8)
    known = labels != UNLABELED_ID
    out[known] = id_to_group[labels[known].astype(np.int64)].astype(np.uint8)
    return group_names, out


class OracleSegmenter:
    """Segmentation backend that returns reference labels, optionally corrupted.

    ``confusion_kernel`` is a row-stochastic (C, C) matrix: row t gives the
    probability of emitting each predicted class for true class t. Corruption
    is seeded per frame index, so results do not depend on evaluation order.
    """

    def __init__(self, num_classes: int, confusion_kernel=None, seed: int = 0):
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        if confusion_kernel is not None:
            confusion_kernel = np.asarray(confusion_kernel, dtype=np.float64)
            if confusion_kernel.shape != (self.num_classes, self.num_classes):
                raise TaxonomyError("confusion kernel must be (C, C)")
            rows = confusion_kernel.sum(axis=1)
            if not np.allclose(rows, 1.0, atol=1e-9):
                raise TaxonomyError("confusion kernel rows must sum to 1")
            if (confusion_kernel < 0).any():
                raise TaxonomyError("confusion kernel must be non-negative")
        self.confusion_kernel = confusion_kernel

    def predict(self, frame_index: int, true_labels: np.ndarray) -> LabelMap:
        labels = np.asarray(true_labels)
        if self.confusion_kernel is None:
            return LabelMap.from_labels(labels, self.num_classes)
        rng = np.random.default_rng((self.seed, int(frame_index)))
        out = np.full(labels.shape, UNLABELED_ID, dtype=np.uint8)
        u = rng.random(labels.shape)
        for t in np.unique(labels):
            if t == UNLABELED_ID:
                continue
            sel = labels == t
            cdf = np.cumsum(self.confusion_kernel[int(t)])
            out[sel] = np.searchsorted(cdf, u[sel], side="right").clip(
                0, self.num_classes - 1
            )
        return LabelMap.from_labels(out, self.num_classes)


class ExternalSegmenter:
    """Backend reading per-frame probability grids produced by another tool."""

    def __init__(self, directory, num_classes: int):
        from . import dataio

        self._dir = directory
        self._io = dataio
        self.num_classes = int(num_classes)

    def predict(self, frame_index: int, true_labels=None) -> LabelMap:
        import os

        path = os.path.join(self._dir, f"prob_{frame_index:06d}.bin")
        probs = self._io.read_probability_grid(path)
        if probs.shape[2] != self.num_classes:
            raise TaxonomyError(
                f"probability grid {path} has {probs.shape[2]} classes, expected {self.num_classes}"
            )
        return LabelMap(probs)
