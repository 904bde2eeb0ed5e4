"""Run configuration: one structured file driving every pipeline stage.

A config is a plain dataclass tree that round-trips through YAML. Loading is
strict (unknown keys are errors, not warnings) so a typo in a field name can
never silently fall back to a default. The semantic content of a config is
summarized by a sha256 hash over its canonical JSON form; fields that cannot
change results (output directory, thread count) stay out of the hash.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .geometry import CameraIntrinsics
from .objective import LossWeights
from .estimation import FitConfig
from .synth import SceneSpec, TrajectorySpec, scene_spec_from_dict, scene_spec_to_dict


class ConfigError(ValueError):
    """Invalid, unreadable, or inconsistent run configuration."""


_BACKENDS = ("ground_truth", "self_supervised")
_SEGMENTATION_BACKENDS = ("oracle", "external")


def _strict_kwargs(data: dict, cls, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(unknown)}")
    return dict(data)


@dataclass
class FitSettings:
    """Self-supervised fit hyperparameters exposed through the config file.

    Seed and thread count live at the top level of the config; loss term
    weights have their own section.
    """

    grid_shape: tuple = (11, 19)
    steps: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_pairs: int = 5
    eval_every: int = 25
    eval_pair_cap: int = 12

    def to_fit_config(self, seed: int, threads: int, weights: LossWeights) -> FitConfig:
        return FitConfig(
            grid_shape=tuple(int(v) for v in self.grid_shape),
            steps=int(self.steps),
            learning_rate=float(self.learning_rate),
            beta1=float(self.beta1),
            beta2=float(self.beta2),
            adam_eps=float(self.adam_eps),
            batch_pairs=int(self.batch_pairs),
            seed=int(seed),
            eval_every=int(self.eval_every),
            eval_pair_cap=int(self.eval_pair_cap),
            threads=int(threads),
            weights=weights,
        )

    @staticmethod
    def from_dict(data: dict) -> "FitSettings":
        kwargs = _strict_kwargs(data, FitSettings, "fit")
        if "grid_shape" in kwargs:
            kwargs["grid_shape"] = tuple(int(v) for v in kwargs["grid_shape"])
        return FitSettings(**kwargs)


@dataclass
class SegmentationSettings:
    """Which segmentation backend labels the frames."""

    backend: str = "oracle"
    directory: str = None

    def validate(self):
        if self.backend not in _SEGMENTATION_BACKENDS:
            raise ConfigError(
                f"segmentation backend must be one of {_SEGMENTATION_BACKENDS}, "
                f"got {self.backend!r}"
            )
        if self.backend == "external" and not self.directory:
            raise ConfigError("external segmentation needs a probability-grid directory")

    @staticmethod
    def from_dict(data: dict) -> "SegmentationSettings":
        return SegmentationSettings(**_strict_kwargs(data, SegmentationSettings, "segmentation"))


@dataclass
class GenerateSettings:
    """Synthetic dataset recipe: scene, trajectory, and render resolution."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=lambda: TrajectorySpec(frame_count=200))
    width: int = 152
    height: int = 88

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("render resolution must be at least 8x8")
        try:
            self.scene.validate()
            self.trajectory.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "scene": scene_spec_to_dict(self.scene),
            "trajectory": asdict(self.trajectory),
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_dict(data: dict) -> "GenerateSettings":
        kwargs = _strict_kwargs(data, GenerateSettings, "generate")
        if "scene" in kwargs:
            try:
                kwargs["scene"] = scene_spec_from_dict(kwargs["scene"])
            except TypeError as exc:
                raise ConfigError(f"bad generate.scene: {exc}") from exc
        if "trajectory" in kwargs:
            traj = _strict_kwargs(kwargs["trajectory"], TrajectorySpec, "generate.trajectory")
            kwargs["trajectory"] = TrajectorySpec(**traj)
        return GenerateSettings(**kwargs)


_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def _intrinsics_from_dict(data: dict) -> CameraIntrinsics:
    if not isinstance(data, dict):
        raise ConfigError("intrinsics must be a mapping")
    unknown = sorted(set(data) - set(_INTRINSICS_KEYS))
    if unknown:
        raise ConfigError(f"unknown intrinsics field(s): {', '.join(unknown)}")
    missing = sorted(set(_INTRINSICS_KEYS) - set(data))
    if missing:
        raise ConfigError(f"intrinsics missing field(s): {', '.join(missing)}")
    return CameraIntrinsics(
        fx=float(data["fx"]),
        fy=float(data["fy"]),
        cx=float(data["cx"]),
        cy=float(data["cy"]),
        width=int(data["width"]),
        height=int(data["height"]),
    )


def _intrinsics_to_dict(cam: CameraIntrinsics) -> dict:
    return {
        "fx": float(cam.fx),
        "fy": float(cam.fy),
        "cx": float(cam.cx),
        "cy": float(cam.cy),
        "width": int(cam.width),
        "height": int(cam.height),
    }


@dataclass
class PipelineConfig:
    """Everything a run needs, in one serializable object.

    ``intrinsics`` left unset means the dataset's own ``intrinsics.json``
    sidecar is used. ``taxonomy`` left unset means the built-in taxonomy.
    ``threads`` of 0 means all available cores.
    """

    dataset: str = "dataset"
    output: str = "output"
    seed: int = 0
    threads: int = 0
    backend: str = "ground_truth"
    intrinsics: CameraIntrinsics = None
    fit: FitSettings = field(default_factory=FitSettings)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    taxonomy: str = None
    unwanted: tuple = ("background", "human", "fish")
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    voxel_size: float = 0.02
    truncation: float = None
    min_weight: float = 1.0
    cell_size: float = 0.05
    pixel_fraction: float = 0.35
    point_fraction: float = 0.20
    scale: float = 1.0
    gravity: tuple = (0.0, 0.0, 1.0)
    generate: GenerateSettings = field(default_factory=GenerateSettings)

    # -- validation ----------------------------------------------------

    def validate(self):
        """Check every field value; raises ConfigError on the first problem."""
        if not self.dataset:
            raise ConfigError("dataset path must be non-empty")
        if not self.output:
            raise ConfigError("output path must be non-empty")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 means all cores)")
        if self.backend not in _BACKENDS:
            raise ConfigError(f"backend must be one of {_BACKENDS}, got {self.backend!r}")
        for name, value in (("voxel_size", self.voxel_size),
                            ("cell_size", self.cell_size),
                            ("min_weight", self.min_weight),
                            ("scale", self.scale)):
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.truncation is not None and not self.truncation > 0:
            raise ConfigError(f"truncation must be positive, got {self.truncation}")
        for name, value in (("pixel_fraction", self.pixel_fraction),
                            ("point_fraction", self.point_fraction)):
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        gravity = tuple(float(v) for v in self.gravity)
        if len(gravity) != 3 or sum(v * v for v in gravity) <= 0:
            raise ConfigError("gravity must be a non-zero 3-vector")
        if not all(isinstance(name, str) and name for name in self.unwanted):
            raise ConfigError("unwanted classes must be non-empty names")
        try:
            self.loss_weights.validate()
            self.fit.to_fit_config(self.seed, 1, self.loss_weights).validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.segmentation.validate()
        self.generate.validate()

    def validate_paths(self, need_dataset: bool = True):
        """Check that every referenced path exists on disk."""
        if need_dataset and not os.path.isdir(self.dataset):
            raise ConfigError(f"dataset directory does not exist: {self.dataset}")
        if self.taxonomy is not None and not os.path.isfile(self.taxonomy):
            raise ConfigError(f"taxonomy file does not exist: {self.taxonomy}")
        if self.segmentation.backend == "external":
            if not os.path.isdir(self.segmentation.directory):
                raise ConfigError(
                    f"segmentation directory does not exist: {self.segmentation.directory}"
                )

    # -- derived values ------------------------------------------------

    def resolved_threads(self) -> int:
        if self.threads > 0:
            return int(self.threads)
        return os.cpu_count() or 1

    def fit_config(self) -> FitConfig:
        return self.fit.to_fit_config(self.seed, self.resolved_threads(), self.loss_weights)

    def unit_gravity(self) -> tuple:
        g = tuple(float(v) for v in self.gravity)
        norm = sum(v * v for v in g) ** 0.5
        return tuple(v / norm for v in g)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "output": str(self.output),
            "seed": int(self.seed),
            "threads": int(self.threads),
            "backend": str(self.backend),
            "intrinsics": None if self.intrinsics is None
            else _intrinsics_to_dict(self.intrinsics),
            "fit": asdict(self.fit) | {"grid_shape": [int(v) for v in self.fit.grid_shape]},
            "loss_weights": asdict(self.loss_weights),
            "taxonomy": self.taxonomy,
            "unwanted": sorted(set(self.unwanted)),
            "segmentation": asdict(self.segmentation),
            "voxel_size": float(self.voxel_size),
            "truncation": None if self.truncation is None else float(self.truncation),
            "min_weight": float(self.min_weight),
            "cell_size": float(self.cell_size),
            "pixel_fraction": float(self.pixel_fraction),
            "point_fraction": float(self.point_fraction),
            "scale": float(self.scale),
            "gravity": [float(v) for v in self.gravity],
            "generate": self.generate.to_dict(),
        }

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        kwargs = _strict_kwargs(data, PipelineConfig, "config")
        if kwargs.get("intrinsics") is not None:
            kwargs["intrinsics"] = _intrinsics_from_dict(kwargs["intrinsics"])
        if "fit" in kwargs:
            kwargs["fit"] = FitSettings.from_dict(kwargs["fit"])
        if "loss_weights" in kwargs:
            lw = _strict_kwargs(kwargs["loss_weights"], LossWeights, "loss_weights")
            kwargs["loss_weights"] = LossWeights(**lw)
        if "segmentation" in kwargs:
            kwargs["segmentation"] = SegmentationSettings.from_dict(kwargs["segmentation"])
        if "generate" in kwargs:
            kwargs["generate"] = GenerateSettings.from_dict(kwargs["generate"])
        if "unwanted" in kwargs:
            if isinstance(kwargs["unwanted"], str):
                raise ConfigError("unwanted must be a list of class names")
            kwargs["unwanted"] = tuple(kwargs["unwanted"])
        if "gravity" in kwargs:
            kwargs["gravity"] = tuple(float(v) for v in kwargs["gravity"])
        return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Parse a YAML config file; any structural problem is a ConfigError."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    return PipelineConfig.from_dict(data)


def save_config(path, config: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(config.to_dict(), handle, sort_keys=True)


def apply_override(config: PipelineConfig, assignment: str) -> PipelineConfig:
    """Apply one ``dotted.path=value`` override and return a fresh config.

    The value side is parsed as YAML, so numbers, booleans, nulls, and lists
    all come through typed: ``fit.steps=3000``, ``taxonomy=null``,
    ``unwanted=[human, fish]``.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, raw = assignment.split("=", 1)
    path = path.strip()
    if not path:
        raise ConfigError(f"override {assignment!r} has an empty field path")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override value {raw!r} is not valid YAML: {exc}") from exc

    data = config.to_dict()
    node = data
    parts = path.split(".")
    for key in parts[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config field {path!r}")
        node = node[key]
        if node is None:
            raise ConfigError(f"cannot set {path!r}: parent section is null")
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config field {path!r}")
    node[parts[-1]] = value
    return PipelineConfig.from_dict(data)


def config_hash(config: PipelineConfig) -> str:
    """sha256 over the semantic content of a config.

    The output directory and thread count are excluded: moving results or
    changing parallelism cannot change them, and the hash is required to move
    iff results can.
    """
    data = config.to_dict()
    del data["output"]
    del data["threads"]
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
