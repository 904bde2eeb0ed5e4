"""End-to-end orchestration: dataset in, semantic map and metrics out.

The run is a fixed sequence of stages (fit, uncertainty, segmentation, fuse,
extract, ortho, eval), each a pure function of its inputs, timed and logged
into a run manifest. Stage failures carry the stage name and, where one
applies, the frame index. Numeric outputs are byte-identical for identical
(config, seed) regardless of thread count; the manifest records wall times
and is therefore the one output allowed to differ between reruns.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__, dataio
from .config import ConfigError, PipelineConfig, config_hash
from .estimation import (GroundTruthEstimator, SelfSupervisedEstimator,
                         anchored_depth_samples, backend_relative_pose,
                         depth_uncertainty, pixel_uncertainty_filter)
from .evaluation import MarkerSet, accuracies, confusion, group_matrix, marker_report
from .fusion import (SemanticPointCloud, TsdfVolume, extract_point_cloud,
                     integrate_frame, point_uncertainty_filter)
from .geometry import MIN_DEPTH, CameraIntrinsics
from .orthoproj import (benthic_cover, class_raster, height_raster, hole_fraction,
                        ortho_project, rgb_raster)
from .semantics import (UNLABELED_ID, ClassTaxonomy, ExternalSegmenter,
                        OracleSegmenter, default_taxonomy, mask_unwanted)
from .synth import default_intrinsics, generate_scene, generate_trajectory, render_frame

GRID_GROUPING = "substrate_vs_live"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and frame index."""

    def __init__(self, stage: str, message: str, frame: int = None):
        self.stage = stage
        self.frame = frame
        where = f"stage {stage!r}" if frame is None else f"stage {stage!r}, frame {frame}"
        super().__init__(f"{where}: {message}")


@dataclass
class Dataset:
    """An image sequence with whatever ground-truth sidecars it carries.

    ``depths``, ``labels``, ``poses``, and the marker fields are None when the
    corresponding sidecar is absent; stages that need one check first.
    """

    cam: CameraIntrinsics
    frames: list
    depths: list = None
    labels: list = None
    poses: list = None
    marker_ids: list = None
    marker_positions: np.ndarray = None
    root: str = None

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def require(self, sidecar: str, needed_for: str):
        if getattr(self, sidecar) is None:
            raise ConfigError(f"{needed_for} needs the dataset's {sidecar} sidecar, "
                              f"which {self.root or 'this dataset'} does not carry")


# ---------------------------------------------------------------------------
# Dataset generation and loading.


def _frame_name(index: int, ext: str) -> str:
    return f"{index:06d}.{ext}"


def generate_dataset(config: PipelineConfig, force: bool = False) -> str:
    """Render a synthetic survey into ``config.dataset`` and return the path.

    The directory holds frames/ (PNG), depths/ (PFM), labels/ (PNG),
    trajectory.csv, markers.json, and intrinsics.json. Regeneration with the
    same config and seed is byte-identical. An existing non-empty target is
    refused unless ``force`` is set.
    """
    config.validate()
    target = config.dataset
    if os.path.isdir(target) and os.listdir(target) and not force:
        raise ConfigError(f"target {target} exists and is not empty; pass force to overwrite")

    taxonomy = load_taxonomy(config)
    gen = config.generate
    scene = generate_scene(gen.scene, seed=config.seed, taxonomy=taxonomy)
    poses = generate_trajectory(gen.trajectory, scene, seed=config.seed)
    cam = config.intrinsics or default_intrinsics(gen.width, gen.height)

    for sub in ("frames", "depths", "labels"):
        os.makedirs(os.path.join(target, sub), exist_ok=True)
    for k, pose in enumerate(poses):
        image, depth, labels = render_frame(scene, pose, cam)
        dataio.write_image(os.path.join(target, "frames", _frame_name(k, "png")), image)
        dataio.write_pfm(os.path.join(target, "depths", _frame_name(k, "pfm")), depth)
        dataio.write_label_png(os.path.join(target, "labels", _frame_name(k, "png")), labels)
    dataio.write_trajectory_csv(os.path.join(target, "trajectory.csv"), poses)
    ids = [f"marker_{k:02d}" for k in range(len(scene.marker_positions))]
    dataio.write_markers_json(os.path.join(target, "markers.json"), ids,
                              scene.marker_positions)
    dataio.write_intrinsics_json(os.path.join(target, "intrinsics.json"), cam)
    return target


def _load_series(root: str, sub: str, ext: str, count: int, reader):
    directory = os.path.join(root, sub)
    if not os.path.isdir(directory):
        return None
    out = []
    for k in range(count):
        path = os.path.join(directory, _frame_name(k, ext))
        if not os.path.isfile(path):
            raise StageError("load", f"{sub} sidecar is missing {_frame_name(k, ext)}",
                             frame=k)
        out.append(reader(path))
    return out


def load_dataset(path: str, cam: CameraIntrinsics = None) -> Dataset:
    """Read a dataset directory; ground-truth sidecars load when present."""
    frames_dir = os.path.join(path, "frames")
    if not os.path.isdir(frames_dir):
        raise ConfigError(f"{path} has no frames/ directory")
    count = len([n for n in os.listdir(frames_dir) if n.endswith(".png")])
    if count == 0:
        raise StageError("load", f"{frames_dir} holds no PNG frames")

    if cam is None:
        intrinsics_path = os.path.join(path, "intrinsics.json")
        if not os.path.isfile(intrinsics_path):
            raise ConfigError(f"{path} has no intrinsics.json; provide intrinsics "
                              "in the config")
        cam = dataio.read_intrinsics_json(intrinsics_path)

    frames = _load_series(path, "frames", "png", count, dataio.read_image)
    depths = _load_series(path, "depths", "pfm", count, dataio.read_pfm)
    labels = _load_series(path, "labels", "png", count, dataio.read_label_png)

    poses = None
    trajectory_path = os.path.join(path, "trajectory.csv")
    if os.path.isfile(trajectory_path):
        poses = dataio.read_trajectory_csv(trajectory_path)
        if len(poses) != count:
            raise StageError("load", f"trajectory holds {len(poses)} poses "
                                     f"for {count} frames")

    marker_ids = marker_positions = None
    markers_path = os.path.join(path, "markers.json")
    if os.path.isfile(markers_path):
        marker_ids, marker_positions = dataio.read_markers_json(markers_path)

    for series, name in ((frames, "frames"), (depths, "depths"), (labels, "labels")):
        if series is not None:
            for k, item in enumerate(series):
                shape = item.shape[:2] if hasattr(item, "shape") else item.shape
                if shape != (cam.height, cam.width):
                    raise StageError("load", f"{name} frame has shape {shape}, "
                                     f"intrinsics say {(cam.height, cam.width)}", frame=k)

    return Dataset(cam=cam, frames=frames, depths=depths, labels=labels, poses=poses,
                   marker_ids=marker_ids, marker_positions=marker_positions, root=path)


def load_taxonomy(config: PipelineConfig) -> ClassTaxonomy:
    if config.taxonomy is None:
        return default_taxonomy()
    return dataio.load_taxonomy(config.taxonomy)


def resolve_unwanted(config: PipelineConfig, taxonomy: ClassTaxonomy) -> tuple:
    """Validate the unwanted-class names against the taxonomy."""
    for name in config.unwanted:
        try:
            taxonomy.id_of(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return tuple(config.unwanted)


# ---------------------------------------------------------------------------
# Stages.


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_backend(config: PipelineConfig, dataset: Dataset):
    """Build and fit the configured depth/pose estimator."""
    if config.backend == "ground_truth":
        dataset.require("depths", "the ground_truth backend")
        dataset.require("poses", "the ground_truth backend")
        backend = GroundTruthEstimator(depths=dataset.depths, world_poses=dataset.poses)
        backend.fit()
        return backend
    settings = config.fit_config()
    backend = SelfSupervisedEstimator(
        grid_shape=settings.grid_shape, steps=settings.steps,
        learning_rate=settings.learning_rate, beta1=settings.beta1,
        beta2=settings.beta2, adam_eps=settings.adam_eps,
        batch_pairs=settings.batch_pairs, seed=settings.seed,
        eval_every=settings.eval_every, eval_pair_cap=settings.eval_pair_cap,
        threads=settings.threads, weights=settings.weights,
    )
    backend.fit(dataset.frames, dataset.cam)
    return backend


def estimate_world_poses(config: PipelineConfig, dataset: Dataset, backend) -> list:
    """Camera-to-map pose per frame.

    The ground-truth backend maps in true world coordinates. A fitted backend
    knows only relative motion, so its map is anchored at frame 0: pose i
    carries frame-i points into frame-0 coordinates.
    """
    if config.backend == "ground_truth":
        return list(dataset.poses)
    return [backend_relative_pose(backend, 0, i) for i in range(dataset.frame_count)]


def effective_gravity(config: PipelineConfig, dataset: Dataset):
    """Gravity direction in map coordinates, plus a note on its provenance.

    Config gravity is a world-frame vector. A frame-0 anchored reconstruction
    needs it rotated into the first camera's coordinates, which the trajectory
    sidecar provides when present (standing in for an attitude sensor).
    """
    g = np.array(config.unit_gravity())
    if config.backend == "ground_truth":
        return g, "world frame (config)"
    if dataset.poses is not None:
        rotated = dataset.poses[0].rotation.T @ g
        return rotated, "config gravity rotated by trajectory sidecar pose 0"
    return g, "config gravity used as map-frame (no trajectory sidecar)"


def uncertainty_stage(config: PipelineConfig, dataset: Dataset, backend):
    """Per-frame depth variance across windows plus the pixel keep-masks."""
    n = dataset.frame_count
    fraction = config.pixel_fraction

    def one(i):
        samples = anchored_depth_samples(backend, dataset.cam, i, n)
        variance = depth_uncertainty(samples)
        keep = pixel_uncertainty_filter(backend.frame_depth(i), variance, fraction)
        return variance, keep

    results = _parallel_map(one, range(n), config.resolved_threads())
    variances = [r[0] for r in results]
    keeps = [r[1] for r in results]
    return variances, keeps


def segmentation_stage(config: PipelineConfig, dataset: Dataset,
                       taxonomy: ClassTaxonomy, unwanted: tuple):
    """Per-frame hard labels and the keep-mask that drops unwanted classes."""
    if config.segmentation.backend == "oracle":
        dataset.require("labels", "oracle segmentation")
        segmenter = OracleSegmenter(num_classes=len(taxonomy))

        def one(i):
            return segmenter.predict(i, dataset.labels[i]).labels()
    else:
        segmenter = ExternalSegmenter(config.segmentation.directory,
                                      num_classes=len(taxonomy))

        def one(i):
            return segmenter.predict(i).labels()

    labels = _parallel_map(one, range(dataset.frame_count), config.resolved_threads())
    keeps = [mask_unwanted(lab, taxonomy, unwanted) for lab in labels]
    return labels, keeps


def fuse_stage(config: PipelineConfig, dataset: Dataset, backend, poses_world: list,
               pixel_keeps: list, variances: list, seg_labels: list,
               seg_keeps: list, taxonomy: ClassTaxonomy) -> TsdfVolume:
    """Integrate every frame, in frame order, into one volume."""
    volume = TsdfVolume(voxel_size=config.voxel_size, truncation=config.truncation,
                        class_count=len(taxonomy))
    for i in range(dataset.frame_count):
        try:
            integrate_frame(volume, dataset.frames[i], backend.frame_depth(i),
                            pixel_keeps[i] & seg_keeps[i], seg_labels[i],
                            poses_world[i], dataset.cam,
                            variance=variances[i].variance)
        except Exception as exc:
            raise StageError("fuse", str(exc), frame=i) from exc
    return volume


def extract_stage(config: PipelineConfig, volume: TsdfVolume) -> SemanticPointCloud:
    cloud = extract_point_cloud(volume, min_weight=config.min_weight)
    return point_uncertainty_filter(cloud, fraction=config.point_fraction)


def locate_markers(dataset: Dataset, backend, poses_world: list):
    """Estimated map-frame positions of the markers the survey actually saw.

    Each marker's true position picks its observation pixel (the frame where
    the ground-truth projection lands most centrally with a valid estimated
    depth); the estimate itself then comes purely from the fitted depth and
    pose, backprojected through that pixel. Truth guides where to look, never
    what is measured. Returns (positions, indices): markers outside every
    frame are absent, as they would be in a real survey.
    """
    dataset.require("marker_positions", "marker evaluation")
    dataset.require("poses", "marker evaluation")
    cam = dataset.cam
    positions, indices = [], []
    for m, p_true in enumerate(np.asarray(dataset.marker_positions, dtype=np.float64)):
        best = None
        for i, pose_gt in enumerate(dataset.poses):
            pc = pose_gt.rotation.T @ (p_true - pose_gt.translation)
            if pc[2] <= MIN_DEPTH:
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            ui, vi = int(round(u)), int(round(v))
            if not (0 <= ui < cam.width and 0 <= vi < cam.height):
                continue
            if not backend.frame_depth(i).valid[vi, ui]:
                continue
            score = ((u - cam.cx) / cam.width) ** 2 + ((v - cam.cy) / cam.height) ** 2
            if best is None or score < best[0]:
                best = (score, i, u, v)
        if best is None:
            continue
        _, i, u, v = best
        positions.append(poses_world[i].apply(_subpixel_backproject(
            backend.frame_depth(i), cam, u, v)))
        indices.append(m)
    return np.array(positions).reshape(len(positions), 3), indices


def _subpixel_backproject(depth, cam: CameraIntrinsics, u: float, v: float) -> np.ndarray:
    """Camera-frame point through the continuous pixel (u, v).

    Depth is bilinearly interpolated when all four neighboring pixels are
    valid; otherwise the nearest pixel center stands in. The half-pixel this
    saves matters: at survey range a pixel footprint spans several voxels.
    """
    u0 = min(max(int(np.floor(u)), 0), cam.width - 2)
    v0 = min(max(int(np.floor(v)), 0), cam.height - 2)
    if depth.valid[v0:v0 + 2, u0:u0 + 2].all():
        fu, fv = u - u0, v - v0
        quad = depth.values[v0:v0 + 2, u0:u0 + 2]
        z = (quad[0, 0] * (1 - fu) * (1 - fv) + quad[0, 1] * fu * (1 - fv)
             + quad[1, 0] * (1 - fu) * fv + quad[1, 1] * fu * fv)
    else:
        u, v = round(u), round(v)
        z = depth.values[int(v), int(u)]
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return ray * z


def marker_metrics(dataset: Dataset, backend, poses_world: list) -> dict:
    """Marker-distance report against the dataset's true anchor distances."""
    estimated, indices = locate_markers(dataset, backend, poses_world)
    return _marker_report(dataset, estimated, indices)


def _marker_report(dataset: Dataset, estimated: np.ndarray, indices: list) -> dict:
    """Distance report for the observed subset of markers.

    Only pairs of markers the survey observed enter the report; the ids of
    unseen markers are listed so short sequences stay honest.
    """
    unseen = [dataset.marker_ids[m] for m in range(len(dataset.marker_ids))
              if m not in indices]
    if len(indices) < 2:
        return {"skipped": "fewer than two markers visible", "unseen": unseen}
    truth = np.asarray(dataset.marker_positions, dtype=np.float64)[indices]
    k = len(indices)
    pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
    distances = [float(np.linalg.norm(truth[a] - truth[b])) for a, b in pairs]
    markers = MarkerSet(ids=[dataset.marker_ids[m] for m in indices],
                        positions=estimated, pairs=np.array(pairs),
                        distances=np.array(distances))
    report = marker_report(markers)
    report["unseen"] = unseen
    return report


def project_point_labels(dataset: Dataset, positions: np.ndarray,
                         num_classes: int, tolerance: float):
    """Reference class per 3D point, by projecting into the labeled frames.

    Every frame that sees a point (projection in bounds, ground-truth depth
    within ``tolerance`` of the point's camera-frame z) votes with its label
    at the projected pixel; the reference class is the vote argmax, ties to
    the lower id. Points no frame sees come back as the unlabeled sentinel.
    This is how point labels are audited against annotated imagery: the
    annotations live on pixels, so the points are brought to them.
    """
    dataset.require("depths", "point-label evaluation")
    dataset.require("labels", "point-label evaluation")
    dataset.require("poses", "point-label evaluation")
    cam = dataset.cam
    votes = np.zeros((len(positions), num_classes), dtype=np.int64)
    for i in range(dataset.frame_count):
        pose = dataset.poses[i]
        local = (positions - pose.translation) @ pose.rotation
        z = local[:, 2]
        ok = z > MIN_DEPTH
        safe_z = np.where(ok, z, 1.0)
        u = np.rint(cam.fx * local[:, 0] / safe_z + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * local[:, 1] / safe_z + cam.cy).astype(np.int64)
        ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        uc = np.clip(u, 0, cam.width - 1)
        vc = np.clip(v, 0, cam.height - 1)
        depth = dataset.depths[i]
        ok &= depth.valid[vc, uc] & (np.abs(z - depth.values[vc, uc]) <= tolerance)
        label = dataset.labels[i][vc, uc].astype(np.int64)
        ok &= label != UNLABELED_ID
        rows = np.nonzero(ok)[0]
        np.add.at(votes, (rows, label[rows]), 1)
    seen = votes.sum(axis=1) > 0
    truth = np.where(seen, np.argmax(votes, axis=1), UNLABELED_ID).astype(np.uint8)
    return truth, seen


def semantic_metrics(config: PipelineConfig, dataset: Dataset,
                     cloud: SemanticPointCloud, taxonomy: ClassTaxonomy) -> dict:
    """Point-level confusion of the extracted cloud against frame labels.

    Only meaningful when the reconstruction shares the truth's coordinate
    frame, so a fitted (scale-ambiguous) backend skips this block.
    """
    if config.backend != "ground_truth":
        return {"skipped": "reconstruction is scale-ambiguous; point positions "
                           "are not comparable to world-frame truth"}
    truth, seen = project_point_labels(dataset, cloud.positions, len(taxonomy),
                                       tolerance=2.0 * config.voxel_size)
    if not seen.any():
        return {"skipped": "no extracted point is visible in any labeled frame"}
    matrix = confusion(cloud.class_ids, truth, taxonomy)
    report = accuracies(matrix)
    group_names, _ = taxonomy.group_mapping(GRID_GROUPING)
    grouped = group_matrix(matrix, taxonomy, GRID_GROUPING)
    grouped_report = accuracies(grouped)
    return {
        "point_count": int(len(cloud)),
        "evaluated_fraction": float(seen.mean()),
        "total_accuracy": report.total,
        "mean_class_accuracy": report.mean_class,
        "per_class_accuracy": {
            taxonomy.classes[c].name: (None if np.isnan(report.per_class[c])
                                       else float(report.per_class[c]))
            for c in range(len(taxonomy))
        },
        "grouping": GRID_GROUPING,
        "group_total_accuracy": grouped_report.total,
        "group_accuracy": {
            name: (None if np.isnan(grouped_report.per_class[k])
                   else float(grouped_report.per_class[k]))
            for k, name in enumerate(group_names)
        },
        "confusion": matrix,
    }


# ---------------------------------------------------------------------------
# The full run.


@dataclass
class _Manifest:
    """Mutable run log, written to manifest.json at the end of every run."""

    data: dict = field(default_factory=dict)
    _clock: list = field(default_factory=list)

    def stage(self, name: str):
        self._clock = [name, time.perf_counter()]

    def done(self, **details):
        name, started = self._clock
        seconds = time.perf_counter() - started
        entry = {"name": name, "seconds": round(seconds, 3)}
        if "frames" in details and seconds > 0:
            entry["frames_per_second"] = round(details["frames"] / seconds, 2)
        entry.update(details)
        self.data.setdefault("stages", []).append(entry)

    def write(self, output: str):
        dataio.write_json(os.path.join(output, "manifest.json"), self.data)


def _new_manifest(config: PipelineConfig) -> _Manifest:
    return _Manifest({
        "config_hash": config_hash(config),
        "seed": int(config.seed),
        "threads": int(config.resolved_threads()),
        "versions": {
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "benthomap": __version__,
        },
        "config": config.to_dict(),
        "stages": [],
        "outputs": {},
        "empty_output": False,
        "partial": False,
    })


def _write_ortho(config: PipelineConfig, output: str, cloud: SemanticPointCloud,
                 taxonomy: ClassTaxonomy, gravity: np.ndarray, outputs: dict):
    """Rasterize the cloud top-down and write the three maps plus cover CSV."""
    grid = ortho_project(cloud, gravity, config.cell_size, scale=config.scale)
    dataio.write_rgb_png(os.path.join(output, "ortho_rgb.png"), rgb_raster(grid))
    dataio.write_rgb_png(os.path.join(output, "ortho_class.png"),
                         class_raster(grid, taxonomy))
    dataio.write_rgb_png(os.path.join(output, "ortho_height.png"),
                         height_raster(grid))
    cover = benthic_cover(grid, taxonomy)
    dataio.write_cover_csv(os.path.join(output, "cover.csv"), cover, taxonomy)
    outputs.update({"ortho_rgb": "ortho_rgb.png", "ortho_class": "ortho_class.png",
                    "ortho_height": "ortho_height.png", "cover": "cover.csv"})
    return grid, cover


def _write_eval(config: PipelineConfig, output: str, dataset: Dataset,
                cloud: SemanticPointCloud, taxonomy: ClassTaxonomy,
                grid, cover, marker_entry: dict, outputs: dict) -> dict:
    """Assemble the metrics bundle and write metrics.json (plus CSV and PNG)."""
    metrics = {
        "ortho": {
            "occupied_cells": int(grid.occupied_count),
            "hole_fraction": float(hole_fraction(grid)),
            "cover": {taxonomy.classes[c].name: float(cover[c])
                      for c in range(len(taxonomy))},
        },
        "markers": marker_entry,
    }
    semantic = semantic_metrics(config, dataset, cloud, taxonomy)
    matrix = semantic.pop("confusion", None)
    metrics["semantic"] = semantic
    dataio.write_json(os.path.join(output, "metrics.json"), metrics)
    outputs["metrics"] = "metrics.json"
    if matrix is not None:
        dataio.write_metrics_csv(os.path.join(output, "metrics.csv"), matrix,
                                 accuracies(matrix))
        dataio.write_confusion_png(os.path.join(output, "confusion.png"), matrix)
        outputs["metrics_csv"] = "metrics.csv"
        outputs["confusion"] = "confusion.png"
    return metrics


def _map_stages(config: PipelineConfig, manifest: _Manifest, output: str):
    """Shared front of the pipeline: load through extraction.

    Writes cloud.ply (plus markers_est.json when the dataset carries marker
    sidecars), flags an empty extraction in the manifest, and returns the
    in-memory products the projection and evaluation stages consume.
    """
    outputs = manifest.data["outputs"]

    manifest.stage("load")
    taxonomy = load_taxonomy(config)
    unwanted = resolve_unwanted(config, taxonomy)
    dataset = load_dataset(config.dataset, cam=config.intrinsics)
    manifest.done(frames=dataset.frame_count, classes=len(taxonomy))

    manifest.stage("fit")
    backend = fit_backend(config, dataset)
    poses_world = estimate_world_poses(config, dataset, backend)
    detail = {"backend": config.backend, "frames": dataset.frame_count}
    if config.backend == "self_supervised" and backend.loss_trace_:
        detail["final_loss"] = float(backend.loss_trace_[-1])
    manifest.done(**detail)

    manifest.stage("uncertainty")
    variances, pixel_keeps = uncertainty_stage(config, dataset, backend)
    kept = float(np.mean([k.mean() for k in pixel_keeps]))
    manifest.done(frames=dataset.frame_count, mean_kept_fraction=round(kept, 4))

    manifest.stage("segmentation")
    seg_labels, seg_keeps = segmentation_stage(config, dataset, taxonomy, unwanted)
    manifest.done(frames=dataset.frame_count, backend=config.segmentation.backend)

    manifest.stage("fuse")
    volume = fuse_stage(config, dataset, backend, poses_world, pixel_keeps,
                        variances, seg_labels, seg_keeps, taxonomy)
    manifest.done(frames=dataset.frame_count, voxels=volume.voxel_count,
                  blocks=volume.block_count,
                  rejected_pixels=volume.rejected_pixel_count)

    manifest.stage("extract")
    cloud = extract_stage(config, volume)
    cloud_path = os.path.join(output, "cloud.ply")
    dataio.write_ply(cloud_path, cloud)
    # Later stages score the artifact as written (PLY quantizes to float32),
    # so a chained ortho/eval on the file reproduces the full run exactly.
    cloud = dataio.read_ply(cloud_path)
    outputs["cloud"] = "cloud.ply"
    if dataset.marker_positions is not None and dataset.poses is not None:
        estimated, indices = locate_markers(dataset, backend, poses_world)
        dataio.write_markers_json(
            os.path.join(output, "markers_est.json"),
            [dataset.marker_ids[m] for m in indices], estimated)
        outputs["markers"] = "markers_est.json"
        marker_entry = _marker_report(dataset, estimated, indices)
    else:
        marker_entry = {"skipped": "dataset carries no marker sidecar"}
    manifest.done(points=len(cloud))
    if len(cloud) == 0:
        manifest.data["empty_output"] = True
    return dataset, taxonomy, cloud, marker_entry


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute every stage and write the artifact bundle to ``config.output``.

    Returns the manifest dict. Raises ConfigError for configuration problems
    and StageError when a stage fails; in the failure case the manifest is
    still written, with the partial flag set and the completed stages listed.
    """
    config.validate()
    config.validate_paths()
    output = config.output
    os.makedirs(output, exist_ok=True)

    manifest = _new_manifest(config)
    outputs = manifest.data["outputs"]

    try:
        dataset, taxonomy, cloud, marker_entry = _map_stages(config, manifest,
                                                             output)
        if manifest.data["empty_output"]:
            manifest.data["stages"].append(
                {"name": "ortho", "skipped": "empty point cloud"})
            manifest.data["stages"].append(
                {"name": "eval", "skipped": "empty point cloud"})
            manifest.write(output)
            return manifest.data

        manifest.stage("ortho")
        gravity, gravity_note = effective_gravity(config, dataset)
        grid, cover = _write_ortho(config, output, cloud, taxonomy, gravity, outputs)
        manifest.done(cells=int(grid.occupied_count), gravity=gravity_note)

        manifest.stage("eval")
        _write_eval(config, output, dataset, cloud, taxonomy, grid, cover,
                    marker_entry, outputs)
        manifest.done()
    except (ConfigError, StageError):
        manifest.data["partial"] = True
        manifest.write(output)
        raise
    except Exception as exc:
        manifest.data["partial"] = True
        stage_name = manifest._clock[0] if manifest._clock else "setup"
        manifest.write(output)
        raise StageError(stage_name, str(exc)) from exc

    manifest.write(output)
    return manifest.data


# ---------------------------------------------------------------------------
# Entry points for the narrower subcommands. Each writes its own products and
# a manifest covering just the stages it ran, under the same error contract
# as the full run.


def _product_run(config: PipelineConfig, body) -> dict:
    config.validate()
    config.validate_paths()
    output = config.output
    os.makedirs(output, exist_ok=True)
    manifest = _new_manifest(config)
    try:
        body(manifest, output)
    except (ConfigError, StageError):
        manifest.data["partial"] = True
        manifest.write(output)
        raise
    except Exception as exc:
        manifest.data["partial"] = True
        stage_name = manifest._clock[0] if manifest._clock else "setup"
        manifest.write(output)
        raise StageError(stage_name, str(exc)) from exc
    manifest.write(output)
    return manifest.data


def fit_products(config: PipelineConfig) -> dict:
    """Fit the estimation backend and write its raw products.

    Products: per-frame estimated depth maps (depths_est/*.pfm), the
    estimated trajectory (trajectory_est.csv; anchored at frame 0 for the
    fitted backend, world frame for ground truth), and a fit summary
    (fit.json) with the loss trace when one exists.
    """
    def body(manifest, output):
        outputs = manifest.data["outputs"]
        manifest.stage("load")
        dataset = load_dataset(config.dataset, cam=config.intrinsics)
        manifest.done(frames=dataset.frame_count)

        manifest.stage("fit")
        backend = fit_backend(config, dataset)
        poses_world = estimate_world_poses(config, dataset, backend)
        detail = {"backend": config.backend, "frames": dataset.frame_count}
        if config.backend == "self_supervised" and backend.loss_trace_:
            detail["final_loss"] = float(backend.loss_trace_[-1])
        manifest.done(**detail)

        manifest.stage("write")
        depth_dir = os.path.join(output, "depths_est")
        os.makedirs(depth_dir, exist_ok=True)
        for i in range(dataset.frame_count):
            dataio.write_pfm(os.path.join(depth_dir, _frame_name(i, "pfm")),
                             backend.frame_depth(i))
        dataio.write_trajectory_csv(os.path.join(output, "trajectory_est.csv"),
                                    poses_world)
        summary = {"backend": config.backend, "frames": dataset.frame_count}
        if config.backend == "self_supervised":
            summary["loss_trace"] = [float(x) for x in backend.loss_trace_]
            if backend.loss_trace_:
                summary["final_loss"] = float(backend.loss_trace_[-1])
        dataio.write_json(os.path.join(output, "fit.json"), summary)
        outputs.update({"depths": "depths_est", "trajectory": "trajectory_est.csv",
                        "fit": "fit.json"})
        manifest.done(frames=dataset.frame_count)

    return _product_run(config, body)


def map_products(config: PipelineConfig) -> dict:
    """Run load through extraction and write the semantic point cloud."""
    def body(manifest, output):
        _map_stages(config, manifest, output)

    return _product_run(config, body)


def _load_cloud(output: str, cloud_path) -> SemanticPointCloud:
    path = cloud_path or os.path.join(output, "cloud.ply")
    if not os.path.isfile(path):
        raise ConfigError(f"point cloud not found: {path}")
    return dataio.read_ply(path)


def ortho_products(config: PipelineConfig, cloud_path=None) -> dict:
    """Project an existing cloud top-down and write the map rasters.

    Reads cloud.ply from the output directory unless ``cloud_path`` names
    another file.
    """
    def body(manifest, output):
        outputs = manifest.data["outputs"]
        manifest.stage("load")
        taxonomy = load_taxonomy(config)
        dataset = load_dataset(config.dataset, cam=config.intrinsics)
        cloud = _load_cloud(output, cloud_path)
        manifest.done(points=len(cloud))
        if len(cloud) == 0:
            manifest.data["empty_output"] = True
            manifest.data["stages"].append(
                {"name": "ortho", "skipped": "empty point cloud"})
            return

        manifest.stage("ortho")
        gravity, gravity_note = effective_gravity(config, dataset)
        grid, _ = _write_ortho(config, output, cloud, taxonomy, gravity, outputs)
        manifest.done(cells=int(grid.occupied_count), gravity=gravity_note)

    return _product_run(config, body)


def eval_products(config: PipelineConfig, cloud_path=None,
                  markers_path=None) -> dict:
    """Score an existing cloud against the dataset's ground-truth sidecars.

    Marker distances come from markers_est.json (written by ``map`` and
    ``run``) when present; without it the marker block is skipped with a
    note, since relocating markers would mean refitting the backend.
    """
    def body(manifest, output):
        outputs = manifest.data["outputs"]
        manifest.stage("load")
        taxonomy = load_taxonomy(config)
        dataset = load_dataset(config.dataset, cam=config.intrinsics)
        cloud = _load_cloud(output, cloud_path)
        manifest.done(points=len(cloud))
        if len(cloud) == 0:
            manifest.data["empty_output"] = True
            manifest.data["stages"].append(
                {"name": "eval", "skipped": "empty point cloud"})
            return

        manifest.stage("eval")
        gravity, gravity_note = effective_gravity(config, dataset)
        grid = ortho_project(cloud, gravity, config.cell_size, scale=config.scale)
        cover = benthic_cover(grid, taxonomy)
        marker_entry = _marker_entry_from_file(
            dataset, markers_path or os.path.join(output, "markers_est.json"))
        _write_eval(config, output, dataset, cloud, taxonomy, grid, cover,
                    marker_entry, outputs)
        manifest.done(gravity=gravity_note)

    return _product_run(config, body)


def _marker_entry_from_file(dataset: Dataset, path: str) -> dict:
    if not os.path.isfile(path):
        return {"skipped": "no estimated marker positions found"}
    if dataset.marker_positions is None:
        return {"skipped": "dataset carries no marker sidecar"}
    ids, positions = dataio.read_markers_json(path)
    index_of = {mid: m for m, mid in enumerate(dataset.marker_ids)}
    unknown = sorted(set(ids) - set(index_of))
    if unknown:
        raise StageError("eval", f"estimated marker ids not in dataset: {unknown}")
    indices = [index_of[mid] for mid in ids]
    return _marker_report(dataset, positions.reshape(len(ids), 3), indices)
