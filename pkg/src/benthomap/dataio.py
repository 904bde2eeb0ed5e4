"""File formats: PLY clouds, PFM depths, PNG images, CSV and JSON tables.

Every writer is deterministic: identical in-memory content produces identical
bytes, which is what makes rerun comparisons and thread-count invariance
checkable at the file level. Floats in text formats use ``repr``, the
shortest decimal string that round-trips the exact binary value.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .evaluation import AccuracyReport, ConfusionMatrix
from .fusion import SemanticPointCloud
from .geometry import CameraIntrinsics, DepthMap, PoseSE3
from .semantics import ClassTaxonomy


class DataFormatError(ValueError):
    """Malformed file content or unsupported layout."""


PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("class_id", "u1"), ("uncertainty", "<f4"),
])

_PLY_PROPERTIES = [
    ("float", "x"), ("float", "y"), ("float", "z"),
    ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
    ("uchar", "class_id"), ("float", "uncertainty"),
]


def write_ply(path, cloud: SemanticPointCloud) -> None:
    """Binary little-endian PLY with the fixed vertex layout."""
    rows = np.empty(len(cloud), dtype=PLY_DTYPE)
    rows["x"] = cloud.positions[:, 0]
    rows["y"] = cloud.positions[:, 1]
    rows["z"] = cloud.positions[:, 2]
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rows["red"] = rgb[:, 0]
    rows["green"] = rgb[:, 1]
    rows["blue"] = rgb[:, 2]
    rows["class_id"] = cloud.class_ids
    rows["uncertainty"] = cloud.uncertainties
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {t} {n}" for t, n in _PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def read_ply(path) -> SemanticPointCloud:
    """Read a PLY cloud in the fixed vertex layout, ASCII or binary."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise DataFormatError("not a PLY file")
    end = blob.index(b"\n", end) + 1
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    count = None
    properties = []
    in_vertex = False
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            properties.append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DataFormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise DataFormatError("PLY file has no vertex element")
    if properties != _PLY_PROPERTIES:
        raise DataFormatError("unexpected PLY vertex layout")

    if fmt == "binary_little_endian":
        body = blob[end:end + count * PLY_DTYPE.itemsize]
        if len(body) < count * PLY_DTYPE.itemsize:
            raise DataFormatError("PLY payload is truncated")
        rows = np.frombuffer(body, dtype=PLY_DTYPE, count=count)
    else:
        text = blob[end:].decode("ascii").split()
        if len(text) < count * 8:
            raise DataFormatError("PLY payload is truncated")
        flat = np.array(text[: count * 8], dtype=np.float64).reshape(count, 8)
        rows = np.empty(count, dtype=PLY_DTYPE)
        for i, (_, name) in enumerate(_PLY_PROPERTIES):
            rows[name] = flat[:, i]

    return SemanticPointCloud(
        np.column_stack([rows["x"], rows["y"], rows["z"]]).astype(np.float64),
        np.column_stack([rows["red"], rows["green"], rows["blue"]]) / 255.0,
        rows["class_id"].copy(),
        rows["uncertainty"].astype(np.float64),
    )


def write_pfm(path, depth: DepthMap) -> None:
    """Little-endian grayscale PFM; invalid pixels stored as zero."""
    values = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(values[::-1].tobytes())  # PFM rows run bottom to top


def read_pfm(path) -> DepthMap:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise DataFormatError("not a grayscale PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataFormatError("malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        data = f.read(w * h * 4)
    if len(data) < w * h * 4:
        raise DataFormatError("PFM payload is truncated")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(data, dtype=dtype).reshape(h, w)[::-1]
    return DepthMap.full(values.astype(np.float64))


def write_image(path, image: np.ndarray) -> None:
    """RGB PNG from a float image in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataFormatError("expected an (H, W, 3) image")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_label_png(path, labels: np.ndarray) -> None:
    """8-bit single-channel label image."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataFormatError("labels must be a 2-D array")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        return np.asarray(img, dtype=np.uint8).copy()


def write_rgb_png(path, array: np.ndarray) -> None:
    """PNG straight from a uint8 (H, W, 3) or (H, W) array."""
    arr = np.asarray(array, dtype=np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


PROB_GRID_MAGIC = b"BPG1"


def write_probability_grid(path, probabilities: np.ndarray) -> None:
    """Flat binary class-probability tensor with a one-line header."""
    probs = np.asarray(probabilities, dtype="<f4")
    if probs.ndim != 3:
        raise DataFormatError("probability grid must be (H, W, C)")
    h, w, c = probs.shape
    with open(path, "wb") as f:
        f.write(PROB_GRID_MAGIC + b"\n")
        f.write(f"{h} {w} {c}\n".encode("ascii"))
        f.write(probs.tobytes())


def read_probability_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != PROB_GRID_MAGIC:
            raise DataFormatError("not a probability grid file")
        dims = f.readline().split()
        if len(dims) != 3:
            raise DataFormatError("malformed probability grid header")
        h, w, c = (int(d) for d in dims)
        data = f.read(h * w * c * 4)
    if len(data) < h * w * c * 4:
        raise DataFormatError("probability grid payload is truncated")
    return np.frombuffer(data, dtype="<f4").reshape(h, w, c).astype(np.float64)


def write_trajectory_csv(path, poses) -> None:
    """One row per frame: rotation matrix entries then translation."""
    names = [f"r{i}{j}" for i in range(3) for j in range(3)]
    lines = ["frame," + ",".join(names) + ",tx,ty,tz"]
    for k, pose in enumerate(poses):
        cells = [str(k)]
        cells += [repr(float(v)) for v in pose.rotation.ravel()]
        cells += [repr(float(v)) for v in pose.translation]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_trajectory_csv(path):
    lines = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not lines or not lines[0].startswith("frame,"):
        raise DataFormatError("not a trajectory file")
    poses = []
    for expected, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != 13:
            raise DataFormatError("malformed trajectory row")
        if int(cells[0]) != expected:
            raise DataFormatError("trajectory frames must be consecutive")
        numbers = [float(c) for c in cells[1:]]
        poses.append(PoseSE3(np.array(numbers[:9]).reshape(3, 3),
                             np.array(numbers[9:])))
    return poses


def write_json(path, payload: dict) -> None:
    """Canonical JSON: sorted keys, stable float text, trailing newline."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_markers_json(path, ids, positions) -> None:
    positions = np.asarray(positions, dtype=np.float64)
    write_json(path, {
        "ids": [str(i) for i in ids],
        "positions": [[float(v) for v in p] for p in positions],
    })


def read_markers_json(path):
    data = read_json(path)
    return list(data["ids"]), np.asarray(data["positions"], dtype=np.float64)


def write_intrinsics_json(path, cam: CameraIntrinsics) -> None:
    write_json(path, {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    })


def read_intrinsics_json(path) -> CameraIntrinsics:
    d = read_json(path)
    return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                            width=int(d["width"]), height=int(d["height"]))


def save_taxonomy(path, taxonomy: ClassTaxonomy) -> None:
    Path(path).write_text(yaml.safe_dump(taxonomy.to_dict(), sort_keys=True),
                          encoding="utf-8")


def load_taxonomy(path) -> ClassTaxonomy:
    return ClassTaxonomy.from_dict(yaml.safe_load(Path(path).read_text(
        encoding="utf-8")))


def write_cover_csv(path, cover: np.ndarray, taxonomy: ClassTaxonomy) -> None:
    """Per-class cover fractions over occupied ortho cells."""
    if len(cover) != len(taxonomy):
        raise DataFormatError("one cover fraction per taxonomy class required")
    lines = ["class_id,class_name,cover_fraction"]
    for cid, name in enumerate(taxonomy.names):
        lines.append(f"{cid},{name},{repr(float(cover[cid]))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_metrics_csv(path, matrix: ConfusionMatrix,
                      report: AccuracyReport) -> None:
    """Per-class accuracy rows; classes absent from the truth print '-'."""
    names = matrix.class_names or [str(i) for i in range(len(matrix))]
    rows = ["class_id,class_name,truth_count,accuracy"]
    truth_counts = matrix.counts.sum(axis=1)
    for cid, name in enumerate(names):
        acc = report.per_class[cid]
        text = "-" if np.isnan(acc) else repr(float(acc))
        rows.append(f"{cid},{name},{int(truth_counts[cid])},{text}")
    rows.append(f"total,,{matrix.total},{repr(float(report.total))}")
    rows.append(f"mean_class,,,{repr(float(report.mean_class))}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="ascii")


def write_confusion_png(path, matrix: ConfusionMatrix) -> None:
    """Row-normalized confusion heat map with class names on the axes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = matrix.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, rows, out=np.zeros_like(counts),
                       where=rows > 0)
    names = matrix.class_names or [str(i) for i in range(len(matrix))]
    side = max(4.0, 0.45 * len(names))
    fig, ax = plt.subplots(figsize=(side + 1.5, side))
    image = ax.imshow(shares, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)
