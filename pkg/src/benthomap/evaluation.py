"""Spatial and semantic accuracy metrics.

Spatial accuracy follows the marker protocol: a set of markers with
hand-measured pairwise distances, compared against the same distances taken
in the reconstructed cloud after a single global scale correction. Semantic
accuracy is the usual confusion-matrix apparatus, with unlabeled entries
excluded and classes absent from the ground truth left out of the class-mean,
reported as missing rather than zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .semantics import UNLABELED_ID, ClassTaxonomy


class EvaluationError(ValueError):
    """Degenerate metric input."""


@dataclass
class MarkerSet:
    """Markers with measured ground-truth distances over a subset of pairs.

    ``positions`` are the marker anchor coordinates expressed in the frame of
    the reconstruction under evaluation. ``pairs`` indexes unordered marker
    pairs whose true separation was measured; each pair appears once.
    """

    ids: list
    positions: np.ndarray
    pairs: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        n = self.positions.shape[0]
        if len(self.ids) != n:
            raise EvaluationError("one id per marker position is required")
        if self.pairs.shape[0] != self.distances.shape[0]:
            raise EvaluationError("one distance per measured pair is required")
        if len(self.pairs) and (self.pairs.min() < 0 or self.pairs.max() >= n):
            raise EvaluationError("pair indices must reference markers")
        if (self.pairs[:, 0] == self.pairs[:, 1]).any():
            raise EvaluationError("measured pairs must join distinct markers")
        seen = set()
        for a, b in self.pairs.tolist():
            key = (min(a, b), max(a, b))
            if key in seen:
                raise EvaluationError("each unordered pair may appear once")
            seen.add(key)
        if (self.distances <= 0).any():
            raise EvaluationError("measured distances must be positive")

    def estimated_distances(self) -> np.ndarray:
        """Pairwise distances of the estimated positions, pair order kept."""
        delta = self.positions[self.pairs[:, 0]] - self.positions[self.pairs[:, 1]]
        return np.linalg.norm(delta, axis=1)


def scale_normalize(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rescale estimated distances so their mean matches the true mean.

    The factor is mean(truth) / mean(estimated), which cancels any uniform
    scale error in the reconstruction before the relative error is taken.
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimated.size == 0 or truth.size == 0:
        raise EvaluationError("distance sets must be non-empty")
    if estimated.shape != truth.shape:
        raise EvaluationError("estimated and true distances must pair up")
    mean_est = float(estimated.mean())
    if mean_est == 0.0:
        raise EvaluationError("estimated distances have zero mean")
    return estimated * (float(truth.mean()) / mean_est)


def mean_abs_rel_error(estimated: np.ndarray, truth: np.ndarray) -> float:
    """Mean of |d - d_hat| / d over the measured pairs."""
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.size == 0:
        raise EvaluationError("distance sets must be non-empty")
    if estimated.shape != truth.shape:
        raise EvaluationError("estimated and true distances must pair up")
    if (truth <= 0).any():
        raise EvaluationError("true distances must be positive")
    return float(np.mean(np.abs(truth - estimated) / truth))


def marker_report(markers: MarkerSet) -> dict:
    """Scale-normalized marker evaluation as one summary dictionary."""
    raw = markers.estimated_distances()
    scaled = scale_normalize(raw, markers.distances)
    scale = float(markers.distances.mean() / raw.mean())
    return {
        "pair_count": int(len(markers.pairs)),
        "scale": scale,
        "mare": mean_abs_rel_error(scaled, markers.distances),
        "pairs": [
            {
                "marker_a": markers.ids[int(a)],
                "marker_b": markers.ids[int(b)],
                "true_distance": float(d),
                "estimated_distance": float(e),
                "scaled_distance": float(s),
            }
            for (a, b), d, e, s in zip(markers.pairs.tolist(),
                                       markers.distances, raw, scaled)
        ],
    }


@dataclass
class ConfusionMatrix:
    """C x C counts, row = ground-truth class, column = prediction."""

    counts: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise EvaluationError("confusion counts must be square")
        if (self.counts < 0).any():
            raise EvaluationError("confusion counts must be non-negative")
        if self.class_names and len(self.class_names) != self.counts.shape[0]:
            raise EvaluationError("one name per class is required")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __len__(self):
        return self.counts.shape[0]


def confusion(pred, truth, taxonomy: ClassTaxonomy) -> ConfusionMatrix:
    """Count (truth, prediction) pairs, skipping unlabeled entries.

    Accepts flat vectors or label maps of matching shape; an element is
    evaluated only when both its prediction and its ground truth carry a
    real class id.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvaluationError("prediction and truth shapes must match")
    pred = pred.ravel().astype(np.int64)
    truth = truth.ravel().astype(np.int64)
    keep = (pred != UNLABELED_ID) & (truth != UNLABELED_ID)
    pred = pred[keep]
    truth = truth[keep]
    c = len(taxonomy)
    if len(pred) and (pred.min() < 0 or pred.max() >= c
                      or truth.min() < 0 or truth.max() >= c):
        raise EvaluationError("labels carry ids outside the taxonomy")
    counts = np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(counts, class_names=list(taxonomy.names))


def group_matrix(matrix: ConfusionMatrix, taxonomy: ClassTaxonomy,
                 grouping: str) -> ConfusionMatrix:
    """Summarize a confusion matrix into a taxonomy grouping.

    Rows and columns whose classes share a group are summed, so the result
    equals building the confusion from group_labels output directly.
    """
    group_names, id_to_group = taxonomy.group_mapping(grouping)
    if len(matrix) != len(id_to_group):
        raise EvaluationError("matrix size does not match the taxonomy")
    g = len(group_names)
    one_hot = np.zeros((g, len(id_to_group)), dtype=np.int64)
    one_hot[id_to_group, np.arange(len(id_to_group))] = 1
    grouped = one_hot @ matrix.counts @ one_hot.T
    return ConfusionMatrix(grouped, class_names=list(group_names))


@dataclass
class AccuracyReport:
    """Total, class-mean, and per-class accuracy.

    ``per_class`` holds NaN for classes without ground-truth samples; those
    classes do not enter the class-mean and are rendered as missing in
    reports.
    """

    total: float
    mean_class: float
    per_class: np.ndarray


def accuracies(matrix: ConfusionMatrix) -> AccuracyReport:
    counts = matrix.counts
    total_count = counts.sum()
    if total_count == 0:
        raise EvaluationError("accuracy is undefined on an empty matrix")
    row_sums = counts.sum(axis=1)
    present = row_sums > 0
    per_class = np.full(len(matrix), np.nan)
    per_class[present] = np.diag(counts)[present] / row_sums[present]
    return AccuracyReport(
        total=float(np.trace(counts) / total_count),
        mean_class=float(per_class[present].mean()),
        per_class=per_class,
    )
