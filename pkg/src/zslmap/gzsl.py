"""Generalized zero-shot learning over the joint seen + unseen label space.

One category-specific mapping is learned for every target category, seen
and unseen alike, so that test instances of either kind can be scored
against all categories. Seen categories tend to dominate such joint
scores; calibrated stacking subtracts a threshold from the seen columns
before the argmax, and the threshold is chosen on a validation set by
sweeping it and tracing seen vs unseen accuracy.

Joint label indices put the seen categories first: column ``j < C_s`` is
seen category ``j`` and column ``C_s + c`` is unseen category ``c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from zslmap.aezsl import AezslModel, _freeze_model, build_similarity, fit_mappings
from zslmap.errors import DatasetError, DimensionError
from zslmap.matio import ZslDataset, validation_problem

DEFAULT_GRID_SIZE = 101


def joint_semantics(dataset: ZslDataset) -> np.ndarray:
    return np.hstack([dataset.seen_semantics, dataset.unseen_semantics])


def seen_mask_for(dataset: ZslDataset) -> np.ndarray:
    return np.arange(dataset.n_seen_classes + dataset.n_unseen_classes) < dataset.n_seen_classes


def fit_aezsl_gzsl(
    dataset: ZslDataset,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
    max_sweeps: int = 100,
    tol: float = 1e-6,
    **kwargs,
) -> AezslModel:
    """Fit ``C_s + C_t`` category-specific mappings, seen categories first.

    Every target category is weighted against all seen categories by cosine
    similarity, so a seen category's weight vector has a 1 at itself.
    """
    targets = joint_semantics(dataset)
    weights = build_similarity(dataset.seen_semantics, targets)
    mappings, trace, updates, sweeps, converged = fit_mappings(
        dataset.seen_features,
        dataset.seen_labels,
        dataset.seen_semantics,
        weights.values,
        lambda1,
        lambda2,
        lambda3,
        max_sweeps=max_sweeps,
        tol=tol,
        **kwargs,
    )
    return _freeze_model(mappings, targets, lambda1, lambda2, lambda3, trace, updates, sweeps, converged)


def _check_mask(scores: np.ndarray, seen_mask) -> np.ndarray:
    seen_mask = np.asarray(seen_mask, dtype=bool).ravel()
    if scores.ndim != 2 or seen_mask.size != scores.shape[1]:
        raise DimensionError(
            f"seen mask of length {seen_mask.size} does not match scores of shape {scores.shape}"
        )
    return seen_mask


def calibrated_stack(scores, seen_mask, gamma_cal: float) -> np.ndarray:
    """Row argmax after subtracting ``gamma_cal`` from the seen columns (ties to the lowest index)."""
    scores = np.asarray(scores, dtype=np.float64)
    seen_mask = _check_mask(scores, seen_mask)
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(scores - gamma_cal * seen_mask, axis=1)


def split_accuracies(predicted, labels, seen_mask) -> tuple[float, float]:
    """Accuracy on instances of seen categories and on instances of unseen categories."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    on_seen = seen_mask[labels]
    hits = predicted == labels
    seen_acc = float(hits[on_seen].mean()) if on_seen.any() else math.nan
    unseen_acc = float(hits[~on_seen].mean()) if (~on_seen).any() else math.nan
    return seen_acc, unseen_acc


def score_gaps(scores, seen_mask) -> np.ndarray:
    """Per-row ``max seen score - max unseen score``: the threshold at which each row flips."""
    scores = np.asarray(scores, dtype=np.float64)
    seen_mask = _check_mask(scores, seen_mask)
    if seen_mask.all() or not seen_mask.any():
        raise DatasetError("calibration needs both seen and unseen columns")
    return scores[:, seen_mask].max(axis=1) - scores[:, ~seen_mask].max(axis=1)


def default_grid(scores, seen_mask, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    gaps = score_gaps(scores, seen_mask)
    return np.linspace(gaps.min(), gaps.max(), size)


def ausuc(curve) -> float:
    """Area under the seen/unseen accuracy curve.

    The points are sorted by seen accuracy (unseen accuracy descending on
    ties) after adding ``(0, max unseen)`` and ``(max seen, 0)``, then
    integrated with the trapezoid rule.
    """
    pts = np.asarray(curve, dtype=np.float64).reshape(-1, 2)
    if pts.size == 0:
        return 0.0
    ends = np.array([[0.0, pts[:, 1].max()], [pts[:, 0].max(), 0.0]])
    pts = np.vstack([pts, ends])
    order = np.lexsort((-pts[:, 1], pts[:, 0]))
    pts = pts[order]
    area = np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0)
    return float(area)


@dataclass(frozen=True)
class CalibrationResult:
    gamma_cal: float
    ausuc: float
    curve: tuple  # (seen accuracy, unseen accuracy) per grid value, grid order
    grid: tuple

    @property
    def operating_point(self) -> tuple[float, float]:
        return self.curve[self.grid.index(self.gamma_cal)]


def select_gamma_ausuc(val_scores, val_labels, seen_mask, grid=None) -> CalibrationResult:
    """Sweep the calibration threshold over ``grid`` and pick the best operating point.

    The chosen threshold maximises ``seen accuracy * unseen accuracy``;
    among equal products the smallest threshold wins. ``grid`` defaults to
    101 evenly spaced values between the smallest and largest per-row score
    gap.
    """
    scores = np.asarray(val_scores, dtype=np.float64)
    labels = np.asarray(val_labels, dtype=np.int64).ravel()
    seen_mask = _check_mask(scores, seen_mask)
    if labels.size != scores.shape[0]:
        raise DimensionError(f"{labels.size} labels for {scores.shape[0]} score rows")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise DimensionError("validation label out of range")
    on_seen = seen_mask[labels]
    if not on_seen.any() or on_seen.all():
        raise DatasetError("validation set must contain instances of both seen and unseen categories")

    if grid is None:
        grid = default_grid(scores, seen_mask)
    grid = [float(g) for g in np.asarray(grid, dtype=np.float64).ravel()]
    if not grid:
        raise ValueError("calibration grid is empty")

    curve = []
    for g in grid:
        curve.append(split_accuracies(calibrated_stack(scores, seen_mask, g), labels, seen_mask))
    best = max(range(len(grid)), key=lambda i: (curve[i][0] * curve[i][1], -grid[i]))
    return CalibrationResult(
        gamma_cal=grid[best], ausuc=ausuc(curve), curve=tuple(curve), grid=tuple(grid)
    )


# --------------------------------------------------------------------------
# Seen-instance holdout and threshold calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GzslSplit:
    """Training problem plus a joint test set drawn from both sides.

    ``test_labels`` are joint indices (``-1`` where an unseen instance has
    no known label).
    """

    train: ZslDataset
    test_features: np.ndarray
    test_labels: np.ndarray
    seen_mask: np.ndarray
    holdout: float


def gzsl_split(dataset: ZslDataset, holdout_fraction: float = 0.2) -> GzslSplit:
    """Hold out the last ``ceil(fraction * n_c)`` instances of each seen category.

    At least one instance per category stays in training. The joint test set
    is the held-out seen instances (in original order) followed by every
    unseen instance.
    """
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    y = dataset.seen_label_indices
    test = np.zeros(y.size, dtype=bool)
    for c in range(dataset.n_seen_classes):
        idx = np.flatnonzero(y == c)
        n_out = min(math.ceil(holdout_fraction * idx.size), idx.size - 1)
        if n_out > 0:
            test[idx[idx.size - n_out:]] = True
    train = ZslDataset(
        seen_features=dataset.seen_features[:, ~test],
        seen_labels=dataset.seen_labels[~test],
        seen_semantics=dataset.seen_semantics,
        unseen_features=dataset.unseen_features,
        unseen_semantics=dataset.unseen_semantics,
        seen_categories=dataset.seen_categories,
        unseen_categories=dataset.unseen_categories,
        unseen_labels=dataset.unseen_labels,
        name=dataset.name,
    )
    unseen_y = dataset.unseen_label_indices
    if unseen_y is None:
        unseen_y = np.full(dataset.n_unseen, -1 - dataset.n_seen_classes)
    labels = np.concatenate([y[test], unseen_y + dataset.n_seen_classes])
    features = np.hstack([dataset.seen_features[:, test], dataset.unseen_features])
    return GzslSplit(
        train=train,
        test_features=features,
        test_labels=labels,
        seen_mask=seen_mask_for(dataset),
        holdout=float(holdout_fraction),
    )


def calibrate_threshold(
    dataset: ZslDataset,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
    holdout_fraction: float = 0.2,
    grid=None,
    **kwargs,
) -> CalibrationResult:
    """Choose the stacking threshold without touching ``dataset``'s unseen data.

    The first seen categories play the unseen role (the usual validation
    split) and part of the remaining seen instances is held out, giving a
    validation set with both kinds of instance.
    """
    inner = gzsl_split(validation_problem(dataset), holdout_fraction)
    model = fit_aezsl_gzsl(inner.train, lambda1, lambda2, lambda3, **kwargs)
    scores = inner.test_features.T @ model.classifiers
    return select_gamma_ausuc(scores, inner.test_labels, inner.seen_mask, grid)

