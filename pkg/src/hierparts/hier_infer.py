"""Flat, bottom-up and top-down label inference over a part taxonomy.

Score arrays are ``(N, C)`` with columns ordered by ascending class id, the
order returned by :func:`~hierparts.taxonomy.level_classes`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_labels
from .taxonomy import PartTaxonomy, level_classes


def _scores(scores, classes=None) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2:
        raise ValueError("scores must be a 2-D (voxels x classes) array")
    if classes is not None and s.shape[1] != len(classes):
        raise ValueError(f"scores have {s.shape[1]} columns for {len(classes)} classes")
    return s


def flat_predict(scores, classes: Sequence[int] | None = None) -> np.ndarray:
    """Per-voxel argmax. Ties resolve to the smallest class id.

    Returns class ids from ``classes`` or, without it, column indices.
    """
    s = _scores(scores, classes)
    # np.argmax returns the first maximum, i.e. the smallest id for ascending columns
    col = np.argmax(s, axis=1)
    if classes is None:
        return col
    return np.asarray(classes, dtype=np.int64)[col]


def aggregate_to_level(probs, from_classes: Sequence[int], tax: PartTaxonomy, k: int):
    """Sum probability columns that share a level-``k`` ancestor.

    Returns ``(probs_k, classes_k)``.
    """
    p = _scores(probs, from_classes)
    targets = [tax.project(c, k) for c in from_classes]
    classes_k = sorted(set(targets))
    col = {c: i for i, c in enumerate(classes_k)}
    out = np.zeros((len(p), len(classes_k)))
    for j, t in enumerate(targets):
        out[:, col[t]] += p[:, j]
    return out, classes_k


def bottom_up_project(leaf_probs, tax: PartTaxonomy, k: int, leaf_classes: Sequence[int] | None = None,
                      atol: float = 1e-6) -> np.ndarray:
    """Level-``k`` class probabilities from leaf probabilities.

    ``leaf_probs`` columns follow ``leaf_classes`` (default: all leaves,
    ascending). Output columns follow ``level_classes(tax, k)``.
    """
    leaf_classes = tax.leaves if leaf_classes is None else list(leaf_classes)
    p = _scores(leaf_probs, leaf_classes)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise ValueError("leaf probabilities must be non-negative and sum to 1 per voxel")
    out, classes_k = aggregate_to_level(p, leaf_classes, tax, k)
    expected = level_classes(tax, k)
    if classes_k != expected:
        # leaves missing from the columns still own a (zero) column
        full = np.zeros((len(p), len(expected)))
        idx = {c: i for i, c in enumerate(expected)}
        for j, c in enumerate(classes_k):
            full[:, idx[c]] = out[:, j]
        out = full
    return out


def children_mask(tax: PartTaxonomy, k: int, parents: Sequence[int]) -> np.ndarray:
    """Boolean ``(len(parents), C_k)``: level-k classes under each parent."""
    classes_k = level_classes(tax, k)
    parent_of = np.array([tax.project(c, k - 1) for c in classes_k], dtype=np.int64)
    return parent_of[None, :] == np.asarray(parents, dtype=np.int64)[:, None]


def top_down_predict(cond_scores, gt_parent, tax: PartTaxonomy, k: int, return_probs: bool = False):
    """Level-``k`` labels with each voxel restricted to children of its parent label.

    A parent that is already a leaf has itself as its only level-``k``
    candidate, so the parent id is carried down. Voxels whose parent is 0
    predict 0.
    """
    if k < 2:
        raise ValueError("top-down prediction needs k >= 2")
    classes_k = level_classes(tax, k)
    s = _scores(cond_scores, classes_k)
    parents = check_labels(gt_parent, n=len(s), name="gt_parent")
    valid_parents = set(level_classes(tax, k - 1))
    bad = set(np.unique(parents).tolist()) - valid_parents - {0}
    if bad:
        raise ValueError(f"parent labels not at level {k - 1}: {sorted(bad)}")
    mask = children_mask(tax, k, parents)
    masked = np.where(mask, s, -np.inf)
    col = np.argmax(masked, axis=1)
    labels = np.asarray(classes_k, dtype=np.int64)[col]
    labels[parents == 0] = 0
    if not return_probs:
        return labels
    kept = np.where(mask, np.clip(s, 0.0, None), 0.0)
    total = kept.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(total > 0, kept / total, mask / np.maximum(mask.sum(axis=1, keepdims=True), 1))
    probs[parents == 0] = 0.0
    return labels, probs


def top_down_chain(level_scores: Sequence, tax: PartTaxonomy) -> list[np.ndarray]:
    """Top-down inference that feeds each level's prediction to the next.

    Unlike :func:`top_down_predict` this needs no ground truth; level 1 is
    a flat argmax.
    """
    preds = [flat_predict(level_scores[0], level_classes(tax, 1))]
    for k in range(2, len(level_scores) + 1):
        preds.append(top_down_predict(level_scores[k - 1], preds[-1], tax, k))
    return preds


class HierarchicalLabeler(ClassifierMixin, BaseEstimator):
    """Predict labels at every level from per-level or leaf score fields.

    ``strategy`` is ``"flat"`` (argmax per level), ``"bottom_up"`` (sum
    leaf probabilities up the taxonomy) or ``"top_down"`` (chained
    predicted-parent masking). ``predict`` takes a list of score arrays,
    one per level, or for ``bottom_up`` a single leaf-probability array.
    """

    def __init__(self, taxonomy: PartTaxonomy | None = None, strategy: str = "flat", levels: int = 3):
        self.taxonomy = taxonomy
        self.strategy = strategy
        self.levels = levels

    def fit(self, X=None, y=None):
        if self.taxonomy is None:
            raise ValueError("HierarchicalLabeler needs a taxonomy")
        if self.strategy not in ("flat", "bottom_up", "top_down"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.classes_ = [np.asarray(level_classes(self.taxonomy, k)) for k in range(1, self.levels + 1)]
        return self

    def predict(self, X) -> list[np.ndarray]:
        if not hasattr(self, "classes_"):
            self.fit()
        tax = self.taxonomy
        if self.strategy == "bottom_up":
            leaf = X if not isinstance(X, (list, tuple)) else X[-1]
            return [flat_predict(bottom_up_project(leaf, tax, k), self.classes_[k - 1])
                    for k in range(1, self.levels + 1)]
        if self.strategy == "top_down":
            return top_down_chain(X, tax)
        return [flat_predict(s, c) for s, c in zip(X, self.classes_)]

    def score(self, X, y, sample_weight=None):
        """Mean over levels of voxel accuracy."""
        preds = self.predict(X)
        return float(np.mean([np.mean(p == np.asarray(t)) for p, t in zip(preds, y)]))
