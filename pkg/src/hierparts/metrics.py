"""Semantic and instance evaluation.

Per-class IoU and accuracy come from a confusion matrix over the level's
classes plus 0 (unlabeled). Classes without ground-truth voxels are
undefined (NaN) and left out of the means.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._validation import check_labels
from .instances import InstanceSet

AP_IOU_THRESHOLD = 0.5


@dataclass
class SemanticReport:
    classes: list[int]
    confusion: np.ndarray
    iou: dict[int, float]
    acc: dict[int, float]
    miou: float
    macc: float
    n_classes: int
    level: int | None = None
    names: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "classes": self.classes,
            "names": {str(c): n for c, n in self.names.items()},
            "iou": {str(c): _jsonable(v) for c, v in self.iou.items()},
            "acc": {str(c): _jsonable(v) for c, v in self.acc.items()},
            "miou": _jsonable(self.miou),
            "macc": _jsonable(self.macc),
            "n_classes": self.n_classes,
            "confusion": self.confusion.tolist(),
        }


def _jsonable(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def confusion_matrix(pred, gt, classes: Sequence[int]) -> tuple[np.ndarray, list[int]]:
    """Counts indexed ``[gt, pred]`` over ``[0] + sorted(classes)``."""
    axis = [0] + sorted(int(c) for c in classes if c != 0)
    gt = check_labels(gt, name="gt")
    pred = check_labels(pred, n=len(gt), name="pred")
    lut_keys = np.array(axis, dtype=np.int64)
    for name, arr in (("gt", gt), ("pred", pred)):
        unknown = np.setdiff1d(np.unique(arr), lut_keys)
        if unknown.size:
            raise ValueError(f"{name} labels outside the class set: {unknown.tolist()}")
    gi = np.searchsorted(lut_keys, gt)
    pi = np.searchsorted(lut_keys, pred)
    n = len(axis)
    cm = np.bincount(gi * n + pi, minlength=n * n).reshape(n, n)
    return cm, axis


def align_by_keys(src_keys, values, dst_keys):
    """Reorder per-voxel ``values`` from ``src_keys`` order to ``dst_keys`` order.

    Raises if the two key sets differ.
    """
    src = np.asarray(src_keys, dtype=np.int64).reshape(-1, 3)
    dst = np.asarray(dst_keys, dtype=np.int64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"key sets differ in size ({len(src)} vs {len(dst)})")
    s_order = np.lexsort(src.T[::-1])
    d_order = np.lexsort(dst.T[::-1])
    if not np.array_equal(src[s_order], dst[d_order]):
        raise ValueError("prediction and ground truth cover different voxel keys")
    out = np.empty_like(np.asarray(values))
    out[d_order] = np.asarray(values)[s_order]
    return out


def semantic_metrics(pred, gt, classes: Sequence[int], balanced_binary: bool = False,
                     level: int | None = None, names: Mapping[int, str] | None = None) -> SemanticReport:
    """Per-class IoU and accuracy plus their means over defined classes.

    Accuracy is per-class recall by default; ``balanced_binary`` switches to
    ``(recall + specificity) / 2`` of class-vs-rest.
    """
    cm, axis = confusion_matrix(pred, gt, classes)
    total = cm.sum()
    iou, acc = {}, {}
    for i, c in enumerate(axis[1:], start=1):
        tp = cm[i, i]
        fn = cm[i, :].sum() - tp
        fp = cm[:, i].sum() - tp
        if tp + fn == 0:
            iou[c] = acc[c] = float("nan")
            continue
        iou[c] = tp / (tp + fp + fn)
        recall = tp / (tp + fn)
        if balanced_binary:
            tn = total - tp - fn - fp
            spec = tn / (tn + fp) if tn + fp else 1.0
            acc[c] = (recall + spec) / 2.0
        else:
            acc[c] = recall
        iou[c], acc[c] = float(iou[c]), float(acc[c])
    defined = [c for c in iou if not math.isnan(iou[c])]
    miou = float(np.mean([iou[c] for c in defined])) if defined else float("nan")
    macc = float(np.mean([acc[c] for c in defined])) if defined else float("nan")
    return SemanticReport(axis[1:], cm, iou, acc, miou, macc, len(defined), level, dict(names or {}))


def hierarchical_summary(reports: Sequence) -> float:
    """Arithmetic mean of per-level mIoU."""
    if not reports:
        raise ValueError("need at least one level report")
    vals = [r.miou if isinstance(r, SemanticReport) else float(r) for r in reports]
    return float(sum(vals) / len(vals))


def voxel_iou(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    if len(tp) == 0:
        return 0.0
    ranks = np.arange(1, len(tp) + 1)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[0.0], tp / ranks])
    # precision envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * envelope[steps + 1]))


def greedy_match(preds, gts, iou_threshold: float):
    """Match predictions (confidence desc, then id) to gts of the same class.

    Returns ``[(pred, gt_or_None, iou)]`` in ranking order.
    """
    ranked = sorted(preds, key=lambda p: (-p.confidence, p.id))
    taken: set[int] = set()
    out = []
    for p in ranked:
        best, best_iou = None, -1.0
        for g in sorted(gts, key=lambda g: g.id):
            if g.id in taken or g.class_id != p.class_id:
                continue
            iou = voxel_iou(p.voxels, g.voxels)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            taken.add(best.id)
        out.append((p, best, best_iou if best is not None else 0.0))
    return out


@dataclass
class InstanceReport:
    ap: float
    precision: float
    recall: float
    mean_iou: float
    num_instances: int
    num_predictions: int
    per_class: dict[int, dict] = field(default_factory=dict)
    iou_threshold: float = AP_IOU_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "ap": _jsonable(self.ap), "precision": _jsonable(self.precision),
            "recall": _jsonable(self.recall), "mean_iou": _jsonable(self.mean_iou),
            "num_instances": self.num_instances, "num_predictions": self.num_predictions,
            "iou_threshold": self.iou_threshold,
            "per_class": {str(c): {k: _jsonable(v) if isinstance(v, float) else v for k, v in row.items()}
                          for c, row in self.per_class.items()},
        }


def instance_metrics(pred: InstanceSet, gt: InstanceSet, iou_threshold: float = AP_IOU_THRESHOLD) -> InstanceReport:
    """AP, precision and recall at ``iou_threshold``, per class and overall.

    Overall AP is the mean of per-class AP over classes with ground truth;
    precision and recall are pooled over all classes.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    pred, gt = list(pred), list(gt)
    classes = sorted({p.class_id for p in pred} | {g.class_id for g in gt})
    per_class = {}
    tp_total, ious = 0, []
    for c in classes:
        pc = [p for p in pred if p.class_id == c]
        gc = [g for g in gt if g.class_id == c]
        matches = greedy_match(pc, gc, iou_threshold)
        flags = [g is not None for _, g, _ in matches]
        tp = sum(flags)
        tp_total += tp
        ious += [iou for _, g, iou in matches if g is not None]
        per_class[c] = {
            "ap": average_precision(flags, len(gc)),
            "precision": tp / len(pc) if pc else float("nan"),
            "recall": tp / len(gc) if gc else float("nan"),
            "num_instances": len(gc),
            "num_predictions": len(pc),
        }
    aps = [row["ap"] for row in per_class.values() if row["num_instances"] > 0]
    return InstanceReport(
        ap=float(np.mean(aps)) if aps else float("nan"),
        precision=tp_total / len(pred) if pred else float("nan"),
        recall=tp_total / len(gt) if gt else float("nan"),
        mean_iou=float(np.mean(ious)) if ious else float("nan"),
        num_instances=len(gt),
        num_predictions=len(pred),
        per_class=per_class,
        iou_threshold=iou_threshold,
    )


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "---"
    return f"{100.0 * v:.1f}"


def report_table(reports: Mapping[str, SemanticReport]) -> str:
    """Aligned-column CSV: one row per class name, IoU/Acc per configuration, Mean last."""
    configs = list(reports)
    classes: list[int] = []
    names: dict[int, str] = {}
    for r in reports.values():
        for c in r.classes:
            if c not in classes:
                classes.append(c)
        names.update(r.names)
    header = ["Class"] + [f"{cfg} {m}" for cfg in configs for m in ("IoU", "Acc")]
    rows = [header]
    for c in classes:
        row = [names.get(c, str(c))]
        for cfg in configs:
            r = reports[cfg]
            row += [_cell(r.iou.get(c)), _cell(r.acc.get(c))]
        rows.append(row)
    rows.append(["Mean"] + [x for cfg in configs for x in (_cell(reports[cfg].miou), _cell(reports[cfg].macc))])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow([cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))])
    return buf.getvalue()


def dump_report(obj) -> str:
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(data, indent=1, sort_keys=True) + "\n"
