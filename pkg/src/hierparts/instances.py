"""Flat-kernel mean-shift over voxel embeddings and instance extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_embeddings, check_labels

MIN_CONFIDENCE = 0.25
_CHUNK = 512


@dataclass(frozen=True)
class MeanShiftParams:
    bandwidth: float = 0.75
    max_iters: int = 300
    shift_eps: float = 1e-6
    merge_radius: float | None = None  # defaults to bandwidth / 2

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.merge_radius is not None and self.merge_radius > self.bandwidth:
            raise ValueError("merge_radius must not exceed bandwidth")

    @property
    def radius(self) -> float:
        return self.bandwidth / 2 if self.merge_radius is None else self.merge_radius


def _canonical_order(keys: np.ndarray) -> np.ndarray:
    if keys.ndim == 1:
        return np.argsort(keys, kind="stable")
    return np.lexsort(keys.T[::-1])


def mean_shift(emb, params: MeanShiftParams | None = None, keys=None, return_modes: bool = False):
    """Cluster embeddings by flat-kernel mean-shift.

    Every point seeds a trajectory ``x <- mean(points within bandwidth of x)``
    until the shift drops below ``shift_eps``. Modes closer than the merge
    radius are merged, visiting modes by descending support and then
    lexicographically, so the result does not depend on input order.

    Cluster ids are dense from 1, numbered by each cluster's smallest member
    key (``keys`` rows, default the input index).
    """
    p = params or MeanShiftParams()
    X = check_embeddings(emb)
    n = len(X)
    # identical rows share a trajectory; shift the distinct rows, weighted by multiplicity
    U, inverse, weight = np.unique(X, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    tree = cKDTree(U)
    modes = U.copy()
    active = np.ones(len(U), dtype=bool)
    for _ in range(p.max_iters):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        for chunk in np.array_split(idx, max(1, len(idx) // _CHUNK)):
            for i, nb in zip(chunk, tree.query_ball_point(modes[chunk], p.bandwidth)):
                nb = np.sort(nb)
                new = weight[nb] @ U[nb] / weight[nb].sum()
                if np.linalg.norm(new - modes[i]) < p.shift_eps:
                    active[i] = False
                modes[i] = new

    support = np.concatenate([
        [weight[nb].sum() for nb in tree.query_ball_point(modes[chunk], p.bandwidth)]
        for chunk in np.array_split(np.arange(len(U)), max(1, len(U) // _CHUNK))])
    order = np.lexsort(tuple(modes.T[::-1]) + (-support,))
    centers: list[np.ndarray] = []
    unique_cluster = np.empty(len(U), dtype=np.int64)
    for i in order:
        for c, ctr in enumerate(centers):
            if np.linalg.norm(modes[i] - ctr) <= p.radius:
                unique_cluster[i] = c
                break
        else:
            unique_cluster[i] = len(centers)
            centers.append(modes[i])
    mode_cluster = unique_cluster[inverse]

    keys = np.arange(n) if keys is None else np.asarray(keys)
    first_seen: dict[int, int] = {}
    for i in _canonical_order(keys):
        first_seen.setdefault(int(mode_cluster[i]), len(first_seen) + 1)
    labels = np.array([first_seen[int(c)] for c in mode_cluster], dtype=np.int64)
    if return_modes:
        ordered = np.array([centers[c] for c in sorted(first_seen, key=first_seen.get)])
        return labels, ordered
    return labels


class MeanShiftClustering(ClusterMixin, BaseEstimator):
    """scikit-learn style wrapper; ``labels_`` are 1-based cluster ids."""

    def __init__(self, bandwidth=0.75, max_iters=300, shift_eps=1e-6, merge_radius=None):
        self.bandwidth = bandwidth
        self.max_iters = max_iters
        self.shift_eps = shift_eps
        self.merge_radius = merge_radius

    def fit(self, X, y=None):
        params = MeanShiftParams(self.bandwidth, self.max_iters, self.shift_eps, self.merge_radius)
        self.labels_, self.cluster_centers_ = mean_shift(X, params, return_modes=True)
        self.n_clusters_ = len(self.cluster_centers_)
        return self

    def predict(self, X):
        """Assign new embeddings to the nearest cluster center."""
        X = check_embeddings(X)
        d = np.linalg.norm(X[:, None, :] - self.cluster_centers_[None], axis=2)
        return np.argmin(d, axis=1) + 1


@dataclass(frozen=True)
class Instance:
    id: int
    class_id: int
    confidence: float
    voxels: frozenset = field(default_factory=frozenset)


@dataclass(frozen=True)
class InstanceSet:
    instances: tuple[Instance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(sorted(self.instances, key=lambda i: i.id)))
        seen: set = set()
        for inst in self.instances:
            if not np.isfinite(inst.confidence):
                raise ValueError(f"instance {inst.id} has non-finite confidence")
            if seen & inst.voxels:
                raise ValueError(f"instance {inst.id} overlaps another instance")
            seen |= inst.voxels

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)


def _as_keys(keys, n):
    if keys is None:
        return [(i,) for i in range(n)]
    arr = np.asarray(keys)
    if arr.ndim == 1:
        return [(int(v),) for v in arr]
    return [tuple(int(v) for v in row) for row in arr]


def extract_instances(clusters, sem_labels, min_confidence: float = MIN_CONFIDENCE, keys=None) -> InstanceSet:
    """Turn clusters into labeled instances, dropping low-purity ones.

    Class is the majority semantic label (ties: smallest id); confidence is
    the fraction of the cluster's voxels carrying it. Clusters whose
    majority label is 0 (background) are not instances.
    """
    clusters = check_labels(clusters, name="clusters")
    sem = check_labels(sem_labels, n=len(clusters), name="sem_labels")
    key_list = _as_keys(keys, len(clusters))
    out = []
    for cid in np.unique(clusters):
        rows = np.flatnonzero(clusters == cid)
        classes, counts = np.unique(sem[rows], return_counts=True)
        best = int(np.argmax(counts))  # first max is the smallest class id
        cls, conf = int(classes[best]), counts[best] / len(rows)
        if cls == 0 or conf < min_confidence:
            continue
        out.append((cls, float(conf), frozenset(key_list[r] for r in rows)))
    return InstanceSet(tuple(Instance(i, c, conf, vox) for i, (c, conf, vox) in enumerate(out, start=1)))


def instances_from_labels(instance_ids, class_labels, keys=None) -> InstanceSet:
    """Ground-truth instances: one per positive instance id, confidence 1."""
    ids = check_labels(instance_ids, name="instance_ids")
    cls = check_labels(class_labels, n=len(ids), name="class_labels")
    key_list = _as_keys(keys, len(ids))
    out = []
    for iid in np.unique(ids[ids > 0]):
        rows = np.flatnonzero(ids == iid)
        classes, counts = np.unique(cls[rows], return_counts=True)
        out.append(Instance(int(iid), int(classes[np.argmax(counts)]), 1.0,
                            frozenset(key_list[r] for r in rows)))
    return InstanceSet(tuple(out))
