"""Sparse truncated-distance voxel scenes and mesh label transfer.

Voxel ``(i, j, k)`` is the cube ``origin + [i, i+1) * res`` (likewise for
j, k); its center sits half a voxel further. The stored distance is the
unsigned distance from the voxel center to the nearest surface, clamped to
the truncation band.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .align import AffineTransform
from .taxonomy import PartTaxonomy, UnknownLabelError

RESOLUTIONS = (0.02, 0.05)
DEFAULT_RESOLUTION = 0.05

_INT_FIELDS = ("leaf_label", "instance_id", "object_id")
_BATCH_POINTS = 1 << 18


@dataclass(frozen=True)
class LabeledMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_labels: np.ndarray
    instance_id: int = 0
    object_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        lab = np.asarray(self.vertex_labels, dtype=np.int64).reshape(-1)
        if len(lab) != len(v):
            raise ValueError("vertex_labels must have one entry per vertex")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "vertex_labels", lab)

    def transformed(self, t) -> "LabeledMesh":
        return replace(self, vertices=t.apply(self.vertices))


@dataclass(frozen=True)
class VoxelScene:
    """Sparse voxel grid; entries are rows of parallel arrays sorted by key."""

    resolution: float
    origin: np.ndarray
    truncation: float
    keys: np.ndarray
    tsdf: np.ndarray
    leaf_label: np.ndarray
    instance_id: np.ndarray
    object_id: np.ndarray
    color: np.ndarray | None = field(default=None)

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        n = len(keys)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        keys = keys[order]
        if n > 1 and np.any(np.all(keys[1:] == keys[:-1], axis=1)):
            raise ValueError("duplicate voxel keys")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "truncation", float(self.truncation))
        tsdf = np.asarray(self.tsdf, dtype=float).reshape(-1)[order]
        object.__setattr__(self, "tsdf", tsdf)
        for name in _INT_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if len(arr) != n:
                raise ValueError(f"{name} length does not match key count")
            object.__setattr__(self, name, arr[order])
        if self.color is not None:
            col = np.asarray(self.color, dtype=np.uint8).reshape(-1, 3)[order]
            object.__setattr__(self, "color", col)
        if np.any(np.abs(tsdf) > self.truncation):
            raise ValueError("tsdf exceeds truncation")
        if np.any((self.instance_id > 0) & (self.leaf_label == 0)):
            raise ValueError("instance ids require a leaf label")

    @classmethod
    def empty(cls, resolution, origin=(0.0, 0.0, 0.0), truncation=None):
        z = np.zeros(0, dtype=np.int64)
        return cls(resolution, origin, truncation or resolution, np.zeros((0, 3), np.int64),
                   np.zeros(0), z, z, z)

    def __len__(self):
        return len(self.keys)

    def subset(self, mask) -> "VoxelScene":
        mask = np.asarray(mask)
        return replace(
            self,
            keys=self.keys[mask], tsdf=self.tsdf[mask],
            leaf_label=self.leaf_label[mask], instance_id=self.instance_id[mask],
            object_id=self.object_id[mask],
            color=None if self.color is None else self.color[mask],
        )

    def with_labels(self, leaf_label=None, instance_id=None, object_id=None) -> "VoxelScene":
        return replace(
            self,
            leaf_label=self.leaf_label if leaf_label is None else leaf_label,
            instance_id=self.instance_id if instance_id is None else instance_id,
            object_id=self.object_id if object_id is None else object_id,
        )

    def centers(self) -> np.ndarray:
        return self.origin + (self.keys + 0.5) * self.resolution

    def key_index(self) -> dict[tuple, int]:
        return {tuple(k): i for i, k in enumerate(self.keys.tolist())}

    def point_keys(self, points) -> np.ndarray:
        return np.floor((np.asarray(points, float) - self.origin) / self.resolution).astype(np.int64)


def closest_point_distance(points: np.ndarray, a, b, c) -> np.ndarray:
    """Distance from each point to triangle ``abc`` (region classification).

    ``a``, ``b``, ``c`` are single vertices or per-point ``(N, 3)`` arrays.
    """
    p = np.asarray(points, dtype=float)
    a, b, c = (np.asarray(x, dtype=float) for x in (a, b, c))
    ab, ac = b - a, c - a

    def dot(x, y):
        return np.sum(x * y, axis=-1)

    ap = p - a
    d1, d2 = dot(ap, ab), dot(ap, ac)
    bp = p - b
    d3, d4 = dot(bp, ab), dot(bp, ac)
    cp = p - c
    d5, d6 = dot(cp, ab), dot(cp, ac)

    out = np.empty((len(p), 3))
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done |= m

    put((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, out.shape))
    put((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, out.shape))
    put((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, out.shape))
    with np.errstate(divide="ignore", invalid="ignore"):
        vc = d1 * d4 - d3 * d2
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        vb = d5 * d2 - d1 * d6
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        va = d3 * d6 - d5 * d4
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(p - out, axis=1)


def voxelize_mesh(mesh: LabeledMesh | list, resolution: float = DEFAULT_RESOLUTION,
                  truncation: float | None = None, origin=(0.0, 0.0, 0.0)) -> VoxelScene:
    """Voxels whose centers lie within ``truncation`` of the mesh surface.

    ``mesh`` may be a single mesh or a list of meshes already placed in
    scene coordinates. Labels are left at 0.
    """
    meshes = mesh if isinstance(mesh, (list, tuple)) else [mesh]
    truncation = resolution if truncation is None else truncation
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if truncation < resolution:
        raise ValueError("truncation must be at least one voxel")
    if not meshes or all(len(m.triangles) == 0 for m in meshes):
        raise ValueError("cannot voxelize an empty mesh")
    origin = np.asarray(origin, dtype=float)

    tris = np.concatenate([m.vertices[m.triangles] for m in meshes if len(m.triangles)])
    lo = np.floor((tris.min(axis=1) - truncation - origin) / resolution - 0.5).astype(np.int64)
    hi = np.ceil((tris.max(axis=1) + truncation - origin) / resolution - 0.5).astype(np.int64)
    shape = hi - lo + 1
    all_keys, all_d = [], []
    # triangles sharing a candidate-window shape are evaluated together
    shapes, group = np.unique(shape, axis=0, return_inverse=True)
    for g, win in enumerate(shapes):
        offsets = np.stack(np.meshgrid(*[np.arange(n) for n in win], indexing="ij"), -1).reshape(-1, 3)
        members = np.flatnonzero(group.ravel() == g)
        chunk = max(1, _BATCH_POINTS // len(offsets))
        for s in range(0, len(members), chunk):
            t = members[s:s + chunk]
            grid = (lo[t][:, None, :] + offsets[None]).reshape(-1, 3)
            rep = np.repeat(tris[t], len(offsets), axis=0)
            d = closest_point_distance(origin + (grid + 0.5) * resolution, rep[:, 0], rep[:, 1], rep[:, 2])
            near = d <= truncation
            all_keys.append(grid[near])
            all_d.append(d[near])

    keys = np.concatenate(all_keys)
    dist = np.concatenate(all_d)
    order = np.lexsort((dist, keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, dist = keys[order], dist[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    keys, tsdf = keys[first], np.minimum(dist[first], truncation)
    z = np.zeros(len(keys), dtype=np.int64)
    return VoxelScene(resolution, origin, truncation, keys, tsdf, z, z, z)


def _face_samples(mesh: LabeledMesh, resolution: float, density: float = 4.0):
    """Regular barycentric lattice on each face, ~``density`` points per voxel face area."""
    pts, labels = [], []
    for tri in mesh.triangles:
        a, b, c = mesh.vertices[tri]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
        n = max(1, int(np.ceil(np.sqrt(2.0 * density * area) / resolution)))
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = ii + jj <= n
        u, v = ii[keep] / n, jj[keep] / n
        pts.append(a + u[:, None] * (b - a) + v[:, None] * (c - a))
        # nearest corner's label
        w = np.stack([1 - u - v, u, v], axis=1)
        labels.append(mesh.vertex_labels[tri][np.argmax(w, axis=1)])
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, np.int64)
    return np.concatenate(pts), np.concatenate(labels)


def _majority_votes(keys_idx, label, instance, obj):
    """Per voxel index: (label, instance, object) winning the vote.

    Votes are counted per (instance, label) pair; ties go to the smallest
    label, then the smallest instance id.
    """
    if len(keys_idx) == 0:
        return {}
    rows = np.stack([keys_idx, label, instance, obj], axis=1)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    # sort: voxel asc, count desc, label asc, instance asc
    order = np.lexsort((uniq[:, 2], uniq[:, 1], -counts, uniq[:, 0]))
    uniq = uniq[order]
    first = np.ones(len(uniq), dtype=bool)
    first[1:] = uniq[1:, 0] != uniq[:-1, 0]
    return {int(r[0]): (int(r[1]), int(r[2]), int(r[3])) for r in uniq[first]}


def transfer_labels(scene: VoxelScene, meshes, transforms=None, sample_faces: bool = False) -> VoxelScene:
    """Label occupied voxels by majority vote of the mesh vertices inside them.

    ``meshes`` is one mesh or a list; ``transforms`` maps each into scene
    coordinates (identity when omitted). Voxels that receive no vertex keep
    label 0 unless ``sample_faces`` adds face samples as a fallback.
    """
    if isinstance(meshes, LabeledMesh):
        meshes = [meshes]
        transforms = None if transforms is None else [transforms]
    if transforms is None:
        transforms = [AffineTransform()] * len(meshes)
    index = scene.key_index()

    def gather(points_and_labels):
        vox, lab, inst, obj = [], [], [], []
        for (pts, labels), m in points_and_labels:
            keys = scene.point_keys(pts)
            idx = np.array([index.get(k, -1) for k in map(tuple, keys.tolist())], dtype=np.int64)
            hit = idx >= 0
            vox.append(idx[hit])
            lab.append(labels[hit])
            inst.append(np.full(hit.sum(), m.instance_id, np.int64))
            obj.append(np.full(hit.sum(), m.object_id, np.int64))
        if not vox:
            return {}
        return _majority_votes(*(np.concatenate(x) for x in (vox, lab, inst, obj)))

    placed = [(m, t.apply(m.vertices)) for m, t in zip(meshes, transforms)]
    winners = gather([((pts, m.vertex_labels), m) for m, pts in placed])
    if sample_faces:
        fallback = gather([(_face_samples(m.transformed(t), scene.resolution), m)
                           for m, t in zip(meshes, transforms)])
        for i, w in fallback.items():
            winners.setdefault(i, w)

    leaf = scene.leaf_label.copy()
    inst = scene.instance_id.copy()
    obj = scene.object_id.copy()
    for i, (lab, ins, ob) in winners.items():
        leaf[i], inst[i], obj[i] = lab, (ins if lab > 0 else 0), ob
    return scene.with_labels(leaf, inst, obj)


def remove_background(scene: VoxelScene) -> VoxelScene:
    return scene.subset(scene.object_id > 0)


def project_scene_labels(scene: VoxelScene, tax: PartTaxonomy, k: int) -> np.ndarray:
    """Per-voxel level-``k`` labels aligned with ``scene.keys`` (0 stays 0)."""
    table = tax.projection_table(k)
    uniq, inv = np.unique(scene.leaf_label, return_inverse=True)
    mapped = []
    for u in uniq.tolist():
        if u not in table:
            raise UnknownLabelError(f"scene label {u} is not in the taxonomy")
        mapped.append(table[u])
    return np.asarray(mapped, dtype=np.int64)[inv] if len(uniq) else np.zeros(0, np.int64)
