"""Shared test fixtures."""
import numpy as np

from hierparts.align import AffineTransform, axis_angle_quat, quat_to_matrix
from hierparts.synthetic import ObjectRecipe, box_mesh, part_boxes

CHAIR_DIMS = {"width": 0.5, "depth": 0.45, "height": 0.45, "thickness": 0.04, "leg": 0.04, "back": 0.45}


def chair_cloud(n=200, seed=0):
    """``n`` vertices drawn without replacement from a gridded chair surface."""
    recipe = ObjectRecipe("chair", CHAIR_DIMS)
    verts = np.concatenate([box_mesh(lo, hi, 0.05, lab).vertices for lab, lo, hi in part_boxes(recipe)])
    verts = np.unique(verts, axis=0)
    rng = np.random.default_rng(seed)
    return verts[rng.choice(len(verts), size=n, replace=False)]


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return quat_to_matrix(axis_angle_quat(axis, angle))


def random_rigid(rng, max_angle=np.pi, max_shift=1.0):
    return AffineTransform(random_rotation(rng, max_angle), rng.uniform(-max_shift, max_shift, 3))


def random_meshes(rng, n_meshes=None, labels=(0, 3, 5, 6, 8)):
    """A few small random triangle soups inside a 0.4 m cube.

    Vertex coordinates sit on a 1 cm lattice so many vertices share voxels
    and votes tie often.
    """
    from hierparts.voxelgrid import LabeledMesh
    n_meshes = n_meshes or int(rng.integers(1, 5))
    out = []
    for i in range(n_meshes):
        nv = int(rng.integers(3, 12))
        verts = rng.integers(0, 40, size=(nv, 3)) / 100.0
        tris = np.array([rng.choice(nv, 3, replace=False) for _ in range(int(rng.integers(1, 5)))])
        out.append(LabeledMesh(verts, tris, rng.choice(labels, nv), instance_id=i + 1,
                               object_id=int(rng.integers(0, 3))))
    return out


def margin_embeddings(rng, k, dim, delta_v, delta_d, per_part=6):
    """Clusters with every point within ``delta_v`` of its exact centroid and
    centroids at least ``2 * delta_d`` apart, so pull and push both vanish."""
    mus = []
    while len(mus) < k:
        c = rng.uniform(-4 * delta_d, 4 * delta_d, dim) * max(1, k) ** (1 / dim)
        if all(np.linalg.norm(c - m) >= 2 * delta_d for m in mus):
            mus.append(c)
    rows, ids = [], []
    for i, mu in enumerate(mus, start=1):
        half = rng.normal(size=(per_part // 2, dim))
        half *= (rng.uniform(0, 0.99 * delta_v, len(half)) / np.linalg.norm(half, axis=1))[:, None]
        rows.append(mu + np.vstack([half, -half]))
        ids += [i] * (2 * len(half))
    return np.vstack(rows), np.array(ids), np.array(mus)


def two_blobs(rng, bandwidth, dim=3, n=50):
    """Two blobs of ``n`` points, each inside a ball of radius ``bandwidth / 2``,
    centers ``10 * bandwidth`` apart along a random direction."""
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    c0 = rng.normal(size=dim)
    pts, truth = [], []
    for b, c in enumerate((c0, c0 + 10 * bandwidth * u)):
        d = rng.normal(size=(n, dim))
        d *= (rng.uniform(0, bandwidth / 2, n) / np.linalg.norm(d, axis=1))[:, None]
        pts.append(c + d)
        truth += [b] * n
    perm = rng.permutation(2 * n)
    return np.vstack(pts)[perm], np.array(truth)[perm]


def random_instance_pair(rng, n_voxels=60, n_classes=2, max_per_class=5, noise=0.3):
    """Ground-truth and predicted instance sets over one small voxel universe.

    Predictions copy the ground-truth partition with a fraction of voxels
    reassigned, so IoUs spread on both sides of 0.5. Confidences come from
    a coarse grid to produce ranking ties.
    """
    from hierparts.instances import Instance, InstanceSet
    n_inst = int(rng.integers(1, n_classes * max_per_class + 1))
    classes = rng.integers(1, n_classes + 1, n_inst)
    while max(np.bincount(classes)) > max_per_class:
        classes = rng.integers(1, n_classes + 1, n_inst)
    gt_of = rng.integers(0, n_inst + 1, n_voxels)  # 0 = no instance
    pred_of = np.where(rng.random(n_voxels) < noise, rng.integers(0, n_inst + 1, n_voxels), gt_of)
    pred_cls = np.where(rng.random(n_inst) < 0.2, rng.integers(1, n_classes + 1, n_inst), classes)

    def build(assign, cls, conf):
        out = []
        for i in range(1, n_inst + 1):
            vox = frozenset((int(v) // 16, int(v) // 4 % 4, int(v) % 4) for v in np.flatnonzero(assign == i))
            if vox:
                out.append(Instance(i, int(cls[i - 1]), float(conf[i - 1]), vox))
        return InstanceSet(tuple(out))
    gt = build(gt_of, classes, np.ones(n_inst))
    pred = build(pred_of, pred_cls, rng.integers(1, 5, n_inst) / 4)
    return pred, gt
