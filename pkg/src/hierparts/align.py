"""Rigid/affine transforms and multi-start point-to-point ICP.

Quaternions are stored scalar-first, ``(w, x, y, z)``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_points

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class AffineTransform:
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def as_affine(self) -> "AffineTransform":
        return self

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"linear": [float(v) for v in self.linear.ravel()],
                "translation": [float(v) for v in self.translation]}


@dataclass(frozen=True)
class Transform9:
    """Anisotropic scale, then rotation, then translation."""

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        if np.any(scale <= 0):
            raise ValueError("scale components must be positive")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def as_affine(self) -> AffineTransform:
        return AffineTransform(quat_to_matrix(self.rotation) * self.scale, self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        R = quat_to_matrix(self.rotation)
        return (pts * self.scale) @ R.T + self.translation

    def to_dict(self) -> dict:
        return {"scale": [float(v) for v in self.scale],
                "rotation_wxyz": [float(v) for v in self.rotation],
                "translation": [float(v) for v in self.translation]}


def apply(t, points) -> np.ndarray:
    return t.apply(points)


def compose(outer, inner) -> AffineTransform:
    """Affine map equal to applying ``inner`` first, then ``outer``."""
    a, b = outer.as_affine(), inner.as_affine()
    return AffineTransform(a.linear @ b.linear, a.linear @ b.translation + a.translation)


def transform_from_dict(d: dict):
    if "linear" in d:
        return AffineTransform(np.reshape(d["linear"], (3, 3)), d["translation"])
    return Transform9(d["scale"], d["rotation_wxyz"], d["translation"])


def dump_transform(t) -> str:
    return json.dumps(t.to_dict()) + "\n"


def load_transform(text: str):
    return transform_from_dict(json.loads(text))


def dodecahedron_vertices() -> np.ndarray:
    """The 20 unit vertex directions of a regular dodecahedron."""
    inv = 1.0 / GOLDEN
    verts = [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    for a in (-1, 1):
        for b in (-1, 1):
            verts.append((0.0, a * inv, b * GOLDEN))
            verts.append((a * inv, b * GOLDEN, 0.0))
            verts.append((a * GOLDEN, 0.0, b * inv))
    v = np.asarray(verts, dtype=float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


# Roll about +Z per vertex, in degrees. Chosen by coordinate search over
# 15 degree steps to shrink the largest gap between starts in SO(3): about
# 3% of random rotations lie more than 65 degrees from every start, against
# 15% for a plain 0/120/240 cycle and 43% with no roll at all.
ROLL_DEGREES = (240, 60, 240, 330, 165, 345, 30, 105, 195, 0,
                210, 180, 240, 105, 315, 240, 90, 255, 0, 195)


def dodecahedron_rotations() -> list[np.ndarray]:
    """20 start rotations, one per dodecahedron vertex.

    Rotation ``i`` first rolls about +Z by ``ROLL_DEGREES[i]``, then carries
    +Z onto vertex ``i`` along the shortest arc. The roll leaves the image of
    +Z untouched but spreads the starts over all of SO(3).
    """
    z = np.array([0.0, 0.0, 1.0])
    quats = []
    for v, deg in zip(dodecahedron_vertices(), ROLL_DEGREES):
        # no vertex lies on the z axis, so the arc axis is never degenerate
        arc = axis_angle_quat(np.cross(z, v), np.arccos(np.clip(v @ z, -1.0, 1.0)))
        roll = axis_angle_quat(z, np.radians(deg))
        q = quat_mul(arc, roll)
        quats.append(q / np.linalg.norm(q))
    return quats


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_eps: float = 1e-7

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be positive")


def best_fit_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``src`` rows onto ``dst`` rows."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def icp_point_to_point(src, dst, init=None, params: IcpParams | None = None,
                       return_trace: bool = False, tree: cKDTree | None = None):
    """Rigidly align ``src`` onto ``dst``.

    ``init`` is a starting rotation (unit quaternion or Transform9; only its
    rotation is used). The initial translation matches the centroids. Each
    iteration pairs every source point with its nearest destination point
    and refits rotation and translation by SVD.

    Returns ``(transform, rmse)``, plus the per-iteration RMSE trace when
    ``return_trace`` is set.
    """
    src = check_points(src, name="src")
    dst = check_points(dst, name="dst")
    params = params or IcpParams()
    if init is None:
        R = np.eye(3)
    elif isinstance(init, Transform9):
        R = quat_to_matrix(init.rotation)
    else:
        R = quat_to_matrix(init)
    t = dst.mean(axis=0) - R @ src.mean(axis=0)
    tree = tree if tree is not None else cKDTree(dst)

    dist, idx = tree.query(src @ R.T + t)
    rmse = float(np.sqrt(np.mean(dist ** 2)))
    trace = [rmse]
    for _ in range(params.max_iterations):
        R_new, t_new = best_fit_rigid(src, dst[idx])
        dist_new, idx_new = tree.query(src @ R_new.T + t_new)
        rmse_new = float(np.sqrt(np.mean(dist_new ** 2)))
        if rmse_new > rmse:
            # only possible through round-off; keep the better iterate
            break
        R, t, dist, idx = R_new, t_new, dist_new, idx_new
        improvement = rmse - rmse_new
        rmse = rmse_new
        trace.append(rmse)
        if improvement < params.convergence_eps:
            break

    result = (AffineTransform(R, t), rmse)
    if return_trace:
        return result + (trace,)
    return result


def best_alignment(src, dst, params: IcpParams | None = None, score: str = "rmse",
                   threads: int = 1, return_candidates: bool = False):
    """ICP from all 20 dodecahedron starts; keep the lowest-scoring result.

    ``score`` is ``"rmse"`` or ``"sum"`` (summed nearest-neighbour distance
    of the aligned source). Ties go to the lowest start index.
    """
    if score not in ("rmse", "sum"):
        raise ValueError(f"unknown ICP score {score!r}")
    src = check_points(src, name="src")
    dst = check_points(dst, name="dst")
    tree = cKDTree(dst)

    def run(q):
        T, rmse = icp_point_to_point(src, dst, q, params, tree=tree)
        if score == "rmse":
            return T, rmse, rmse
        dist, _ = tree.query(T.apply(src))
        return T, rmse, float(dist.sum())

    starts = dodecahedron_rotations()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            candidates = list(pool.map(run, starts))
    else:
        candidates = [run(q) for q in starts]
    best = min(range(len(candidates)), key=lambda i: (candidates[i][2], i))
    T, rmse, _ = candidates[best]
    if return_candidates:
        return T, rmse, candidates
    return T, rmse


class RigidRegistration(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`best_alignment`.

    ``fit(src, dst)`` estimates the rigid map taking ``src`` onto ``dst``;
    ``transform`` applies it to new point sets.
    """

    def __init__(self, max_iterations=50, convergence_eps=1e-7, score="rmse", multi_start=True):
        self.max_iterations = max_iterations
        self.convergence_eps = convergence_eps
        self.score = score
        self.multi_start = multi_start

    def fit(self, X, y):
        params = IcpParams(self.max_iterations, self.convergence_eps)
        if self.multi_start:
            self.transform_, self.rmse_ = best_alignment(X, y, params, score=self.score)
        else:
            self.transform_, self.rmse_ = icp_point_to_point(X, y, None, params)
        return self

    def transform(self, X):
        if not hasattr(self, "transform_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("RigidRegistration is not fitted yet")
        return self.transform_.apply(check_points(X, allow_empty=True))
