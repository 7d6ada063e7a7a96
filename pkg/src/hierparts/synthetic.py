"""Seeded synthetic furniture scenes built from labeled boxes.

Random draws come from numpy's ``PCG64`` bit generator, whose stream is
fixed for a given seed on every platform, so a seed pins every output byte.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import Transform9, axis_angle_quat
from .taxonomy import PartTaxonomy, count_occurrences
from .voxelgrid import DEFAULT_RESOLUTION, LabeledMesh, VoxelScene, transfer_labels, voxelize_mesh

CATEGORIES = ("chair", "table", "storage")

# category -> coarse part -> fine part; some parts never occur in generated scenes
TAXONOMY_RECORDS = [
    {"id": 1, "name": "Chair", "parent": None},
    {"id": 2, "name": "Chair/chair_base", "parent": 1},
    {"id": 3, "name": "Chair/chair_base/leg", "parent": 2},
    {"id": 4, "name": "Chair/chair_base/bar_stretcher", "parent": 2},
    {"id": 5, "name": "Chair/chair_seat", "parent": 1},
    {"id": 6, "name": "Chair/chair_seat/seat_surface", "parent": 5},
    {"id": 7, "name": "Chair/chair_back", "parent": 1},
    {"id": 8, "name": "Chair/chair_back/back_surface", "parent": 7},
    {"id": 9, "name": "Chair/chair_arm", "parent": 1},
    {"id": 10, "name": "Chair/chair_arm/arm_writing_table", "parent": 9},
    {"id": 11, "name": "Table", "parent": None},
    {"id": 12, "name": "Table/table_base", "parent": 11},
    {"id": 13, "name": "Table/table_base/leg", "parent": 12},
    {"id": 14, "name": "Table/tabletop", "parent": 11},
    {"id": 15, "name": "Table/tabletop/board", "parent": 14},
    {"id": 16, "name": "StorageFurniture", "parent": None},
    {"id": 17, "name": "StorageFurniture/cabinet_frame", "parent": 16},
    {"id": 18, "name": "StorageFurniture/cabinet_frame/side_panel", "parent": 17},
    {"id": 19, "name": "StorageFurniture/cabinet_frame/horizontal_panel", "parent": 17},
    {"id": 20, "name": "StorageFurniture/cabinet_door", "parent": 16},
    {"id": 21, "name": "StorageFurniture/cabinet_door/door_panel", "parent": 20},
]

LEG, SEAT, BACK = 3, 6, 8
TABLE_LEG, BOARD = 13, 15
SIDE, HPANEL, DOOR = 18, 19, 21

_DIM_RANGES = {
    "chair": {"width": (0.40, 0.55), "depth": (0.40, 0.55), "height": (0.40, 0.50),
              "back": (0.35, 0.55), "thickness": (0.04, 0.08), "leg": (0.04, 0.06)},
    "table": {"width": (0.80, 1.40), "depth": (0.60, 0.90), "height": (0.65, 0.80),
              "thickness": (0.04, 0.08), "leg": (0.05, 0.08)},
    "storage": {"width": (0.50, 0.90), "depth": (0.35, 0.55), "height": (0.70, 1.20),
                "thickness": (0.03, 0.05)},
}


@dataclass(frozen=True)
class ObjectRecipe:
    category: str
    dims: dict
    pose: Transform9 = field(default_factory=Transform9)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        missing = set(_DIM_RANGES[self.category]) - set(self.dims)
        if missing:
            raise ValueError(f"{self.category} recipe lacks dimensions {sorted(missing)}")
        if any(not v > 0 for v in self.dims.values()):
            raise ValueError("part dimensions must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    objects: tuple[ObjectRecipe, ...]
    resolution: float = DEFAULT_RESOLUTION
    truncation: float | None = None
    floor: bool = True

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.truncation is not None and self.truncation < self.resolution:
            raise ValueError("truncation must be at least one voxel")


def synthetic_taxonomy() -> PartTaxonomy:
    return PartTaxonomy.from_records(TAXONOMY_RECORDS)


def box_mesh(lo, hi, spacing: float, label: int, instance_id: int = 0, object_id: int = 0) -> LabeledMesh:
    """Closed axis-aligned box whose faces are gridded at most ``spacing`` apart."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(hi <= lo):
        raise ValueError("box extents must be positive")
    verts, tris = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(1, int(np.ceil((hi[u] - lo[u]) / spacing)))
        nv = max(1, int(np.ceil((hi[v] - lo[v]) / spacing)))
        su, sv = np.linspace(lo[u], hi[u], nu + 1), np.linspace(lo[v], hi[v], nv + 1)
        gu, gv = np.meshgrid(su, sv, indexing="ij")
        for side in (lo[axis], hi[axis]):
            base = sum(len(x) for x in verts)
            p = np.empty((gu.size, 3))
            p[:, axis], p[:, u], p[:, v] = side, gu.ravel(), gv.ravel()
            verts.append(p)
            idx = base + np.arange(gu.size).reshape(nu + 1, nv + 1)
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            tris.append(np.stack([a, b, c], axis=1))
            tris.append(np.stack([a, c, d], axis=1))
    vertices = np.concatenate(verts)
    return LabeledMesh(vertices, np.concatenate(tris), np.full(len(vertices), label), instance_id, object_id)


def part_boxes(recipe: ObjectRecipe) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(leaf_label, lo, hi)`` boxes in the object frame (z up, floor at 0)."""
    d = recipe.dims
    W, D, H, t = d["width"] / 2, d["depth"] / 2, d["height"], d["thickness"]
    boxes = []
    if recipe.category in ("chair", "table"):
        leg = d["leg"]
        label = LEG if recipe.category == "chair" else TABLE_LEG
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx, cy = sx * (W - leg / 2), sy * (D - leg / 2)
                boxes.append((label, (cx - leg / 2, cy - leg / 2, 0.0), (cx + leg / 2, cy + leg / 2, H - t)))
        top = SEAT if recipe.category == "chair" else BOARD
        boxes.append((top, (-W, -D, H - t), (W, D, H)))
        if recipe.category == "chair":
            boxes.append((BACK, (-W, D - t, H), (W, D, H + d["back"])))
    else:
        for sx in (-1, 1):
            x0 = sx * W - (t if sx > 0 else 0)
            boxes.append((SIDE, (x0, -D, 0.0), (x0 + t, D, H)))
        boxes.append((HPANEL, (-W + t, -D, 0.0), (W - t, D, t)))
        boxes.append((HPANEL, (-W + t, -D, H - t), (W - t, D, H)))
        boxes.append((DOOR, (-W + t, -D, t), (W - t, -D + t, H - t)))
    return [(lab, np.array(lo, float), np.array(hi, float)) for lab, lo, hi in boxes]


def random_recipe(category: str, rng: np.random.Generator, position=(0.0, 0.0)) -> ObjectRecipe:
    dims = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in _DIM_RANGES[category].items()}
    yaw = float(rng.uniform(0.0, 2.0 * np.pi))
    shift = rng.uniform(-0.1, 0.1, size=2)
    pose = Transform9(np.ones(3), axis_angle_quat((0.0, 0.0, 1.0), yaw),
                      (position[0] + shift[0], position[1] + shift[1], 0.0))
    return ObjectRecipe(category, dims, pose)


def make_spec(seed: int, categories=None, n_objects: int = 4, resolution: float = DEFAULT_RESOLUTION,
              truncation: float | None = None, floor: bool = True) -> SyntheticSpec:
    """Random scene spec: objects on a 1.8 m grid, random sizes and yaw.

    Without ``categories`` the scene cycles chair, chair, table, storage,
    so chair legs outnumber tabletops.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if categories is None:
        cycle = ("chair", "chair", "table", "storage")
        categories = [cycle[i % len(cycle)] for i in range(n_objects)]
    cols = max(1, int(np.ceil(np.sqrt(len(categories)))))
    objects = tuple(random_recipe(c, rng, (1.8 * (i % cols), 1.8 * (i // cols)))
                    for i, c in enumerate(categories))
    return SyntheticSpec(seed, objects, resolution, truncation, floor)


def build_meshes(spec: SyntheticSpec):
    """Object-frame part meshes and their poses; optional floor last (label 0)."""
    spacing = spec.resolution / 2
    meshes, poses = [], []
    instance = 0
    for obj_id, recipe in enumerate(spec.objects, start=1):
        for label, lo, hi in part_boxes(recipe):
            instance += 1
            meshes.append(box_mesh(lo, hi, spacing, label, instance, obj_id))
            poses.append(recipe.pose)
    if spec.floor and meshes:
        pts = np.concatenate([p.apply(m.vertices) for m, p in zip(meshes, poses)])
        lo, hi = pts.min(axis=0)[:2] - 0.3, pts.max(axis=0)[:2] + 0.3
        corners = np.array([[lo[0], lo[1], 0.0], [hi[0], lo[1], 0.0], [hi[0], hi[1], 0.0], [lo[0], hi[1], 0.0]])
        meshes.append(LabeledMesh(corners, [[0, 1, 2], [0, 2, 3]], np.zeros(4, np.int64), 0, 0))
        poses.append(Transform9())
    return meshes, poses


def gen_synthetic(spec: SyntheticSpec):
    """Meshes, poses, taxonomy (with voxel occurrence counts) and the labeled scene."""
    if not spec.objects:
        raise ValueError("a synthetic scene needs at least one object")
    meshes, poses = build_meshes(spec)
    placed = [m.transformed(p) for m, p in zip(meshes, poses)]
    scene: VoxelScene = voxelize_mesh(placed, spec.resolution, spec.truncation)
    scene = transfer_labels(scene, placed)
    tax = count_occurrences(synthetic_taxonomy(), scene)
    return meshes, poses, tax, scene
