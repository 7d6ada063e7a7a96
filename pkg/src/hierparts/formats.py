"""Text file formats: scenes, point clouds, meshes, tensors, predictions, instances.

Floats are written with ``repr`` (shortest round-trip decimal) and rows in
canonical key order, so write -> read -> write reproduces the same bytes.
Parse errors carry the file name and 1-based line number.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import transform_from_dict
from .instances import Instance, InstanceSet
from .taxonomy import load_taxonomy
from .voxelgrid import LabeledMesh, VoxelScene


class FormatError(ValueError):
    def __init__(self, msg: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + msg)
        self.path, self.line = path, line


def _f(x: float) -> str:
    return repr(float(x))


def _rows(text: str):
    """Yield ``(line_no, stripped)`` for non-blank lines."""
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s:
            yield no, s


def _split_numbers(s: str, no: int, path, kinds: str):
    """Parse a whitespace-separated line; ``kinds`` has one 'i' or 'f' per field."""
    parts = s.split()
    if len(parts) != len(kinds):
        raise FormatError(f"expected {len(kinds)} fields, got {len(parts)}", path, no)
    try:
        return [int(p) if k == "i" else float(p) for p, k in zip(parts, kinds)]
    except ValueError:
        raise FormatError(f"malformed number in {s!r}", path, no) from None


def _check_sorted_unique(keys: np.ndarray, lines: list[int], path):
    if len(keys) < 2:
        return
    a, b = keys[:-1], keys[1:]
    gt = (b[:, 0] > a[:, 0]) | ((b[:, 0] == a[:, 0]) & ((b[:, 1] > a[:, 1]) |
                                                         ((b[:, 1] == a[:, 1]) & (b[:, 2] > a[:, 2]))))
    bad = np.flatnonzero(~gt)
    if bad.size:
        i = int(bad[0]) + 1
        what = "duplicate" if np.all(keys[i] == keys[i - 1]) else "out-of-order"
        raise FormatError(f"{what} voxel key {tuple(keys[i].tolist())}", path, lines[i])


# --- scene (.s2p) -----------------------------------------------------------

_S2P_HEADER = re.compile(
    r"^S2P v1 res=(\S+) origin=(\S+) (\S+) (\S+) trunc=(\S+)$")


def dump_scene(scene: VoxelScene) -> str:
    o = scene.origin
    out = [f"S2P v1 res={_f(scene.resolution)} origin={_f(o[0])} {_f(o[1])} {_f(o[2])} "
           f"trunc={_f(scene.truncation)}"]
    for n in range(len(scene)):
        i, j, k = scene.keys[n].tolist()
        row = f"{i} {j} {k} {_f(scene.tsdf[n])} {scene.leaf_label[n]} {scene.instance_id[n]} {scene.object_id[n]}"
        if scene.color is not None:
            r, g, b = scene.color[n].tolist()
            row += f" {r} {g} {b}"
        out.append(row)
    return "\n".join(out) + "\n"


def load_scene(text: str, path: str | None = None) -> VoxelScene:
    rows = list(_rows(text))
    if not rows:
        raise FormatError("empty scene file", path, 1)
    no, head = rows[0]
    m = _S2P_HEADER.match(head)
    if not m:
        raise FormatError("expected 'S2P v1 res=<r> origin=<x> <y> <z> trunc=<t>' header", path, no)
    try:
        res, ox, oy, oz, trunc = (float(v) for v in m.groups())
    except ValueError:
        raise FormatError("malformed number in header", path, no) from None
    if not res > 0 or not trunc > 0:
        raise FormatError("resolution and truncation must be positive", path, no)
    body = rows[1:]
    width = len(body[0][1].split()) if body else 7
    if width not in (7, 10):
        raise FormatError("voxel lines need 7 or 10 fields", path, body[0][0])
    keys, tsdf, ints, color, lines = [], [], [], [], []
    for no, s in body:
        v = s.split()
        if len(v) != width:
            raise FormatError(f"expected {width} fields, got {len(v)}", path, no)
        try:
            keys.append((int(v[0]), int(v[1]), int(v[2])))
            tsdf.append(float(v[3]))
            ints.append((int(v[4]), int(v[5]), int(v[6])))
            if width == 10:
                color.append((int(v[7]), int(v[8]), int(v[9])))
        except ValueError:
            raise FormatError(f"malformed number in {s!r}", path, no) from None
        if abs(tsdf[-1]) > trunc:
            raise FormatError("tsdf exceeds truncation", path, no)
        if min(ints[-1]) < 0:
            raise FormatError("labels and ids must be non-negative", path, no)
        if ints[-1][1] > 0 and ints[-1][0] == 0:
            raise FormatError("instance id set on an unlabeled voxel", path, no)
        if color and not all(0 <= c <= 255 for c in color[-1]):
            raise FormatError("color channel outside 0..255", path, no)
        lines.append(no)
    keys_a = np.array(keys, dtype=np.int64).reshape(-1, 3)
    _check_sorted_unique(keys_a, lines, path)
    ints_a = np.array(ints, dtype=np.int64).reshape(-1, 3)
    return VoxelScene(res, (ox, oy, oz), trunc, keys_a, np.array(tsdf, dtype=float),
                      ints_a[:, 0], ints_a[:, 1], ints_a[:, 2],
                      np.array(color, dtype=np.uint8) if width == 10 else None)


# --- point cloud ------------------------------------------------------------

def dump_points(points) -> str:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return "".join(f"{_f(x)} {_f(y)} {_f(z)}\n" for x, y, z in pts)


def load_points(text: str, path: str | None = None) -> np.ndarray:
    pts = []
    for no, s in _rows(text):
        if s.startswith("#"):
            continue
        pts.append(_split_numbers(s, no, path, "fff"))
    if not pts:
        raise FormatError("point cloud holds no points", path)
    arr = np.array(pts, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite coordinate", path)
    return arr


# --- meshes -----------------------------------------------------------------

def dump_meshes(meshes, poses=None) -> str:
    """JSON list of labeled meshes, each with an optional placement pose."""
    poses = [None] * len(meshes) if poses is None else poses
    out = []
    for m, pose in zip(meshes, poses):
        rec = {
            "instance_id": int(m.instance_id),
            "object_id": int(m.object_id),
            "vertices": m.vertices.tolist(),
            "triangles": m.triangles.tolist(),
            "labels": m.vertex_labels.tolist(),
        }
        if pose is not None:
            rec["pose"] = pose.to_dict()
        out.append(rec)
    return json.dumps({"meshes": out}) + "\n"


def load_meshes(text: str, path: str | None = None):
    """Return ``(meshes, poses)``; a missing pose is the identity."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(data, dict) or not isinstance(data.get("meshes"), list):
        raise FormatError("mesh file needs a top-level {\"meshes\": [...]}", path)
    meshes, poses = [], []
    for n, rec in enumerate(data["meshes"]):
        try:
            meshes.append(LabeledMesh(np.array(rec["vertices"], dtype=float).reshape(-1, 3),
                                      np.array(rec["triangles"], dtype=np.int64).reshape(-1, 3),
                                      np.array(rec["labels"], dtype=np.int64),
                                      int(rec.get("instance_id", 0)), int(rec.get("object_id", 0))))
            poses.append(transform_from_dict(rec["pose"]) if "pose" in rec else None)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"mesh {n}: {exc}", path) from None
    return meshes, poses


def placed_meshes(meshes, poses):
    return [m if p is None else m.transformed(p) for m, p in zip(meshes, poses)]


# --- keyed tensors and predictions ------------------------------------------

@dataclass(frozen=True)
class KeyedTensor:
    """Per-voxel vectors (embeddings or class scores) keyed by ``(i, j, k)``."""

    field: str
    level: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.field not in ("emb", "score"):
            raise ValueError("field must be 'emb' or 'score'")
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(self.values, dtype=float)
        vals = vals.reshape(len(keys), -1) if vals.size or len(keys) else vals.reshape(0, 0)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        object.__setattr__(self, "keys", keys[order])
        object.__setattr__(self, "values", vals[order])

    @property
    def dim(self) -> int:
        return self.values.shape[1]


_TENSOR_HEADER = re.compile(r"^# field=(emb|score) level=(-?\d+) dim=(\d+)$")


def dump_tensor(t: KeyedTensor) -> str:
    out = [f"# field={t.field} level={t.level} dim={t.dim}"]
    for key, row in zip(t.keys.tolist(), t.values):
        out.append("\t".join([str(v) for v in key] + [_f(v) for v in row]))
    return "\n".join(out) + "\n"


def load_tensor(text: str, path: str | None = None) -> KeyedTensor:
    rows = list(_rows(text))
    if not rows:
        raise FormatError("empty tensor file", path, 1)
    m = _TENSOR_HEADER.match(rows[0][1])
    if not m:
        raise FormatError("expected '# field=<emb|score> level=<k> dim=<D>' header", path, rows[0][0])
    field_name, level, dim = m.group(1), int(m.group(2)), int(m.group(3))
    if dim < 1:
        raise FormatError("dim must be positive", path, rows[0][0])
    keys, vals, lines = [], [], []
    for no, s in rows[1:]:
        v = _split_numbers(s, no, path, "iii" + "f" * dim)
        keys.append(v[:3])
        vals.append(v[3:])
        lines.append(no)
    keys_a = np.array(keys, dtype=np.int64).reshape(-1, 3)
    _check_sorted_unique(keys_a, lines, path)
    vals_a = np.array(vals, dtype=float).reshape(-1, dim)
    if not np.all(np.isfinite(vals_a)):
        raise FormatError("non-finite tensor value", path)
    return KeyedTensor(field_name, level, keys_a, vals_a)


@dataclass(frozen=True)
class KeyedLabels:
    level: int
    keys: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(lab) != len(keys):
            raise ValueError("one label per key required")
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        object.__setattr__(self, "keys", keys[order])
        object.__setattr__(self, "labels", lab[order])


_PRED_HEADER = re.compile(r"^# level=(\d+)$")


def dump_prediction(p: KeyedLabels) -> str:
    out = [f"# level={p.level}"]
    out += [f"{i}\t{j}\t{k}\t{lab}" for (i, j, k), lab in zip(p.keys.tolist(), p.labels.tolist())]
    return "\n".join(out) + "\n"


def load_prediction(text: str, path: str | None = None) -> KeyedLabels:
    rows = list(_rows(text))
    if not rows:
        raise FormatError("empty prediction file", path, 1)
    m = _PRED_HEADER.match(rows[0][1])
    if not m:
        raise FormatError("expected '# level=<k>' header", path, rows[0][0])
    keys, labels, lines = [], [], []
    for no, s in rows[1:]:
        v = _split_numbers(s, no, path, "iiii")
        if v[3] < 0:
            raise FormatError("negative label", path, no)
        keys.append(v[:3])
        labels.append(v[3])
        lines.append(no)
    keys_a = np.array(keys, dtype=np.int64).reshape(-1, 3)
    _check_sorted_unique(keys_a, lines, path)
    return KeyedLabels(int(m.group(1)), keys_a, labels)


# --- instances --------------------------------------------------------------

_INST_HEAD = "# instance_id class_id confidence"
_INST_MEMBERS = "# instance_id i j k"


def dump_instances(instances: InstanceSet) -> str:
    out = [_INST_HEAD]
    out += [f"{inst.id}\t{inst.class_id}\t{_f(inst.confidence)}" for inst in instances]
    out.append(_INST_MEMBERS)
    for inst in instances:
        out += [f"{inst.id}\t{i}\t{j}\t{k}" for i, j, k in sorted(inst.voxels)]
    return "\n".join(out) + "\n"


def load_instances(text: str, path: str | None = None) -> InstanceSet:
    rows = list(_rows(text))
    if not rows or rows[0][1] != _INST_HEAD:
        raise FormatError(f"expected {_INST_HEAD!r} header", path, rows[0][0] if rows else 1)
    meta: dict[int, tuple[int, float]] = {}
    members: dict[int, list[tuple]] = {}
    section = "head"
    for no, s in rows[1:]:
        if s == _INST_MEMBERS:
            if section != "head":
                raise FormatError("repeated membership header", path, no)
            section = "members"
            continue
        if section == "head":
            v = _split_numbers(s, no, path, "iif")
            iid, cls, conf = int(v[0]), int(v[1]), v[2]
            if iid <= 0 or cls <= 0:
                raise FormatError("instance and class ids must be positive", path, no)
            if iid in meta:
                raise FormatError(f"duplicate instance id {iid}", path, no)
            if not np.isfinite(conf):
                raise FormatError("non-finite confidence", path, no)
            meta[iid] = (cls, conf)
        else:
            v = _split_numbers(s, no, path, "iiii")
            if v[0] not in meta:
                raise FormatError(f"membership for undeclared instance {v[0]}", path, no)
            members.setdefault(v[0], []).append(tuple(v[1:]))
    if section != "members":
        raise FormatError(f"missing {_INST_MEMBERS!r} section", path)
    try:
        return InstanceSet(tuple(Instance(iid, cls, conf, frozenset(members.get(iid, ())))
                                 for iid, (cls, conf) in meta.items()))
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


# --- file helpers -----------------------------------------------------------

_LOADERS = {
    "scene": load_scene,
    "points": load_points,
    "meshes": load_meshes,
    "tensor": load_tensor,
    "prediction": load_prediction,
    "instances": load_instances,
}


def read(kind: str, path) -> object:
    """Read and parse ``path`` with the loader for ``kind``."""
    text = Path(path).read_text(encoding="utf-8")
    if kind == "taxonomy":
        try:
            return load_taxonomy(text)
        except ValueError as exc:
            raise FormatError(str(exc), str(path)) from None
    if kind == "transform":
        try:
            return transform_from_dict(json.loads(text))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad transform: {exc}", str(path)) from None
    return _LOADERS[kind](text, str(path))


def write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")

