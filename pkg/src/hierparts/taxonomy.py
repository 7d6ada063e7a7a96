"""Part taxonomy: a forest of part categories with object categories as roots.

Node ids are stable across pruning and collapsing, so label files written
against one version of a taxonomy stay valid after it is edited. Id 0 is
reserved for "unlabeled / background" and never names a node.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin


class TaxonomyError(ValueError):
    """Base class for malformed taxonomy input."""


class DuplicateIdError(TaxonomyError):
    pass


class DuplicateNameError(TaxonomyError):
    pass


class DanglingParentError(TaxonomyError):
    pass


class CycleError(TaxonomyError):
    pass


class UnknownLabelError(TaxonomyError, KeyError):
    def __str__(self):
        return ValueError.__str__(self)


@dataclass(frozen=True)
class PartNode:
    id: int
    name: str
    parent: int | None
    children: tuple[int, ...] = ()
    occurrence: int = 0


@dataclass(frozen=True)
class PartTaxonomy:
    """Immutable forest of :class:`PartNode`.

    Build one with :meth:`from_records` (or :func:`load_taxonomy`); the
    constructor trusts its input and is used internally.
    """

    nodes: Mapping[int, PartNode]
    _depth: Mapping[int, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._depth is None:
            object.__setattr__(self, "_depth", _compute_depths(self.nodes))

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "PartTaxonomy":
        order: list[int] = []
        parents: dict[int, int | None] = {}
        names: dict[int, str] = {}
        occ: dict[int, int] = {}
        seen_names: set[str] = set()
        for rec in records:
            nid = int(rec["id"])
            if nid <= 0:
                raise TaxonomyError(f"node id must be positive, got {nid}")
            if nid in parents:
                raise DuplicateIdError(f"duplicate node id {nid}")
            name = str(rec["name"])
            if name in seen_names:
                raise DuplicateNameError(f"duplicate node name {name!r}")
            seen_names.add(name)
            parent = rec.get("parent")
            parents[nid] = None if parent is None else int(parent)
            names[nid] = name
            occurrence = int(rec.get("occurrence", 0))
            if occurrence < 0:
                raise TaxonomyError(f"node {nid}: negative occurrence")
            occ[nid] = occurrence
            order.append(nid)

        for nid, parent in parents.items():
            if parent is not None and parent not in parents:
                raise DanglingParentError(f"node {nid} references missing parent {parent}")

        for start in order:
            seen = {start}
            cur = parents[start]
            while cur is not None:
                if cur in seen:
                    raise CycleError(f"cycle through node {start}")
                seen.add(cur)
                cur = parents[cur]

        children: dict[int, list[int]] = {nid: [] for nid in order}
        for nid in order:
            if parents[nid] is not None:
                children[parents[nid]].append(nid)
        nodes = {
            nid: PartNode(nid, names[nid], parents[nid], tuple(children[nid]), occ[nid])
            for nid in order
        }
        return cls(nodes)

    def to_records(self) -> list[dict]:
        return [
            {"id": n.id, "name": n.name, "parent": n.parent, "occurrence": n.occurrence}
            for n in self
        ]

    def __iter__(self):
        """Nodes in pre-order, roots by ascending id, children in stored order."""
        for root in self.roots:
            stack = [root]
            while stack:
                nid = stack.pop()
                yield self.nodes[nid]
                stack.extend(reversed(self.nodes[nid].children))

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, nid):
        return nid in self.nodes

    def __getitem__(self, nid: int) -> PartNode:
        try:
            return self.nodes[nid]
        except KeyError:
            raise UnknownLabelError(f"unknown taxonomy node {nid}") from None

    @property
    def roots(self) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if n.parent is None)

    @property
    def leaves(self) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if not n.children)

    @property
    def max_depth(self) -> int:
        return max(self._depth.values(), default=0)

    def depth(self, nid: int) -> int:
        self[nid]
        return self._depth[nid]

    def name(self, nid: int) -> str:
        return self[nid].name

    def ancestors(self, nid: int) -> list[int]:
        """Path from ``nid`` up to its root, ``nid`` first."""
        path = [nid]
        cur = self[nid].parent
        while cur is not None:
            path.append(cur)
            cur = self.nodes[cur].parent
        return path

    def subtree(self, nid: int) -> list[int]:
        out, stack = [], [nid]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(self[cur].children)
        return out

    def by_name(self, name: str) -> int:
        for n in self.nodes.values():
            if n.name == name:
                return n.id
        raise UnknownLabelError(f"no taxonomy node named {name!r}")

    def with_occurrences(self, counts: Mapping[int, int]) -> "PartTaxonomy":
        nodes = {nid: replace(n, occurrence=int(counts.get(nid, 0))) for nid, n in self.nodes.items()}
        return PartTaxonomy(nodes, self._depth)

    def project(self, nid: int, k: int) -> int:
        return project_leaf_to_level(self, nid, k)

    def level_classes(self, k: int) -> list[int]:
        return level_classes(self, k)

    def projection_table(self, k: int) -> dict[int, int]:
        """Map every node id (and 0) to its level-``k`` projection."""
        table = {0: 0}
        for nid in self.nodes:
            table[nid] = project_leaf_to_level(self, nid, k)
        return table


def _compute_depths(nodes: Mapping[int, PartNode]) -> dict[int, int]:
    depth: dict[int, int] = {}
    for nid in nodes:
        chain = []
        cur = nid
        while cur is not None and cur not in depth:
            chain.append(cur)
            cur = nodes[cur].parent
        base = 0 if cur is None else depth[cur]
        for offset, c in enumerate(reversed(chain), start=1):
            depth[c] = base + offset
    return depth


def load_taxonomy(text: str) -> PartTaxonomy:
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise TaxonomyError("taxonomy file must hold a top-level array")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "id" not in rec or "name" not in rec:
            raise TaxonomyError(f"record {i} needs 'id' and 'name'")
    return PartTaxonomy.from_records(records)


def dump_taxonomy(tax: PartTaxonomy) -> str:
    return json.dumps(tax.to_records(), indent=1) + "\n"


def _rebuild(tax: PartTaxonomy, parent_of: Mapping[int, int | None], keep: Sequence[int]) -> PartTaxonomy:
    # keep: surviving ids in the order children lists should follow
    children: dict[int, list[int]] = {nid: [] for nid in keep}
    for nid in keep:
        p = parent_of[nid]
        if p is not None:
            children[p].append(nid)
    nodes = {
        nid: replace(tax.nodes[nid], parent=parent_of[nid], children=tuple(children[nid]))
        for nid in keep
    }
    return PartTaxonomy(nodes)


def prune_by_occurrence(tax: PartTaxonomy, threshold: int) -> PartTaxonomy:
    """Drop every node with ``occurrence < threshold`` together with its subtree."""
    keep = [n.id for n in _preorder_filtered(tax, lambda n: n.occurrence >= threshold)]
    return _rebuild(tax, {nid: tax.nodes[nid].parent for nid in keep}, keep)


def _preorder_filtered(tax, predicate):
    for root in tax.roots:
        stack = [root]
        while stack:
            node = tax.nodes[stack.pop()]
            if not predicate(node):
                continue
            yield node
            stack.extend(reversed(node.children))


def collapse_trivial_paths(tax: PartTaxonomy) -> PartTaxonomy:
    """Splice out internal non-root nodes that have exactly one child.

    The lone child is attached to the removed node's parent, taking its
    place in the sibling order. Roots and leaves are never removed.
    """
    def trivial(n: PartNode) -> bool:
        return n.parent is not None and len(n.children) == 1

    parent_of: dict[int, int | None] = {}
    keep: list[int] = []

    def visit(nid: int, new_parent: int | None):
        node = tax.nodes[nid]
        if trivial(node):
            visit(node.children[0], new_parent)
            return
        parent_of[nid] = new_parent
        keep.append(nid)
        for c in node.children:
            visit(c, nid)

    for root in tax.roots:
        visit(root, None)
    return _rebuild(tax, parent_of, keep)


def count_occurrences(tax: PartTaxonomy, scene) -> PartTaxonomy:
    """Return ``tax`` with occurrence = labeled voxels in each node's subtree.

    ``scene`` is a VoxelScene or any array of per-voxel node ids; 0 is
    skipped as unlabeled.
    """
    labels = np.asarray(getattr(scene, "leaf_label", scene), dtype=np.int64).ravel()
    ids, counts = np.unique(labels[labels != 0], return_counts=True)
    direct = dict(zip(ids.tolist(), counts.tolist()))
    unknown = [nid for nid in direct if nid not in tax.nodes]
    if unknown:
        raise UnknownLabelError(f"scene labels absent from taxonomy: {sorted(unknown)}")
    totals: dict[int, int] = {nid: 0 for nid in tax.nodes}
    for nid, c in direct.items():
        for anc in tax.ancestors(nid):
            totals[anc] += c
    return tax.with_occurrences(totals)


def project_leaf_to_level(tax: PartTaxonomy, leaf: int, k: int) -> int:
    """Ancestor of ``leaf`` at depth ``k``; the leaf itself if it is shallower."""
    if k < 1:
        raise ValueError(f"level must be >= 1, got {k}")
    path = tax.ancestors(leaf)
    d = len(path)
    if d <= k:
        return leaf
    return path[d - k]


def level_classes(tax: PartTaxonomy, k: int) -> list[int]:
    """Sorted class ids at level ``k``: the image of the leaf projection."""
    return sorted({project_leaf_to_level(tax, leaf, k) for leaf in tax.leaves})


def relabel_pruned(labels, tax: PartTaxonomy, original: PartTaxonomy, mode: str = "unlabeled"):
    """Remap labels that no longer exist in ``tax`` after pruning.

    ``mode="unlabeled"`` sends them to 0; ``mode="parent"`` walks up
    ``original`` to the nearest surviving ancestor (0 if none survives).
    """
    if mode not in ("unlabeled", "parent"):
        raise ValueError(f"unknown relabel mode {mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    for nid in np.unique(labels):
        nid = int(nid)
        if nid == 0 or nid in tax.nodes:
            continue
        target = 0
        if mode == "parent":
            for anc in original.ancestors(nid)[1:]:
                if anc in tax.nodes:
                    target = anc
                    break
        out[labels == nid] = target
    return out


class LevelProjector(TransformerMixin, BaseEstimator):
    """Map leaf labels to their level-``level`` ancestors.

    A stateless transformer; ``fit`` only caches the projection table so the
    step composes inside a scikit-learn ``Pipeline``.
    """

    def __init__(self, taxonomy: PartTaxonomy | None = None, level: int = 1):
        self.taxonomy = taxonomy
        self.level = level

    def fit(self, X=None, y=None):
        if self.taxonomy is None:
            raise ValueError("LevelProjector needs a taxonomy")
        self.table_ = self.taxonomy.projection_table(self.level)
        self.classes_ = np.asarray(level_classes(self.taxonomy, self.level), dtype=np.int64)
        return self

    def transform(self, X):
        if not hasattr(self, "table_"):
            self.fit()
        labels = np.asarray(X, dtype=np.int64)
        uniq, inv = np.unique(labels, return_inverse=True)
        try:
            mapped = np.array([self.table_[int(u)] for u in uniq], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabelError(f"unknown taxonomy node {exc.args[0]}") from None
        return mapped[inv].reshape(labels.shape)
