"""Concept hierarchy: an immutable, validated tree of concept nodes.

The hierarchy organizes concepts into levels 0..L with parent-child
edges. Node id 0 is reserved for background everywhere (label maps,
metrics) and must not appear as a node. Node-id lists are ordered
ascending so the node <-> query-slot correspondence is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CycleError,
    DuplicateIdError,
    LevelError,
    OrphanError,
    ShapeMismatchError,
    UnknownNodeError,
    UnmappedCategoryError,
)

BACKGROUND_ID = 0


@dataclass(frozen=True)
class ConceptNode:
    """One concept: id >= 1, a name, its level, and its parent (roots have none)."""

    id: int
    name: str
    level: int
    parent_id: Optional[int] = None

    def __post_init__(self):
        if self.id < 1:
            raise DuplicateIdError(f"node id must be >= 1 (0 is background), got {self.id}")
        if self.level < 0:
            raise LevelError(f"node {self.id}: level must be >= 0, got {self.level}")
        if self.level == 0 and self.parent_id is not None:
            raise LevelError(f"root node {self.id} must not have a parent")
        if self.level > 0 and self.parent_id is None:
            raise OrphanError(f"node {self.id} at level {self.level} has no parent")


class ConceptHierarchy:
    """Validated forest of ConceptNodes with level and children indices.

    Immutable after construction; safe for concurrent reads. Build via
    :func:`build_hierarchy` or :func:`load_hierarchy`.
    """

    def __init__(self, nodes: Sequence[ConceptNode]):
        self._nodes = {n.id: n for n in nodes}
        if len(self._nodes) != len(nodes):
            raise DuplicateIdError("duplicate node ids in hierarchy spec")
        if not nodes:
            raise OrphanError("hierarchy must contain at least one node")
        self._validate()
        self.depth = max(n.level for n in nodes)
        self.levels: dict[int, list[int]] = {
            l: sorted(n.id for n in nodes if n.level == l) for l in range(self.depth + 1)
        }
        self.children_index: dict[int, list[int]] = {n.id: [] for n in nodes}
        for n in nodes:
            if n.parent_id is not None:
                self.children_index[n.parent_id].append(n.id)
        for ids in self.children_index.values():
            ids.sort()

    def _validate(self):
        names_per_level: dict[int, set] = {}
        for n in self._nodes.values():
            seen = names_per_level.setdefault(n.level, set())
            if n.name in seen:
                raise DuplicateIdError(f"duplicate name {n.name!r} at level {n.level}")
            seen.add(n.name)
        for n in self._nodes.values():
            if n.parent_id is None:
                continue
            parent = self._nodes.get(n.parent_id)
            if parent is None:
                raise OrphanError(f"node {n.id}: parent {n.parent_id} does not exist")
            if parent.level != n.level - 1:
                raise LevelError(
                    f"node {n.id} at level {n.level} has parent at level {parent.level}"
                )
        # walk every parent chain; a revisit is a cycle
        for n in self._nodes.values():
            visited = {n.id}
            cur = n
            while cur.parent_id is not None:
                if cur.parent_id in visited:
                    raise CycleError(f"parent chain from node {n.id} revisits {cur.parent_id}")
                visited.add(cur.parent_id)
                cur = self._nodes[cur.parent_id]

    # -- navigation ------------------------------------------------------

    def node(self, node_id: int) -> ConceptNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"no node with id {node_id}") from None

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def node_ids(self) -> list[int]:
        return sorted(self._nodes)

    def level_ids(self, level: int) -> list[int]:
        if level not in self.levels:
            raise UnknownNodeError(f"hierarchy has no level {level}")
        return list(self.levels[level])

    def children(self, node_id: int) -> list[int]:
        """Ordered (ascending) ids of the direct children of ``node_id``."""
        if node_id not in self._nodes:
            raise UnknownNodeError(f"no node with id {node_id}")
        return list(self.children_index[node_id])

    def parent(self, node_id: int) -> Optional[int]:
        return self.node(node_id).parent_id

    def ancestor_at_level(self, node_id: int, level: int) -> int:
        """Ascend parent links until ``level`` (granularity-adaptive lookup)."""
        n = self.node(node_id)
        if level > n.level:
            raise UnknownNodeError(f"node {node_id} is above level {level}")
        while n.level > level:
            n = self.node(n.parent_id)
        return n.id

    def slot(self, node_id: int) -> int:
        """Row index of ``node_id`` within its level's ordered id list."""
        n = self.node(node_id)
        return self.levels[n.level].index(node_id)

    # -- aggregation -----------------------------------------------------

    def aggregate_children(self, parent_id: int, child_prob_maps: Mapping[int, np.ndarray]) -> np.ndarray:
        """Pixelwise max of the parent's children probability maps.

        ``child_prob_maps`` maps child node id -> probability array; all
        arrays must share a shape. Returns zeros if the parent is a leaf.
        """
        kids = self.children(parent_id)
        shapes = {np.asarray(m).shape for m in child_prob_maps.values()}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"child maps disagree on shape: {sorted(shapes)}")
        if not kids:
            if not shapes:
                raise ShapeMismatchError("leaf parent needs at least one map to infer shape")
            return np.zeros(next(iter(shapes)))
        missing = [c for c in kids if c not in child_prob_maps]
        if missing:
            raise ShapeMismatchError(f"missing child maps for {missing}")
        return np.maximum.reduce([np.asarray(child_prob_maps[c], dtype=float) for c in kids])

    # -- serialization ---------------------------------------------------

    def to_spec(self) -> dict:
        nodes = []
        for nid in self.node_ids:
            n = self._nodes[nid]
            entry = {"id": n.id, "name": n.name, "level": n.level}
            if n.parent_id is not None:
                entry["parent"] = n.parent_id
            nodes.append(entry)
        return {"nodes": nodes}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_spec(), f, indent=2, sort_keys=True)
            f.write("\n")

    def spec_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_spec(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, ConceptHierarchy) and self.to_spec() == other.to_spec()


def build_hierarchy(spec: Mapping | Iterable[ConceptNode]) -> ConceptHierarchy:
    """Build and validate a hierarchy from a spec dict or node iterable.

    Spec format: ``{"nodes": [{"id":1,"name":"anatomy","level":0},
    {"id":4,"name":"liver","level":1,"parent":1}, ...]}``.
    """
    if isinstance(spec, Mapping):
        nodes = [
            ConceptNode(
                id=e["id"], name=e["name"], level=e["level"], parent_id=e.get("parent")
            )
            for e in spec["nodes"]
        ]
    else:
        nodes = list(spec)
    return ConceptHierarchy(nodes)


def load_hierarchy(path) -> ConceptHierarchy:
    with open(path, "r", encoding="utf-8") as f:
        return build_hierarchy(json.load(f))


@dataclass
class LabelMapping:
    """Maps external dataset category strings onto hierarchy node ids."""

    dataset_name: str
    entries: dict[str, int] = field(default_factory=dict)

    def register(self, hierarchy: ConceptHierarchy, category: str, node_id: int):
        if node_id not in hierarchy:
            raise UnknownNodeError(f"cannot map {category!r} to unknown node {node_id}")
        self.entries[category] = node_id

    def map_category(self, hierarchy: ConceptHierarchy, category: str) -> int:
        """Resolve an external category string to a node id.

        Raises UnmappedCategoryError when the category is unknown; the
        caller may then register it or resolve at parent granularity via
        :meth:`ConceptHierarchy.ancestor_at_level`.
        """
        try:
            node_id = self.entries[category]
        except KeyError:
            raise UnmappedCategoryError(
                f"category {category!r} is not registered for {self.dataset_name!r}"
            ) from None
        if node_id not in hierarchy:
            raise UnknownNodeError(f"mapping for {category!r} points at unknown node {node_id}")
        return node_id

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"dataset_name": self.dataset_name, "entries": self.entries}, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "LabelMapping":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return cls(dataset_name=raw["dataset_name"], entries=dict(raw["entries"]))


def desk_taxonomy() -> ConceptHierarchy:
    """Small reference taxonomy for desk-scale runs: 3 parents, 8 children."""
    nodes = [
        ConceptNode(1, "organ", 0),
        ConceptNode(2, "soft_tissue", 0),
        ConceptNode(3, "tool", 0),
        ConceptNode(4, "organ_a", 1, 1),
        ConceptNode(5, "organ_b", 1, 1),
        ConceptNode(6, "organ_c", 1, 1),
        ConceptNode(7, "tissue_a", 1, 2),
        ConceptNode(8, "tissue_b", 1, 2),
        ConceptNode(9, "tool_a", 1, 3),
        ConceptNode(10, "tool_b", 1, 3),
        ConceptNode(11, "tool_c", 1, 3),
    ]
    return ConceptHierarchy(nodes)


def default_taxonomy() -> ConceptHierarchy:
    """The deployed two-level taxonomy: 3 root branches, 20 children.

    Anatomy (11 children), Tissue (2), Instrument (7).
    """
    anatomy = [
        "abdominal_wall", "liver", "gallbladder", "fat", "pancreas", "spleen",
        "stomach", "vein", "ureter", "uterus", "intestine",
    ]
    tissue = ["blood", "connective_tissue"]
    instrument = [
        "grasper", "hook", "scissors", "clipper", "irrigator", "specimen_bag", "trocar",
    ]
    nodes = [
        ConceptNode(1, "anatomy", 0),
        ConceptNode(2, "tissue", 0),
        ConceptNode(3, "instrument", 0),
    ]
    next_id = 4
    for parent, names in ((1, anatomy), (2, tissue), (3, instrument)):
        for name in names:
            nodes.append(ConceptNode(next_id, name, 1, parent))
            next_id += 1
    return ConceptHierarchy(nodes)
