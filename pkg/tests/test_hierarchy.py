import json

import numpy as np
import pytest

from hcep.errors import (
    DuplicateIdError,
    LevelError,
    OrphanError,
    ShapeMismatchError,
    UnknownNodeError,
    UnmappedCategoryError,
)
from hcep.hierarchy import (
    ConceptHierarchy,
    ConceptNode,
    LabelMapping,
    build_hierarchy,
    default_taxonomy,
    desk_taxonomy,
    load_hierarchy,
)


def _random_hierarchy(rng):
    n_parents = int(rng.integers(1, 5))
    nodes = [ConceptNode(i + 1, f"p{i}", 0) for i in range(n_parents)]
    next_id = n_parents + 1
    for pid in range(1, n_parents + 1):
        for k in range(int(rng.integers(0, 4))):
            nodes.append(ConceptNode(next_id, f"c{next_id}", 1, pid))
            next_id += 1
    return ConceptHierarchy(nodes)


class TestValidation:
    def test_background_id_rejected(self):
        with pytest.raises(DuplicateIdError):
            ConceptNode(0, "bg", 0)

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateIdError):
            ConceptHierarchy([ConceptNode(1, "a", 0), ConceptNode(1, "b", 0)])

    def test_duplicate_names_same_level(self):
        with pytest.raises(DuplicateIdError):
            ConceptHierarchy([ConceptNode(1, "a", 0), ConceptNode(2, "a", 0)])

    def test_missing_parent(self):
        with pytest.raises(OrphanError):
            ConceptHierarchy([ConceptNode(1, "a", 0), ConceptNode(2, "b", 1, 9)])

    def test_child_without_parent_field(self):
        with pytest.raises(OrphanError):
            ConceptNode(2, "b", 1)

    def test_root_with_parent(self):
        with pytest.raises(LevelError):
            ConceptNode(2, "b", 0, 1)

    def test_parent_at_wrong_level(self):
        # parent must sit exactly one level up
        nodes = [
            ConceptNode(1, "a", 0),
            ConceptNode(2, "b", 1, 1),
            ConceptNode(3, "c", 2, 1),
        ]
        with pytest.raises(LevelError):
            ConceptHierarchy(nodes)

    def test_empty(self):
        with pytest.raises(OrphanError):
            ConceptHierarchy([])


class TestNavigation:
    def test_levels_sorted_ascending(self, tiny_hierarchy):
        assert tiny_hierarchy.level_ids(0) == [1, 2]
        assert tiny_hierarchy.level_ids(1) == [3, 4, 5]

    def test_unknown_level(self, tiny_hierarchy):
        with pytest.raises(UnknownNodeError):
            tiny_hierarchy.level_ids(7)

    def test_children_against_scan_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h = _random_hierarchy(rng)
            for nid in h.node_ids:
                expected = sorted(
                    c for c in h.node_ids if h.node(c).parent_id == nid
                )
                assert h.children(nid) == expected

    def test_parent_and_slot(self, tiny_hierarchy):
        assert tiny_hierarchy.parent(5) == 2
        assert tiny_hierarchy.parent(1) is None
        assert tiny_hierarchy.slot(4) == 1
        assert tiny_hierarchy.slot(2) == 1

    def test_ancestor_at_level(self, tiny_hierarchy):
        assert tiny_hierarchy.ancestor_at_level(5, 0) == 2
        assert tiny_hierarchy.ancestor_at_level(5, 1) == 5
        with pytest.raises(UnknownNodeError):
            tiny_hierarchy.ancestor_at_level(1, 1)

    def test_unknown_node(self, tiny_hierarchy):
        with pytest.raises(UnknownNodeError):
            tiny_hierarchy.node(99)
        with pytest.raises(UnknownNodeError):
            tiny_hierarchy.children(99)

    def test_contains_len(self, tiny_hierarchy):
        assert 3 in tiny_hierarchy
        assert 0 not in tiny_hierarchy
        assert len(tiny_hierarchy) == 5


class TestAggregate:
    def test_matches_pixel_loop(self, tiny_hierarchy):
        rng = np.random.default_rng(1)
        maps = {c: rng.random((6, 6)) for c in (3, 4, 5)}
        out = tiny_hierarchy.aggregate_children(1, maps)
        for i in range(6):
            for j in range(6):
                assert out[i, j] == max(maps[3][i, j], maps[4][i, j])

    def test_leaf_parent_returns_zeros(self):
        h = ConceptHierarchy(
            [ConceptNode(1, "a", 0), ConceptNode(2, "b", 0), ConceptNode(3, "c", 1, 1)]
        )
        out = h.aggregate_children(2, {3: np.ones((4, 4))})
        assert (out == 0).all()

    def test_shape_mismatch(self, tiny_hierarchy):
        with pytest.raises(ShapeMismatchError):
            tiny_hierarchy.aggregate_children(
                1, {3: np.ones((4, 4)), 4: np.ones((5, 5)), 5: np.ones((4, 4))}
            )

    def test_missing_child_map(self, tiny_hierarchy):
        with pytest.raises(ShapeMismatchError):
            tiny_hierarchy.aggregate_children(1, {3: np.ones((4, 4))})


class TestSerialization:
    def test_round_trip(self, tmp_path, tiny_hierarchy):
        path = tmp_path / "h.json"
        tiny_hierarchy.save(path)
        again = load_hierarchy(path)
        assert again == tiny_hierarchy
        assert again.spec_hash() == tiny_hierarchy.spec_hash()

    def test_build_from_spec_dict(self, tiny_hierarchy):
        spec = tiny_hierarchy.to_spec()
        assert build_hierarchy(spec) == tiny_hierarchy

    def test_spec_hash_differs(self, tiny_hierarchy, desk):
        assert tiny_hierarchy.spec_hash() != desk.spec_hash()

    def test_spec_is_plain_json(self, tiny_hierarchy):
        json.dumps(tiny_hierarchy.to_spec())


class TestLabelMapping:
    def test_register_and_map(self, desk):
        m = LabelMapping("extern")
        m.register(desk, "liver-ish", 4)
        assert m.map_category(desk, "liver-ish") == 4

    def test_unmapped(self, desk):
        with pytest.raises(UnmappedCategoryError):
            LabelMapping("extern").map_category(desk, "nope")

    def test_register_unknown_node(self, desk):
        with pytest.raises(UnknownNodeError):
            LabelMapping("extern").register(desk, "x", 99)

    def test_round_trip(self, tmp_path, desk):
        m = LabelMapping("extern", {"a": 4, "b": 9})
        m.save(tmp_path / "m.json")
        again = LabelMapping.load(tmp_path / "m.json")
        assert again.dataset_name == "extern"
        assert again.entries == {"a": 4, "b": 9}

    def test_fallback_to_parent_granularity(self, desk):
        # the documented coarse-label path: map, then ascend
        m = LabelMapping("extern")
        m.register(desk, "fine", 10)
        assert desk.ancestor_at_level(m.map_category(desk, "fine"), 0) == 3


def test_desk_taxonomy_shape():
    h = desk_taxonomy()
    assert len(h.level_ids(0)) == 3
    assert len(h.level_ids(1)) == 8
    assert h.depth == 1


def test_default_taxonomy_shape():
    h = default_taxonomy()
    assert len(h.level_ids(0)) == 3
    assert len(h.level_ids(1)) == 20
    assert len(h.children(1)) == 11
    assert len(h.children(2)) == 2
    assert len(h.children(3)) == 7
