from __future__ import annotations

import pytest

from stacknmn.errors import LayoutError
from stacknmn.oracle import (
    LayoutStep,
    answer_query,
    attribute_filter,
    compare_query,
    execute_expert,
    find_objects,
    holds,
    layout_depth,
    relate,
    relation_of,
)


def _l(*steps) -> list:
    return [LayoutStep(module=m, span=tuple(span)) for m, *span in steps]


@pytest.fixture
def scene(scene_factory):
    return scene_factory(
        (0, 0, "red", "circle", "small"),
        (0, 2, "blue", "square", "large"),
        (1, 1, "red", "square", "large"),
        (3, 4, "green", "triangle", "small"),
    )


def test_attribute_filter_reads_plurals_and_ignores_others():
    assert attribute_filter(["large", "red", "squares", "are"]) == {"size": "large", "color": "red", "shape": "square"}
    assert attribute_filter(["things"]) == {}
    with pytest.raises(LayoutError):
        attribute_filter(["red", "blue"])


def test_find_objects(scene):
    assert find_objects(scene, ["red"]) == {0, 2}
    assert find_objects(scene, ["red", "square"]) == {2}
    assert find_objects(scene, ["thing"]) == {0, 1, 2, 3}
    assert find_objects(scene, ["green", "circle"]) == frozenset()


def test_relations_are_strict_on_cells(scene):
    objs = scene.objects
    assert holds("left", objs[0], objs[1])
    assert not holds("left", objs[0], objs[0])
    assert holds("below", objs[2], objs[0])
    assert not holds("above", objs[1], objs[0])
    assert relate(scene, frozenset({2}), "above") == {0, 1}
    assert relate(scene, frozenset({2}), "right") == {1, 3}
    with pytest.raises(LayoutError):
        holds("near", objs[0], objs[1])


def test_relation_word_must_be_unique():
    assert relation_of(["left", "of"]) == "left"
    with pytest.raises(LayoutError):
        relation_of(["left", "right"])
    with pytest.raises(LayoutError):
        relation_of(["of"])


def test_answer_query_kinds(scene):
    assert answer_query(scene, frozenset({0, 2}), ["how", "many"]) == "2"
    assert answer_query(scene, frozenset(), ["is", "there"]) == "no"
    assert answer_query(scene, frozenset({3}), ["what", "color"]) == "green"
    with pytest.raises(LayoutError):
        answer_query(scene, frozenset({0, 2}), ["what", "shape"])
    with pytest.raises(LayoutError):
        answer_query(scene, frozenset({0}), ["why"])


def test_compare_query_kinds(scene):
    assert compare_query(scene, frozenset({0, 2}), frozenset({1}), ["more"]) == "yes"
    assert compare_query(scene, frozenset({0, 2}), frozenset({1}), ["fewer"]) == "no"
    assert compare_query(scene, frozenset({0}), frozenset({1}), ["same", "number"]) == "yes"
    assert compare_query(scene, frozenset({1}), frozenset({2}), ["same", "shape"]) == "yes"
    assert compare_query(scene, frozenset({0}), frozenset({1}), ["same", "color"]) == "no"


def test_exist_and_count_layouts(scene):
    assert execute_expert(_l(("Find", "red"), ("Answer", "is", "there")), scene).answer == "yes"
    assert execute_expert(_l(("Find", "green", "circle"), ("Answer", "is", "there")), scene).answer == "no"
    assert execute_expert(_l(("Scene",), ("Answer", "how", "many")), scene).answer == "4"
    layout = _l(("Find", "blue"), ("Find", "triangles"), ("Or", "or"), ("Answer", "how", "many"))
    assert execute_expert(layout, scene).answer == "2"


def test_relational_layouts(scene):
    layout = _l(("Find", "red", "square"), ("Transform", "above"), ("Filter", "blue"), ("Answer", "is", "there"))
    assert execute_expert(layout, scene).answer == "yes"
    layout = _l(
        ("Find", "blue"), ("Transform", "left", "of"),
        ("Find", "green"), ("Transform", "above"),
        ("And", "and"), ("Answer", "how", "many"),
    )
    # left of the blue square: cols < 2 -> {0, 2}; above the green triangle: rows < 3 -> {0, 1, 2}
    assert execute_expert(layout, scene).answer == "2"


def test_compare_argument_order(scene):
    layout = _l(("Find", "red"), ("Find", "blue"), ("Compare", "more"))
    assert execute_expert(layout, scene).answer == "yes"
    layout = _l(("Find", "blue"), ("Find", "red"), ("Compare", "more"))
    assert execute_expert(layout, scene).answer == "no"


def test_reference_result_is_top_set(scene):
    result = execute_expert(_l(("Find", "green")), scene)
    assert result.answer is None
    assert result.objects == {3}
    result = execute_expert(_l(("Find", "red"), ("Answer", "how", "many"), ("NoOp",)), scene)
    assert result.objects == {0, 2}


def test_popping_the_base_fails(scene):
    with pytest.raises(LayoutError):
        execute_expert(_l(("Answer", "is", "there")), scene)
    with pytest.raises(LayoutError):
        execute_expert(_l(("Find", "red"), ("And", "and")), scene)
    with pytest.raises(LayoutError):
        execute_expert(_l(("Lookup",)), scene)


def test_layout_depth():
    assert layout_depth(_l(("Find",), ("Answer",))) == 1
    assert layout_depth(_l(("Find",), ("Transform",), ("Find",), ("Transform",), ("And",), ("Answer",))) == 2
    assert layout_depth(_l(("NoOp",))) == 0
    with pytest.raises(LayoutError):
        layout_depth(_l(("Compare",)))
