"""Symbolic layout interpreter over grid scenes.

Attention values are sets of object indices.  Layouts are postorder module
sequences; each step carries the words it was generated from, and those
words alone decide what the step does (which attributes Find matches,
which relation Transform follows, which question Answer asks).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Protocol, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .errors import LayoutError
from .modules import MODULE_SPECS

COLORS: Tuple[str, ...] = ("red", "green", "blue")
SHAPES: Tuple[str, ...] = ("circle", "square", "triangle")
SIZES: Tuple[str, ...] = ("small", "large")
ATTRIBUTES: Dict[str, Tuple[str, ...]] = {"color": COLORS, "shape": SHAPES, "size": SIZES}
PLURALS: Dict[str, str] = {"circles": "circle", "squares": "square", "triangles": "triangle"}
WILDCARDS = frozenset({"object", "objects", "thing", "things", "anything"})
RELATIONS: Tuple[str, ...] = ("left", "right", "above", "below")

_WORD_ATTRIBUTE: Dict[str, Tuple[str, str]] = {}
for _attr, _values in ATTRIBUTES.items():
    for _v in _values:
        _WORD_ATTRIBUTE[_v] = (_attr, _v)
for _plural, _single in PLURALS.items():
    _WORD_ATTRIBUTE[_plural] = ("shape", _single)


class SceneObjectLike(Protocol):
    row: int
    col: int
    color: str
    shape: str
    size: str


class SceneLike(Protocol):
    objects: Sequence[SceneObjectLike]


class LayoutStep(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    module: str
    span: Tuple[str, ...] = Field(default_factory=tuple)


@dataclass(frozen=True)
class ExpertResult:
    answer: Optional[str]
    objects: FrozenSet[int]


ObjectSet = FrozenSet[int]


def attribute_filter(words: Sequence[str]) -> Dict[str, str]:
    """Attribute constraints named by ``words``; unknown words are ignored."""
    wanted: Dict[str, str] = {}
    for w in words:
        hit = _WORD_ATTRIBUTE.get(w)
        if hit is None:
            continue
        attr, value = hit
        if attr in wanted and wanted[attr] != value:
            raise LayoutError(f"conflicting {attr} words in {list(words)}")
        wanted[attr] = value
    return wanted


def find_objects(scene: SceneLike, words: Sequence[str]) -> ObjectSet:
    wanted = attribute_filter(words)
    return frozenset(
        i for i, o in enumerate(scene.objects) if all(getattr(o, a) == v for a, v in wanted.items())
    )


def relation_of(words: Sequence[str]) -> str:
    found = [w for w in words if w in RELATIONS]
    if len(found) != 1:
        raise LayoutError(f"expected exactly one relation word in {list(words)}")
    return found[0]


def holds(relation: str, o: SceneObjectLike, s: SceneObjectLike) -> bool:
    """``o`` is ``relation`` of ``s``; strict comparisons on cell indices."""
    if relation == "left":
        return o.col < s.col
    if relation == "right":
        return o.col > s.col
    if relation == "above":
        return o.row < s.row
    if relation == "below":
        return o.row > s.row
    raise LayoutError(f"unknown relation {relation!r}")


def relate(scene: SceneLike, anchors: ObjectSet, relation: str) -> ObjectSet:
    objs = scene.objects
    return frozenset(
        i for i, o in enumerate(objs)
        if any(i != j and holds(relation, o, objs[j]) for j in anchors)
    )


def _single(scene: SceneLike, objects: ObjectSet, what: str) -> SceneObjectLike:
    if len(objects) != 1:
        raise LayoutError(f"{what} needs exactly one object, got {len(objects)}")
    return scene.objects[next(iter(objects))]


def answer_query(scene: SceneLike, objects: ObjectSet, words: Sequence[str]) -> str:
    if "many" in words or "number" in words:
        return str(len(objects))
    for attr in ATTRIBUTES:
        if attr in words:
            return getattr(_single(scene, objects, f"query {attr}"), attr)
    if "there" in words or "any" in words or "is" in words:
        return "yes" if objects else "no"
    raise LayoutError(f"cannot tell which question {list(words)} asks")


def compare_query(scene: SceneLike, first: ObjectSet, second: ObjectSet, words: Sequence[str]) -> str:
    if "same" in words:
        if "number" in words:
            return "yes" if len(first) == len(second) else "no"
        for attr in ATTRIBUTES:
            if attr in words:
                a = _single(scene, first, "compare")
                b = _single(scene, second, "compare")
                return "yes" if getattr(a, attr) == getattr(b, attr) else "no"
        raise LayoutError(f"'same' without an attribute or 'number' in {list(words)}")
    if "more" in words:
        return "yes" if len(first) > len(second) else "no"
    if "fewer" in words:
        return "yes" if len(first) < len(second) else "no"
    raise LayoutError(f"cannot tell which comparison {list(words)} asks")


def execute_expert(layout: Sequence[LayoutStep], scene: SceneLike) -> ExpertResult:
    """Run a postorder layout with exact set semantics.

    Mirrors the neural executor's stack discipline: the first pop is the
    last argument, Answer pushes its input back and Compare pushes back the
    map it popped first.  The result carries the last answer produced (if
    any) and the set on top of the stack at the end.
    """
    everything = frozenset(range(len(scene.objects)))
    stack: List[ObjectSet] = [everything]
    answer: Optional[str] = None

    def pop(step_index: int, module: str) -> ObjectSet:
        if len(stack) <= 1:
            raise LayoutError(f"step {step_index}: {module} pops from an empty stack")
        return stack.pop()

    handlers: Dict[str, Callable[[int, LayoutStep], None]] = {}

    def _find(i: int, step: LayoutStep) -> None:
        stack.append(find_objects(scene, step.span))

    def _transform(i: int, step: LayoutStep) -> None:
        stack.append(relate(scene, pop(i, step.module), relation_of(step.span)))

    def _and(i: int, step: LayoutStep) -> None:
        second, first = pop(i, step.module), pop(i, step.module)
        stack.append(first & second)

    def _or(i: int, step: LayoutStep) -> None:
        second, first = pop(i, step.module), pop(i, step.module)
        stack.append(first | second)

    def _filter(i: int, step: LayoutStep) -> None:
        stack.append(pop(i, step.module) & find_objects(scene, step.span))

    def _scene(i: int, step: LayoutStep) -> None:
        stack.append(everything)

    def _answer(i: int, step: LayoutStep) -> None:
        nonlocal answer
        objects = pop(i, step.module)
        answer = answer_query(scene, objects, step.span)
        stack.append(objects)

    def _compare(i: int, step: LayoutStep) -> None:
        nonlocal answer
        second, first = pop(i, step.module), pop(i, step.module)
        answer = compare_query(scene, first, second, step.span)
        stack.append(second)

    handlers.update(
        Find=_find, Transform=_transform, And=_and, Or=_or, Filter=_filter,
        Scene=_scene, Answer=_answer, Compare=_compare, NoOp=lambda i, s: None,
    )
    for i, step in enumerate(layout):
        if step.module not in MODULE_SPECS:
            raise LayoutError(f"step {i}: unknown module {step.module!r}")
        handlers[step.module](i, step)
    return ExpertResult(answer=answer, objects=stack[-1])


def layout_depth(layout: Sequence[LayoutStep]) -> int:
    """Maximum number of maps above the initial one at any point of the layout."""
    height = peak = 0
    for i, step in enumerate(layout):
        spec = MODULE_SPECS[step.module]
        if spec.arity > height:
            raise LayoutError(f"step {i}: {step.module} needs {spec.arity} maps, stack holds {height}")
        height -= spec.arity
        if spec.output != "none":
            height += 1
        peak = max(peak, height)
    return peak
