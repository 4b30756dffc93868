"""Synthetic grid world: scenes, templated tasks, expert layouts, features.

A scene is a ``K x K`` grid holding at most one attributed object per
cell.  Tasks are generated from small templates; every template builds
its expert layout first and lets :func:`oracle.execute_expert` compute the
ground truth, so labels and layouts cannot drift apart.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import DataConfig
from .errors import GenerationError, LayoutError, RetrySignal
from .oracle import (
    ATTRIBUTES,
    COLORS,
    PLURALS,
    RELATIONS,
    SHAPES,
    SIZES,
    WILDCARDS,
    LayoutStep,
    attribute_filter,
    execute_expert,
    find_objects,
    layout_depth,
)

logger = logging.getLogger(__name__)

FEATURE_DIM = len(COLORS) + len(SHAPES) + len(SIZES) + 1 + 2
CENTER_JITTER = 0.1
HALF_EXTENT = {"small": 0.2, "large": 0.35}
EXTENT_JITTER = 0.03

VQA_FAMILIES: Tuple[str, ...] = (
    "exist", "count", "query_attr", "relate_exist", "relate_query", "compare_count", "compare_attr",
)
REF_FAMILIES: Tuple[str, ...] = ("ref_simple", "ref_relational")
FAMILIES: Tuple[str, ...] = VQA_FAMILIES + REF_FAMILIES

_RELATION_WORDS = {"left": ("left", "of"), "right": ("right", "of"), "above": ("above",), "below": ("below",)}
_PLURAL_OF = {v: k for k, v in PLURALS.items()}


class SceneObject(BaseModel):
    model_config = ConfigDict(extra="forbid")

    row: int = Field(ge=0)
    col: int = Field(ge=0)
    color: Literal["red", "green", "blue"]
    shape: Literal["circle", "square", "triangle"]
    size: Literal["small", "large"]
    box: Tuple[float, float, float, float]

    @model_validator(mode="after")
    def _ordered(self) -> "SceneObject":
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"box {self.box} is not well ordered")
        return self


class SceneRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: int = Field(ge=1)
    cell_size: float = Field(32.0, gt=0.0)
    seed: List[int] = Field(default_factory=list)
    objects: List[SceneObject] = Field(default_factory=list)

    @model_validator(mode="after")
    def _one_per_cell(self) -> "SceneRecord":
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        if any(r >= self.grid or c >= self.grid for r, c in cells):
            raise ValueError("object outside the grid")
        return self


class TaskRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    kind: Literal["vqa", "ref"]
    family: str
    template_id: str
    tokens: List[str] = Field(min_length=1)
    layout: List[LayoutStep]
    answer: Optional[str] = None
    target: Optional[int] = None
    target_box: Optional[Tuple[float, float, float, float]] = None
    scene: SceneRecord

    @model_validator(mode="after")
    def _label(self) -> "TaskRecord":
        if self.kind == "vqa" and self.answer is None:
            raise ValueError("vqa record needs an answer")
        if self.kind == "ref" and (self.target is None or self.target_box is None):
            raise ValueError("ref record needs a target and target_box")
        return self

    @property
    def target_cell(self) -> Tuple[int, int]:
        obj = self.scene.objects[self.target]  # type: ignore[index]
        return obj.row, obj.col

    @property
    def expert_modules(self) -> List[str]:
        return [s.module for s in self.layout]


# -- scenes ---------------------------------------------------------------
def generate_scene(
    grid: int,
    n_objects: int,
    rng: np.random.Generator,
    *,
    cell_size: float = 32.0,
    seed: Sequence[int] = (),
) -> SceneRecord:
    if n_objects > grid * grid:
        raise GenerationError(f"cannot place {n_objects} objects on a {grid}x{grid} grid")
    if n_objects < 0:
        raise GenerationError("object count must be nonnegative")
    cells = rng.choice(grid * grid, size=n_objects, replace=False) if n_objects else []
    objects = []
    for cell in sorted(int(c) for c in cells):
        row, col = divmod(cell, grid)
        color = COLORS[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size = SIZES[int(rng.integers(len(SIZES)))]
        cx = (col + 0.5 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)) * cell_size
        cy = (row + 0.5 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)) * cell_size
        half = (HALF_EXTENT[size] + rng.uniform(-EXTENT_JITTER, EXTENT_JITTER)) * cell_size
        objects.append(SceneObject(row=row, col=col, color=color, shape=shape, size=size,
                                   box=(cx - half, cy - half, cx + half, cy + half)))
    return SceneRecord(grid=grid, cell_size=cell_size, seed=list(seed), objects=objects)


def render_features(scene: SceneRecord) -> np.ndarray:
    """``[K, K, 11]``: color, shape and size one-hots, presence, then (row, col) centres in [0, 1]."""
    k = scene.grid
    x = np.zeros((k, k, FEATURE_DIM), dtype=np.float64)
    centres = (np.arange(k) + 0.5) / k
    x[:, :, -2] = centres[:, None]
    x[:, :, -1] = centres[None, :]
    for o in scene.objects:
        x[o.row, o.col, COLORS.index(o.color)] = 1.0
        x[o.row, o.col, len(COLORS) + SHAPES.index(o.shape)] = 1.0
        x[o.row, o.col, len(COLORS) + len(SHAPES) + SIZES.index(o.size)] = 1.0
        x[o.row, o.col, len(COLORS) + len(SHAPES) + len(SIZES)] = 1.0
    return x


# -- vocabularies ---------------------------------------------------------
_TEMPLATE_WORDS = (
    "is there a an the are how many what of or and than as same number more fewer anything "
    "objects things thing object color shape size"
).split()


def build_vocabulary() -> List[str]:
    words = set(_TEMPLATE_WORDS) | set(COLORS) | set(SHAPES) | set(SIZES) | set(PLURALS) | set(WILDCARDS)
    for rel in _RELATION_WORDS.values():
        words.update(rel)
    return sorted(words)


def build_answer_vocabulary(max_objects: int) -> List[str]:
    return ["yes", "no"] + [str(n) for n in range(max_objects + 1)] + list(COLORS) + list(SHAPES) + list(SIZES)


# -- descriptions ---------------------------------------------------------
def describe(obj: SceneObject, attrs: Sequence[str], *, plural: bool = False) -> List[str]:
    words: List[str] = []
    if "size" in attrs:
        words.append(obj.size)
    if "color" in attrs:
        words.append(obj.color)
    if "shape" in attrs:
        words.append(_PLURAL_OF[obj.shape] if plural else obj.shape)
    else:
        words.append("things" if plural else "thing")
    return words


_ATTR_SUBSETS: Tuple[Tuple[str, ...], ...] = (
    ("color",), ("shape",), ("size",), ("color", "shape"), ("size", "shape"), ("size", "color"),
    ("size", "color", "shape"),
)


def _random_description(obj: SceneObject, rng: np.random.Generator, *, plural: bool = False) -> List[str]:
    attrs = _ATTR_SUBSETS[int(rng.integers(len(_ATTR_SUBSETS)))]
    return describe(obj, attrs, plural=plural)


def _unique_description(scene: SceneRecord, index: int, rng: np.random.Generator) -> List[str]:
    order = rng.permutation(len(_ATTR_SUBSETS))
    for k in order:
        words = describe(scene.objects[index], _ATTR_SUBSETS[int(k)])
        if find_objects(scene, words) == frozenset({index}):
            return words
    raise RetrySignal("no description singles out the object")


def _pick_object(scene: SceneRecord, rng: np.random.Generator) -> int:
    if not scene.objects:
        raise RetrySignal("empty scene")
    return int(rng.integers(len(scene.objects)))


def _random_relation(rng: np.random.Generator) -> str:
    return RELATIONS[int(rng.integers(len(RELATIONS)))]


def _article(words: Sequence[str]) -> str:
    return "an" if words[0][0] in "aeiou" else "a"


# -- templates ------------------------------------------------------------
@dataclass(frozen=True)
class Draft:
    tokens: List[str]
    layout: List[LayoutStep]


def _step(module: str, *span: str) -> LayoutStep:
    return LayoutStep(module=module, span=tuple(span))


def _t_exist_plain(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    # sample from a random object half the time so "yes" stays reachable
    if scene.objects and rng.random() < 0.5:
        d = _random_description(scene.objects[_pick_object(scene, rng)], rng)
    else:
        d = describe(_phantom(rng), _ATTR_SUBSETS[int(rng.integers(len(_ATTR_SUBSETS)))])
    return Draft(["is", "there", _article(d), *d], [_step("Find", *d), _step("Answer", "is", "there")])


def _phantom(rng: np.random.Generator) -> SceneObject:
    return SceneObject(row=0, col=0, color=COLORS[int(rng.integers(3))], shape=SHAPES[int(rng.integers(3))],
                       size=SIZES[int(rng.integers(2))], box=(0.0, 0.0, 1.0, 1.0))


def _t_count_plain(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    d = _random_description(_phantom(rng), rng, plural=True)
    return Draft(["how", "many", *d, "are", "there"], [_step("Find", *d), _step("Answer", "how", "many")])


def _t_count_scene(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    return Draft(["how", "many", "objects", "are", "there"], [_step("Scene"), _step("Answer", "how", "many")])


def _t_count_or(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    attr1, attr2 = rng.choice(list(ATTRIBUTES), size=2, replace=False)
    w1 = _attribute_word(str(attr1), rng)
    w2 = _attribute_word(str(attr2), rng)
    return Draft(
        ["how", "many", "things", "are", w1, "or", w2],
        [_step("Find", w1), _step("Find", w2), _step("Or", "or"), _step("Answer", "how", "many")],
    )


def _attribute_word(attr: str, rng: np.random.Generator) -> str:
    values = ATTRIBUTES[attr]
    word = values[int(rng.integers(len(values)))]
    return _PLURAL_OF[word] if attr == "shape" else word


def _t_count_relate(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    anchor = _unique_description(scene, _pick_object(scene, rng), rng)
    rel = _RELATION_WORDS[_random_relation(rng)]
    return Draft(
        ["how", "many", "things", "are", *rel, "the", *anchor],
        [_step("Find", *anchor), _step("Transform", *rel), _step("Answer", "how", "many")],
    )


def _t_query_attr(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    index = _pick_object(scene, rng)
    d = _unique_description(scene, index, rng)
    asked = [a for a in ATTRIBUTES if a not in _attrs_named(d)] or list(ATTRIBUTES)
    attr = asked[int(rng.integers(len(asked)))]
    return Draft(["what", attr, "is", "the", *d], [_step("Find", *d), _step("Answer", "what", attr)])


def _attrs_named(words: Sequence[str]) -> List[str]:
    return list(attribute_filter(words))


def _t_relate_exist(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    anchor = _unique_description(scene, _pick_object(scene, rng), rng)
    rel = _RELATION_WORDS[_random_relation(rng)]
    d = _random_description(scene.objects[_pick_object(scene, rng)], rng)
    return Draft(
        ["is", "there", _article(d), *d, *rel, "the", *anchor],
        [_step("Find", *anchor), _step("Transform", *rel), _step("Filter", *d), _step("Answer", "is", "there")],
    )


def _t_relate_and(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    a1 = _unique_description(scene, _pick_object(scene, rng), rng)
    a2 = _unique_description(scene, _pick_object(scene, rng), rng)
    r1 = _RELATION_WORDS[_random_relation(rng)]
    r2 = _RELATION_WORDS[_random_relation(rng)]
    return Draft(
        ["is", "there", "anything", *r1, "the", *a1, "and", *r2, "the", *a2],
        [
            _step("Find", *a1), _step("Transform", *r1),
            _step("Find", *a2), _step("Transform", *r2),
            _step("And", "and"), _step("Answer", "is", "there"),
        ],
    )


def _t_relate_query(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    anchor = _unique_description(scene, _pick_object(scene, rng), rng)
    rel = _RELATION_WORDS[_random_relation(rng)]
    d = _random_description(scene.objects[_pick_object(scene, rng)], rng)
    attr = list(ATTRIBUTES)[int(rng.integers(len(ATTRIBUTES)))]
    return Draft(
        ["what", attr, "is", "the", *d, *rel, "the", *anchor],
        [_step("Find", *anchor), _step("Transform", *rel), _step("Filter", *d), _step("Answer", "what", attr)],
    )


def _t_compare_count(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    d1 = _random_description(_phantom(rng), rng, plural=True)
    d2 = _random_description(_phantom(rng), rng, plural=True)
    if d1 == d2:
        raise RetrySignal("identical comparison operands")
    kind = ("more", "fewer", "same")[int(rng.integers(3))]
    if kind == "same":
        tokens = ["are", "there", "the", "same", "number", "of", *d1, "and", *d2]
        span: Tuple[str, ...] = ("same", "number")
    else:
        tokens = ["are", "there", kind, *d1, "than", *d2]
        span = (kind,)
    return Draft(tokens, [_step("Find", *d1), _step("Find", *d2), _step("Compare", *span)])


def _t_compare_attr(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    if len(scene.objects) < 2:
        raise RetrySignal("need two objects")
    i, j = (int(v) for v in rng.choice(len(scene.objects), size=2, replace=False))
    d1 = _unique_description(scene, i, rng)
    d2 = _unique_description(scene, j, rng)
    attr = list(ATTRIBUTES)[int(rng.integers(len(ATTRIBUTES)))]
    return Draft(
        ["is", "the", *d1, "the", "same", attr, "as", "the", *d2],
        [_step("Find", *d1), _step("Find", *d2), _step("Compare", "same", attr)],
    )


def _t_ref_simple(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    d = _unique_description(scene, _pick_object(scene, rng), rng)
    return Draft(["the", *d], [_step("Find", *d)])


def _t_ref_relational(scene: SceneRecord, rng: np.random.Generator) -> Draft:
    anchor = _unique_description(scene, _pick_object(scene, rng), rng)
    rel = _RELATION_WORDS[_random_relation(rng)]
    d = _random_description(scene.objects[_pick_object(scene, rng)], rng)
    return Draft(
        ["the", *d, *rel, "the", *anchor],
        [_step("Find", *anchor), _step("Transform", *rel), _step("Filter", *d)],
    )


Template = Callable[[SceneRecord, np.random.Generator], Draft]

TEMPLATES: Dict[str, Dict[str, Template]] = {
    "exist": {"exist_plain": _t_exist_plain},
    "count": {
        "count_plain": _t_count_plain,
        "count_scene": _t_count_scene,
        "count_or": _t_count_or,
        "count_relate": _t_count_relate,
    },
    "query_attr": {"query_attr": _t_query_attr},
    "relate_exist": {"relate_exist": _t_relate_exist, "relate_and": _t_relate_and},
    "relate_query": {"relate_query": _t_relate_query},
    "compare_count": {"compare_count": _t_compare_count},
    "compare_attr": {"compare_attr": _t_compare_attr},
    "ref_simple": {"ref_simple": _t_ref_simple},
    "ref_relational": {"ref_relational": _t_ref_relational},
}


def pad_layout(layout: Sequence[LayoutStep], steps: int) -> List[LayoutStep]:
    if len(layout) > steps:
        raise LayoutError(f"layout of {len(layout)} modules does not fit in {steps} steps")
    return list(layout) + [LayoutStep(module="NoOp")] * (steps - len(layout))


def generate_task(
    scene: SceneRecord,
    family: str,
    rng: np.random.Generator,
    *,
    steps: int = 6,
    task_id: str = "",
) -> TaskRecord:
    """One task of ``family`` on ``scene``; raises :class:`RetrySignal` if the draw does not apply."""
    if family not in TEMPLATES:
        raise ValueError(f"unknown family {family!r}; expected one of {list(TEMPLATES)}")
    templates = {k: t for k, t in TEMPLATES[family].items()}
    names = sorted(templates)
    name = names[int(rng.integers(len(names)))]
    draft = templates[name](scene, rng)
    if len(draft.layout) > steps:
        raise RetrySignal(f"template {name} needs {len(draft.layout)} steps")
    layout_depth(draft.layout)
    try:
        result = execute_expert(draft.layout, scene)
    except LayoutError as exc:
        raise RetrySignal(str(exc)) from exc
    padded = pad_layout(draft.layout, steps)
    if family in REF_FAMILIES:
        if len(result.objects) != 1:
            raise RetrySignal(f"expression matches {len(result.objects)} objects")
        target = next(iter(result.objects))
        return TaskRecord(
            id=task_id, kind="ref", family=family, template_id=name, tokens=draft.tokens, layout=padded,
            target=target, target_box=scene.objects[target].box, scene=scene,
        )
    if result.answer is None:
        raise GenerationError(f"template {name} produced no answer")
    return TaskRecord(
        id=task_id, kind="vqa", family=family, template_id=name, tokens=draft.tokens, layout=padded,
        answer=result.answer, scene=scene,
    )


def _keyed_scene(key: Sequence[int], data: DataConfig) -> Tuple[SceneRecord, np.random.Generator]:
    rng = np.random.default_rng(list(key))
    n_objects = int(rng.integers(data.min_objects, data.max_objects + 1))
    return generate_scene(data.grid, n_objects, rng, cell_size=data.cell_size, seed=key), rng


def regenerate_scene(key: Sequence[int], data: DataConfig) -> SceneRecord:
    """Rebuild the scene stored with rng key ``key`` (``SceneRecord.seed``) under ``data``."""
    return _keyed_scene(key, data)[0]


# -- splits ---------------------------------------------------------------
@dataclass
class SplitStats:
    records: int = 0
    rejected_retry: int = 0
    rejected_majority: int = 0
    families: Counter = field(default_factory=Counter)
    answers: Dict[str, Counter] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "records": self.records,
            "rejected_retry": self.rejected_retry,
            "rejected_majority": self.rejected_majority,
            "families": dict(sorted(self.families.items())),
            "answers": {f: dict(sorted(c.items())) for f, c in sorted(self.answers.items())},
        }


def _family_quota(total: int, families: Sequence[str]) -> Dict[str, int]:
    base, extra = divmod(total, len(families))
    return {f: base + (1 if i < extra else 0) for i, f in enumerate(families)}


def _majority_limit(quota: int, cap: float) -> int:
    # a binary family cannot go below half, whatever the cap says
    return max(int(math.floor(cap * quota)), int(math.ceil(quota / 2)), 1)


def generate_split(
    name: str,
    size: int,
    data: DataConfig,
    *,
    steps: int = 6,
    split_index: int = 0,
    tasks: Sequence[str] = ("vqa", "ref"),
) -> Tuple[List[TaskRecord], SplitStats]:
    """``size`` records per task kind, families assigned round-robin, majority-capped per family."""
    stats = SplitStats()
    records: List[TaskRecord] = []
    for kind in tasks:
        families = VQA_FAMILIES if kind == "vqa" else REF_FAMILIES
        quota = _family_quota(size, families)
        for family in families:
            limit = _majority_limit(quota[family], data.majority_cap)
            answers: Counter = Counter()
            for n in range(quota[family]):
                record_id = f"{name}-{family}-{n:05d}"
                record = None
                for attempt in range(data.max_attempts):
                    key = [data.seed, split_index, FAMILIES.index(family), n, attempt]
                    scene, rng = _keyed_scene(key, data)
                    try:
                        candidate = generate_task(scene, family, rng, steps=steps, task_id=record_id)
                    except RetrySignal:
                        stats.rejected_retry += 1
                        continue
                    if candidate.kind == "vqa" and answers[candidate.answer] >= limit:
                        stats.rejected_majority += 1
                        continue
                    record = candidate
                    break
                if record is None:
                    raise GenerationError(f"{record_id}: no valid task after {data.max_attempts} attempts")
                if record.kind == "vqa":
                    answers[record.answer] += 1
                records.append(record)
                stats.families[family] += 1
            if answers:
                stats.answers[family] = answers
    stats.records = len(records)
    logger.debug("split %s: %d records, %d retries, %d majority rejections",
                 name, stats.records, stats.rejected_retry, stats.rejected_majority)
    return records, stats
