"""The module library.

Each module is a pure function of the per-example :class:`ModuleContext`
(feature map, parameters, cached x-only terms), the textual parameter ``c``
and the attention maps it pops.  Attention maps are ``[H, W]`` tensors of
unnormalized scores; answer modules return logits over the answer
vocabulary.  Stack handling lives in the executor, which consults only
:data:`MODULE_SPECS`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Tuple

from . import tensor as T
from .errors import ShapeError
from .nn import ParameterStore
from .tensor import Tensor

MODULE_NAMES: Tuple[str, ...] = ("Find", "Transform", "And", "Or", "Filter", "Scene", "Answer", "Compare", "NoOp")
MODULE_INDEX: Dict[str, int] = {name: i for i, name in enumerate(MODULE_NAMES)}

Output = Literal["attention", "answer", "none"]


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    arity: int
    output: Output


MODULE_SPECS: Dict[str, ModuleSpec] = {
    "Find": ModuleSpec("Find", 0, "attention"),
    "Transform": ModuleSpec("Transform", 1, "attention"),
    "And": ModuleSpec("And", 2, "attention"),
    "Or": ModuleSpec("Or", 2, "attention"),
    "Filter": ModuleSpec("Filter", 1, "attention"),
    "Scene": ModuleSpec("Scene", 0, "attention"),
    "Answer": ModuleSpec("Answer", 1, "answer"),
    "Compare": ModuleSpec("Compare", 2, "answer"),
    "NoOp": ModuleSpec("NoOp", 0, "none"),
}
ANSWER_MODULES: Tuple[str, ...] = tuple(n for n in MODULE_NAMES if MODULE_SPECS[n].output == "answer")


def init_modules(store: ParameterStore, feature_dim: int, hidden: int, answer_size: int, kernel: int = 1) -> None:
    d, f = hidden, feature_dim
    patch = kernel * kernel * f
    for prefix in ("find", "transform"):
        store.create(f"{prefix}/conv1_w", (patch, d))
        store.create(f"{prefix}/conv1_b", (d,), init="zeros")
        store.create(f"{prefix}/text_w", (d, d))
        store.create(f"{prefix}/conv2_w", (d, 1))
        store.create(f"{prefix}/conv2_b", (1,), init="zeros")
    store.create("transform/att_w", (f, d))
    store.create("scene/conv_w", (patch, 1))
    store.create("scene/conv_b", (1,), init="zeros")
    store.create("answer/feat_w", (f, d))
    store.create("answer/text_w", (d, d))
    store.create("answer/out_w", (d, answer_size))
    store.create("compare/feat1_w", (f, d))
    store.create("compare/feat2_w", (f, d))
    store.create("compare/text_w", (d, d))
    store.create("compare/out_w", (d, answer_size))


@dataclass
class ModuleContext:
    """Per-example state shared by every step: ``x`` and its x-only transforms."""

    x: Tensor
    params: ParameterStore
    kernel: int = 1
    _cache: Dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.x.ndim != 3:
            raise ShapeError(f"feature map must be [H, W, D], got {self.x.shape}")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.x.shape[0], self.x.shape[1]

    def conv1(self, prefix: str) -> Tensor:
        key = f"{prefix}/conv1"
        if key not in self._cache:
            p = self.params
            self._cache[key] = T.conv2d_same(self.x, p[f"{prefix}/conv1_w"], p[f"{prefix}/conv1_b"], self.kernel)
        return self._cache[key]

    def scene_map(self) -> Tensor:
        if "scene" not in self._cache:
            p = self.params
            out = T.conv2d_same(self.x, p["scene/conv_w"], p["scene/conv_b"], self.kernel)
            self._cache["scene"] = out.reshape(self.grid)
        return self._cache["scene"]


def _check_map(ctx: ModuleContext, a: Tensor) -> None:
    if a.shape != ctx.grid:
        raise ShapeError(f"attention map {a.shape} does not match feature grid {ctx.grid}")


def _to_map(ctx: ModuleContext, prefix: str, hidden: Tensor) -> Tensor:
    p = ctx.params
    return T.conv_1x1(hidden, p[f"{prefix}/conv2_w"], p[f"{prefix}/conv2_b"]).reshape(ctx.grid)


def find(ctx: ModuleContext, c: Tensor) -> Tensor:
    text = (c @ ctx.params["find/text_w"]).reshape(1, 1, -1)
    return _to_map(ctx, "find", ctx.conv1("find") * text)


def transform(ctx: ModuleContext, a: Tensor, c: Tensor) -> Tensor:
    _check_map(ctx, a)
    p = ctx.params
    attended = (T.attended_sum(a, ctx.x) @ p["transform/att_w"]).reshape(1, 1, -1)
    text = (c @ p["transform/text_w"]).reshape(1, 1, -1)
    return _to_map(ctx, "transform", ctx.conv1("transform") * attended * text)


def and_(a1: Tensor, a2: Tensor) -> Tensor:
    if a1.shape != a2.shape:
        raise ShapeError(f"And: maps {a1.shape} and {a2.shape} differ")
    return T.minimum(a1, a2)


def or_(a1: Tensor, a2: Tensor) -> Tensor:
    if a1.shape != a2.shape:
        raise ShapeError(f"Or: maps {a1.shape} and {a2.shape} differ")
    return T.maximum(a1, a2)


def filter_(ctx: ModuleContext, a: Tensor, c: Tensor, find_map: Optional[Tensor] = None) -> Tensor:
    """``And(a, Find(c))``; pass the step's Find output as ``find_map`` to reuse it."""
    _check_map(ctx, a)
    return and_(a, find_map if find_map is not None else find(ctx, c))


def scene(ctx: ModuleContext) -> Tensor:
    return ctx.scene_map()


def answer(ctx: ModuleContext, a: Tensor, c: Tensor) -> Tensor:
    _check_map(ctx, a)
    p = ctx.params
    feat = T.attended_sum(a, ctx.x) @ p["answer/feat_w"]
    return (feat * (c @ p["answer/text_w"])) @ p["answer/out_w"]


def compare(ctx: ModuleContext, a1: Tensor, a2: Tensor, c: Tensor) -> Tensor:
    _check_map(ctx, a1)
    _check_map(ctx, a2)
    p = ctx.params
    f1 = T.attended_sum(a1, ctx.x) @ p["compare/feat1_w"]
    f2 = T.attended_sum(a2, ctx.x) @ p["compare/feat2_w"]
    return (f1 * f2 * (c @ p["compare/text_w"])) @ p["compare/out_w"]


def noop(stack):
    return stack
