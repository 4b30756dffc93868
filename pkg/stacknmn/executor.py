"""Soft program execution over the module library.

Every step runs each module on the current stack, mixes the candidate
stacks by the controller's module weights, sharpens the pointer and adds
the weighted answer-module logits to the running answer.  In discretized
mode (or with a forced layout) the weights are one-hot and only the chosen
module runs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import stack as S
from . import tensor as T
from .config import ExecutionConfig
from .controller import ControllerStep, controller_step, encode, module_weight_entropy
from .errors import LayoutError, ShapeError
from .modules import (
    MODULE_INDEX,
    MODULE_NAMES,
    ModuleContext,
    and_,
    answer,
    compare,
    filter_,
    find,
    or_,
    scene,
    transform,
)
from .nn import ParameterStore
from .oracle import ExpertResult, execute_expert  # noqa: F401  (re-exported)
from .stack import MemoryStack
from .tensor import Tensor
from .trace import Trace, TraceStep, top_words

logger = logging.getLogger(__name__)

# widest box is 1000 / 16 cells, as in the usual detector box coders
MAX_LOG_SCALE = math.log(1000.0 / 16)


# -- boxes ----------------------------------------------------------------
def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def cell_box(cell: Tuple[int, int], cell_size: float) -> np.ndarray:
    row, col = cell
    return np.array([col, row, col + 1, row + 1], dtype=np.float64) * cell_size


def cell_of_point(x: float, y: float, cell_size: float, grid: int) -> Tuple[int, int]:
    col = min(max(int(x // cell_size), 0), grid - 1)
    row = min(max(int(y // cell_size), 0), grid - 1)
    return row, col


def encode_offsets(box: Sequence[float], cell: Tuple[int, int], cell_size: float) -> np.ndarray:
    """``(dcx, dcy, dlogw, dlogh)`` of ``box`` relative to ``cell``, in cell units."""
    x0, y0, x1, y1 = (float(v) for v in box)
    row, col = cell
    return np.array([
        (x0 + x1) / 2.0 / cell_size - (col + 0.5),
        (y0 + y1) / 2.0 / cell_size - (row + 0.5),
        math.log((x1 - x0) / cell_size),
        math.log((y1 - y0) / cell_size),
    ])


def decode_offsets(offsets: Sequence[float], cell: Tuple[int, int], cell_size: float) -> np.ndarray:
    dcx, dcy, dlw, dlh = (float(v) for v in offsets)
    row, col = cell
    cx = (col + 0.5 + dcx) * cell_size
    cy = (row + 0.5 + dcy) * cell_size
    w = cell_size * math.exp(min(max(dlw, -MAX_LOG_SCALE), MAX_LOG_SCALE))
    h = cell_size * math.exp(min(max(dlh, -MAX_LOG_SCALE), MAX_LOG_SCALE))
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def init_bbox_head(store: ParameterStore, feature_dim: int) -> None:
    store.create("bbox/w", (feature_dim, 4))
    store.create("bbox/b", (4,), init="zeros")


def decode_bbox(final_attention: Tensor, x: Tensor, params: ParameterStore, cell_size: float) -> Tuple[np.ndarray, Tensor, Tuple[int, int]]:
    """Box from the final attention: anchor at its argmax cell, offsets from the attended feature.

    Returns ``(box, offsets, anchor_cell)``; ``offsets`` stays in the graph
    so the regression loss can reach the head.
    """
    h, w = final_attention.shape
    weights = T.softmax(final_attention.reshape(h * w)).reshape(h, w)
    feature = T.attended_sum(weights, x)
    offsets = feature @ params["bbox/w"] + params["bbox/b"]
    anchor = tuple(int(v) for v in np.unravel_index(int(np.argmax(final_attention.data)), (h, w)))
    return decode_offsets(offsets.data, anchor, cell_size), offsets, anchor  # type: ignore[return-value]


# -- execution ------------------------------------------------------------
def init_stack(height: int, width: int, depth: int, *, strict_bounds: bool = False) -> MemoryStack:
    values = np.zeros((depth, height * width))
    values[0] = 1.0 / (height * width)
    pointer = np.zeros(depth)
    pointer[0] = 1.0
    return MemoryStack(T.Tensor(values), T.Tensor(pointer), strict_bounds)


@dataclass
class StepOutcome:
    stack: MemoryStack
    partial_answer: Tensor
    executed_weights: np.ndarray
    answer_weight: float


def _branch(name: str, stack: MemoryStack, ctx: ModuleContext, c: Tensor, cache: Dict[str, Tensor]) -> Tuple[MemoryStack, Optional[Tensor]]:
    grid = ctx.grid

    def pop_map(s: MemoryStack) -> Tuple[Tensor, MemoryStack]:
        z, s = S.pop(s)
        return z.reshape(grid), s

    def find_map() -> Tensor:
        if "find" not in cache:
            cache["find"] = find(ctx, c)
        return cache["find"]

    if name == "Find":
        return S.push(stack, find_map().reshape(-1)), None
    if name == "Transform":
        a, s = pop_map(stack)
        return S.push(s, transform(ctx, a, c).reshape(-1)), None
    if name in ("And", "Or"):
        a2, s = pop_map(stack)
        a1, s = pop_map(s)
        out = and_(a1, a2) if name == "And" else or_(a1, a2)
        return S.push(s, out.reshape(-1)), None
    if name == "Filter":
        a, s = pop_map(stack)
        return S.push(s, filter_(ctx, a, c, find_map()).reshape(-1)), None
    if name == "Scene":
        return S.push(stack, scene(ctx).reshape(-1)), None
    if name == "Answer":
        a, s = pop_map(stack)
        return S.push(s, a.reshape(-1)), answer(ctx, a, c)
    if name == "Compare":
        a2, s = pop_map(stack)
        a1, s = pop_map(s)
        return S.push(s, a2.reshape(-1)), compare(ctx, a1, a2, c)
    if name == "NoOp":
        return stack, None
    raise LayoutError(f"unknown module {name!r}")


def executed_weights(ctrl: ControllerStep, mode: str, forced: Optional[int] = None) -> Tuple[Tensor, Optional[int]]:
    """Weights actually used for mixing and, when they are one-hot, the chosen module."""
    n = len(MODULE_NAMES)
    if forced is not None:
        if not 0 <= forced < n:
            raise LayoutError(f"forced module id {forced} outside [0, {n})")
        return T.one_hot(forced, n), forced
    if mode == "discretized":
        choice = int(np.argmax(ctrl.w.data))
        return T.one_hot(choice, n), choice
    if mode != "soft":
        raise ValueError(f"mode must be 'soft' or 'discretized', got {mode!r}")
    return ctrl.w, None


def step(
    stack: MemoryStack,
    ctx: ModuleContext,
    ctrl: ControllerStep,
    config: ExecutionConfig,
    *,
    forced: Optional[int] = None,
    answer_size: Optional[int] = None,
) -> StepOutcome:
    if stack.map_size != ctx.grid[0] * ctx.grid[1]:
        raise ShapeError(f"stack holds maps of size {stack.map_size}, feature grid is {ctx.grid}")
    w, chosen = executed_weights(ctrl, config.mode, forced)
    if answer_size is None:
        answer_size = ctx.params["answer/out_w"].shape[1]
    cache: Dict[str, Tensor] = {}

    if chosen is not None:
        # one-hot: only the chosen module runs; bounds are exact while the pointer stays unsharpened
        name = MODULE_NAMES[chosen]
        strict = config.strict_bounds and not config.sharpens
        nxt, logits = _branch(name, stack.with_bounds(strict), ctx, ctrl.c, cache)
        nxt = nxt.with_bounds(stack.strict_bounds)
        partial = logits if logits is not None else T.zeros(answer_size)
        answer_weight = 1.0 if logits is not None else 0.0
    else:
        soft = stack.with_bounds(False)
        branches: List[MemoryStack] = []
        partial = T.zeros(answer_size)
        answer_weight = 0.0
        for m, name in enumerate(MODULE_NAMES):
            branch, logits = _branch(name, soft, ctx, ctrl.c, cache)
            branches.append(branch)
            if logits is not None:
                partial = partial + w[m] * logits
                answer_weight += float(w.data[m])
        nxt = S.combine(branches, w).with_bounds(stack.strict_bounds)

    if config.sharpens:
        nxt = S.sharpen(nxt, config.sharpen_temperature)
    return StepOutcome(stack=nxt, partial_answer=partial, executed_weights=w.data.copy(), answer_weight=answer_weight)


@dataclass
class ExecutionResult:
    answer_logits: Tensor
    final_attention: Tensor
    steps: List[ControllerStep]
    executed_weights: List[np.ndarray]
    final_stack: MemoryStack
    bbox: Optional[np.ndarray] = None
    offsets: Optional[Tensor] = None
    anchor: Optional[Tuple[int, int]] = None
    trace: Optional[Trace] = None
    entropies: List[float] = field(default_factory=list)

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropies)) if self.entropies else 0.0


def _forced_ids(forced_layout: Optional[Sequence], steps: int) -> Optional[List[int]]:
    if forced_layout is None:
        return None
    ids: List[int] = []
    for item in forced_layout:
        if isinstance(item, str):
            if item not in MODULE_INDEX:
                raise LayoutError(f"unknown module {item!r} in forced layout")
            ids.append(MODULE_INDEX[item])
        else:
            ids.append(int(item))
    if len(ids) > steps:
        raise LayoutError(f"forced layout has {len(ids)} steps, executor runs {steps}")
    return ids + [MODULE_INDEX["NoOp"]] * (steps - len(ids))


def execute(
    token_ids: Sequence[int],
    x: np.ndarray,
    params: ParameterStore,
    config: ExecutionConfig,
    *,
    forced_layout: Optional[Sequence] = None,
    words: Optional[Sequence[str]] = None,
    example_id: str = "",
    record_trace: bool = True,
) -> ExecutionResult:
    """Encode the text, run ``config.steps`` controller/module steps and decode the outputs.

    ``forced_layout`` (module names or ids, NoOp-padded) replaces the module
    weights with one-hot vectors while the controller still supplies the
    textual parameters.
    """
    features = x if isinstance(x, Tensor) else T.Tensor(x)
    if features.ndim != 3:
        raise ShapeError(f"feature map must be [H, W, D], got {features.shape}")
    height, width = features.shape[0], features.shape[1]
    forced = _forced_ids(forced_layout, config.steps)

    enc = encode(token_ids, params)
    ctx = ModuleContext(features, params, config.conv_kernel)
    stack = init_stack(height, width, config.stack_depth, strict_bounds=config.strict_bounds)
    answer_size = params["answer/out_w"].shape[1]
    c_prev = T.zeros(enc.summary.shape[0])
    y = T.zeros(answer_size)

    ctrl_steps: List[ControllerStep] = []
    used: List[np.ndarray] = []
    entropies: List[float] = []
    trace_steps: List[TraceStep] = []
    tokens = list(words) if words is not None else [str(i) for i in enc.token_ids]
    for t in range(config.steps):
        ctrl = controller_step(enc, c_prev, t, params)
        outcome = step(stack, ctx, ctrl, config, forced=None if forced is None else forced[t], answer_size=answer_size)
        stack = outcome.stack
        y = y + outcome.partial_answer
        c_prev = ctrl.c
        ctrl_steps.append(ctrl)
        used.append(outcome.executed_weights)
        entropies.append(module_weight_entropy(ctrl.w.data))
        if record_trace:
            top = S.read_top(stack).data.reshape(height, width)
            trace_steps.append(TraceStep(
                t=t,
                module_weights=outcome.executed_weights.tolist(),
                argmax_module=MODULE_NAMES[int(np.argmax(outcome.executed_weights))],
                word_attention=ctrl.cv.data.tolist(),
                top_words=top_words(ctrl.cv.data, tokens),
                stack_top_attention=top.tolist(),
                partial_answer_logits=outcome.partial_answer.data.tolist() if outcome.answer_weight > 0 else None,
            ))

    final_attention = S.read_top(stack).reshape(height, width)
    result = ExecutionResult(
        answer_logits=y,
        final_attention=final_attention,
        steps=ctrl_steps,
        executed_weights=used,
        final_stack=stack,
        entropies=entropies,
    )
    if config.task != "vqa":
        result.bbox, result.offsets, result.anchor = decode_bbox(final_attention, features, params, config.cell_size)
    if record_trace:
        result.trace = Trace(
            example_id=example_id,
            mode=config.mode if forced is None else "forced",
            tokens=tokens,
            steps=trace_steps,
            answer_distribution=T.softmax(T.constant(y)).data.tolist(),
            bbox=tuple(float(v) for v in result.bbox) if result.bbox is not None else None,
        )
    return result
