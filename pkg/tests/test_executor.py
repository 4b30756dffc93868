from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from stacknmn import stack as S
from stacknmn import tensor as T
from stacknmn.config import ExecutionConfig, ModelConfig
from stacknmn.controller import ControllerStep, controller_step, encode, init_controller
from stacknmn.errors import LayoutError, StackUnderflowError
from stacknmn.executor import (
    MAX_LOG_SCALE,
    cell_box,
    cell_of_point,
    decode_offsets,
    encode_offsets,
    execute,
    executed_weights,
    init_bbox_head,
    init_stack,
    iou,
    step,
)
from stacknmn.modules import MODULE_INDEX, MODULE_NAMES, ModuleContext, answer, find, init_modules
from stacknmn.nn import ParameterStore
from stacknmn.tensor import Tensor

GRID, D, HID, ANSWERS, STEPS = 3, 11, 6, 5, 4


@pytest.fixture
def params() -> ParameterStore:
    store = ParameterStore(seed=21)
    init_controller(store, vocab_size=10, config=ModelConfig(hidden=HID, steps=STEPS))
    init_modules(store, D, HID, ANSWERS)
    init_bbox_head(store, D)
    return store


@pytest.fixture
def features(rng) -> np.ndarray:
    return rng.normal(size=(GRID, GRID, D))


def _config(**kw) -> ExecutionConfig:
    values = dict(steps=STEPS, stack_depth=STEPS + 1, task="vqa")
    values.update(kw)
    return ExecutionConfig(**values)


def _ctrl(weights: np.ndarray, c: np.ndarray) -> ControllerStep:
    return ControllerStep(t=0, w=Tensor(weights), c=Tensor(c), cv=Tensor([1.0]), u=Tensor(c))


# -- boxes ----------------------------------------------------------------
def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_cell_geometry():
    assert_array_equal(cell_box((1, 2), 32.0), [64.0, 32.0, 96.0, 64.0])
    assert cell_of_point(70.0, 40.0, 32.0, 5) == (1, 2)
    assert cell_of_point(500.0, -3.0, 32.0, 5) == (0, 4)


def test_offsets_round_trip_and_clamp():
    box = np.array([40.0, 10.0, 60.0, 28.0])
    offsets = encode_offsets(box, (0, 1), 32.0)
    assert_allclose(decode_offsets(offsets, (0, 1), 32.0), box)
    huge = decode_offsets([0.0, 0.0, 50.0, -50.0], (0, 0), 32.0)
    assert huge[2] - huge[0] == pytest.approx(32.0 * math.exp(MAX_LOG_SCALE))
    assert huge[3] - huge[1] == pytest.approx(32.0 * math.exp(-MAX_LOG_SCALE))


# -- single steps ---------------------------------------------------------
def test_forced_find_pushes_find_map(params, features, rng):
    ctx = ModuleContext(Tensor(features), params)
    c = rng.normal(size=HID)
    stack = init_stack(GRID, GRID, STEPS + 1)
    out = step(stack, ctx, _ctrl(np.full(9, 1 / 9), c), _config(mode="soft", sharpen=False), forced=MODULE_INDEX["Find"])
    assert_allclose(S.read_top(out.stack).data, find(ctx, Tensor(c)).data.reshape(-1))
    assert_array_equal(out.stack.pointer.data[:2], [0.0, 1.0])
    assert out.answer_weight == 0.0


def test_soft_step_with_one_hot_weights_matches_discrete_step(params, features, rng):
    ctx = ModuleContext(Tensor(features), params)
    c = rng.normal(size=HID)
    base = S.push(init_stack(GRID, GRID, STEPS + 1), Tensor(rng.normal(size=GRID * GRID)))
    for module in MODULE_NAMES:
        w = np.zeros(9)
        w[MODULE_INDEX[module]] = 1.0
        soft = step(base, ctx, _ctrl(w, c), _config(mode="soft", sharpen=False))
        hard = step(base, ctx, _ctrl(w, c), _config(mode="soft", sharpen=False), forced=MODULE_INDEX[module])
        assert_allclose(soft.stack.values.data, hard.stack.values.data, atol=1e-12)
        assert_allclose(soft.stack.pointer.data, hard.stack.pointer.data, atol=1e-12)
        assert_allclose(soft.partial_answer.data, hard.partial_answer.data, atol=1e-12)


def test_noop_leaves_stack_unchanged(params, features, rng):
    ctx = ModuleContext(Tensor(features), params)
    stack = init_stack(GRID, GRID, STEPS + 1)
    out = step(stack, ctx, _ctrl(np.full(9, 1 / 9), rng.normal(size=HID)), _config(mode="soft", sharpen=False),
               forced=MODULE_INDEX["NoOp"])
    assert_array_equal(out.stack.values.data, stack.values.data)
    assert_array_equal(out.stack.pointer.data, stack.pointer.data)


def test_answer_pushes_its_input_back(params, features, rng):
    ctx = ModuleContext(Tensor(features), params)
    z = rng.normal(size=GRID * GRID)
    stack = S.push(init_stack(GRID, GRID, STEPS + 1), Tensor(z))
    out = step(stack, ctx, _ctrl(np.full(9, 1 / 9), rng.normal(size=HID)), _config(sharpen=False),
               forced=MODULE_INDEX["Answer"])
    assert_allclose(S.read_top(out.stack).data, z)
    assert out.answer_weight == 1.0


def test_strict_discretized_pop_from_base_underflows(params, features, rng):
    ctx = ModuleContext(Tensor(features), params)
    stack = init_stack(GRID, GRID, STEPS + 1, strict_bounds=True)
    config = _config(mode="discretized", strict_bounds=True)
    with pytest.raises(StackUnderflowError):
        step(stack, ctx, _ctrl(np.full(9, 1 / 9), rng.normal(size=HID)), config, forced=MODULE_INDEX["And"])


def test_executed_weights_modes():
    w = np.array([0.1, 0.5, 0.05, 0.05, 0.1, 0.05, 0.05, 0.05, 0.05])
    ctrl = _ctrl(w, np.zeros(2))
    soft, chosen = executed_weights(ctrl, "soft")
    assert chosen is None and soft is ctrl.w
    hard, chosen = executed_weights(ctrl, "discretized")
    assert chosen == 1 and hard.data[1] == 1.0
    forced, chosen = executed_weights(ctrl, "soft", forced=7)
    assert chosen == 7
    with pytest.raises(LayoutError):
        executed_weights(ctrl, "soft", forced=9)
    with pytest.raises(ValueError):
        executed_weights(ctrl, "fuzzy")


# -- full runs ------------------------------------------------------------
def test_execute_soft_run_shapes(params, features):
    result = execute([1, 2, 3], features, params, _config(mode="soft"))
    assert result.answer_logits.shape == (ANSWERS,)
    assert result.final_attention.shape == (GRID, GRID)
    assert len(result.steps) == STEPS
    assert len(result.executed_weights) == STEPS
    for w in result.executed_weights:
        assert abs(w.sum() - 1.0) < 1e-9
    assert result.bbox is None
    assert result.trace is not None and len(result.trace.steps) == STEPS
    assert result.trace.mode == "soft"


def test_soft_pointer_stays_normalized_with_sharpening(params, features):
    result = execute([4, 5, 6, 7], features, params, _config(mode="soft", sharpen=True, sharpen_temperature=0.2))
    p = result.final_stack.pointer.data
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0.0)


def test_discretized_run_uses_one_hot_weights(params, features):
    result = execute([1, 2], features, params, _config(mode="discretized"))
    for w in result.executed_weights:
        assert sorted(w.tolist())[-1] == 1.0 and w.sum() == 1.0


def test_forced_layout_is_padded_and_traced(params, features):
    result = execute([1, 2, 3], features, params, _config(mode="soft"), forced_layout=["Find", "Answer"],
                     words=["a", "b", "c"], example_id="ex-1")
    names = [MODULE_NAMES[int(np.argmax(w))] for w in result.executed_weights]
    assert names == ["Find", "Answer", "NoOp", "NoOp"]
    assert result.trace.mode == "forced"
    assert result.trace.example_id == "ex-1"
    assert result.trace.steps[1].partial_answer_logits is not None
    assert result.trace.steps[0].partial_answer_logits is None
    assert set(result.trace.steps[0].top_words) <= {"a", "b", "c"}


def test_forced_layout_errors(params, features):
    with pytest.raises(LayoutError):
        execute([1], features, params, _config(), forced_layout=["Find"] * (STEPS + 1))
    with pytest.raises(LayoutError):
        execute([1], features, params, _config(), forced_layout=["Lookup"])


def test_find_answer_program_agrees_with_direct_modules(params, features):
    """With one-hot weights the answer equals Answer(Find(c0), c1) computed directly."""
    config = _config(mode="soft", sharpen=False)
    result = execute([3, 1, 4], features, params, config, forced_layout=["Find", "Answer"])
    enc = encode([3, 1, 4], params)
    c0 = controller_step(enc, T.zeros(HID), 0, params).c
    c1 = controller_step(enc, c0, 1, params).c
    ctx = ModuleContext(Tensor(features), params)
    expected = answer(ctx, find(ctx, c0), c1)
    assert_allclose(result.answer_logits.data, expected.data, atol=1e-10)


def test_ref_run_decodes_box(params, features):
    result = execute([1, 2], features, params, _config(task="ref"))
    assert result.bbox is not None and result.bbox.shape == (4,)
    assert result.bbox[0] < result.bbox[2] and result.bbox[1] < result.bbox[3]
    row, col = result.anchor
    assert 0 <= row < GRID and 0 <= col < GRID
    assert result.offsets.shape == (4,)


def test_gradient_reaches_every_module_parameter(params, features):
    result = execute([1, 2, 3], features, params, _config(mode="soft", task="both"))
    loss = T.sum_(result.answer_logits) + T.sum_(result.final_attention) + T.sum_(result.offsets)
    params.zero_grad()
    loss.backward()
    for name in ("find/conv1_w", "transform/att_w", "scene/conv_w", "answer/out_w", "compare/out_w",
                 "controller/w3", "embed/table", "bbox/w"):
        assert params[name].grad is not None, name
        assert np.any(params[name].grad != 0.0), name
