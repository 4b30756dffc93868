from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stacknmn import tensor as T
from stacknmn.config import ModelConfig
from stacknmn.controller import (
    ControllerStep,
    controller_step,
    encode,
    init_controller,
    layout_supervision_loss,
    module_weight_entropy,
)
from stacknmn.errors import ControllerStepError, LayoutError, ShapeError, VocabularyError
from stacknmn.modules import MODULE_INDEX, MODULE_NAMES
from stacknmn.nn import ParameterStore, bilstm_encode


@pytest.fixture
def store() -> ParameterStore:
    s = ParameterStore(seed=5)
    init_controller(s, vocab_size=12, config=ModelConfig(hidden=6, steps=3))
    return s


def test_encode_shapes(store):
    enc = encode([1, 4, 7, 2], store)
    assert enc.states.shape == (4, 6)
    assert enc.summary.shape == (6,)
    assert enc.length == 4


def test_summary_joins_last_forward_and_first_backward_state(store):
    enc = encode([3, 0, 9], store)
    assert_allclose(enc.summary.data[:3], enc.states.data[-1, :3])
    assert_allclose(enc.summary.data[3:], enc.states.data[0, 3:])


def test_single_token_encodes(store):
    enc = encode([5], store)
    assert enc.states.shape == (1, 6)


def test_encode_errors(store):
    with pytest.raises(ShapeError):
        encode([], store)
    with pytest.raises(VocabularyError):
        encode([12], store)
    with pytest.raises(VocabularyError):
        encode([-1], store)


def test_forget_bias_initialized(store):
    bias = store["encoder/fwd/b"].data
    assert_allclose(bias[3:6], 1.0)
    assert_allclose(bias[:3], 0.0)


def test_controller_step_outputs_are_distributions(store):
    enc = encode([1, 2, 3, 4, 5], store)
    c = T.zeros(6)
    for t in range(3):
        step = controller_step(enc, c, t, store)
        assert isinstance(step, ControllerStep)
        assert step.w.shape == (len(MODULE_NAMES),)
        assert abs(step.w.data.sum() - 1.0) < 1e-9
        assert abs(step.cv.data.sum() - 1.0) < 1e-9
        assert_allclose(step.c.data, step.cv.data @ enc.states.data)
        c = step.c


def test_single_token_attention_is_one(store):
    enc = encode([7], store)
    step = controller_step(enc, T.zeros(6), 0, store)
    assert_allclose(step.cv.data, [1.0])
    assert_allclose(step.c.data, enc.states.data[0])


def test_steps_use_distinct_weights(store):
    enc = encode([1, 2, 3], store)
    w0 = controller_step(enc, T.zeros(6), 0, store).w.data
    w1 = controller_step(enc, T.zeros(6), 1, store).w.data
    assert not np.allclose(w0, w1)


def test_step_out_of_range(store):
    enc = encode([1, 2], store)
    with pytest.raises(ControllerStepError):
        controller_step(enc, T.zeros(6), 3, store)
    with pytest.raises(ShapeError):
        controller_step(enc, T.zeros(4), 0, store)


def test_layout_supervision_loss_on_uniform_weights_is_log_module_count():
    logits = T.zeros(len(MODULE_NAMES))
    steps = [
        ControllerStep(t=t, w=T.softmax(logits), c=T.zeros(2), cv=T.zeros(1), u=T.zeros(2), logits=logits)
        for t in range(4)
    ]
    expert = [MODULE_INDEX[m] for m in ("Find", "Transform", "Answer", "NoOp")]
    assert layout_supervision_loss(steps, expert).item() == pytest.approx(math.log(9))


def test_layout_supervision_loss_errors(store):
    enc = encode([1, 2], store)
    steps = [controller_step(enc, T.zeros(6), 0, store)]
    with pytest.raises(LayoutError):
        layout_supervision_loss(steps, [0, 1])
    with pytest.raises(LayoutError):
        layout_supervision_loss(steps, [9])


def test_layout_supervision_pushes_weight_toward_expert(store):
    enc = encode([1, 2, 3], store)
    find = MODULE_INDEX["Find"]
    before = controller_step(enc, T.zeros(6), 0, store).w.data[find]
    for _ in range(50):
        store.zero_grad()
        step = controller_step(enc, T.zeros(6), 0, store)
        layout_supervision_loss([step], [find]).backward()
        for name, p in store.items():
            if p.grad is not None:
                p.data -= 0.5 * p.grad
    after = controller_step(enc, T.zeros(6), 0, store).w.data[find]
    assert after > before


def test_module_weight_entropy():
    assert module_weight_entropy(np.full(9, 1 / 9)) == pytest.approx(math.log(9))
    one_hot = np.zeros(9)
    one_hot[2] = 1.0
    assert module_weight_entropy(one_hot) == 0.0


def test_bilstm_directions_are_independent_parameters():
    store = ParameterStore(seed=1)
    init_controller(store, vocab_size=4, config=ModelConfig(hidden=4, steps=1))
    embedded = T.take_rows(store["embed/table"], [0, 1, 2])
    states, summary = bilstm_encode(embedded, store)
    assert states.shape == (3, 4)
    assert summary.shape == (4,)
