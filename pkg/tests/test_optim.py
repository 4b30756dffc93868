from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stacknmn.errors import TrainingError
from stacknmn.nn import ParameterStore
from stacknmn.optim import Adam, AdamState, adam_step, clip_grad_norm


def test_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([3.0, -0.2, 1e-3])}
    adam_step(params, grads, AdamState(lr=0.01))
    assert_allclose(params["w"], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-6)


def test_constant_gradient_keeps_step_size():
    params = {"w": np.zeros(2)}
    state = AdamState(lr=0.1)
    for _ in range(5):
        adam_step(params, {"w": np.array([2.0, -4.0])}, state)
    assert_allclose(params["w"], [-0.5, 0.5], atol=1e-6)
    assert state.step == 5


def test_non_finite_gradient_aborts_without_update():
    params = {"w": np.ones(2)}
    with pytest.raises(TrainingError) as excinfo:
        adam_step(params, {"w": np.array([np.nan, 1.0])}, AdamState())
    assert excinfo.value.diagnostics["parameter"] == "w"
    assert_allclose(params["w"], [1.0, 1.0])


def test_unknown_parameter():
    with pytest.raises(KeyError):
        adam_step({"w": np.ones(1)}, {"v": np.ones(1)}, AdamState())


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert math.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    assert clip_grad_norm(small, 1.0) == pytest.approx(0.1)
    assert small["a"][0] == 0.1


def test_adam_minimizes_quadratic():
    store = ParameterStore(seed=0)
    w = store.add("w", np.array([3.0, -2.0]))
    opt = Adam(store, lr=0.1)
    for _ in range(300):
        opt.step({"w": 2.0 * w.data})
    assert np.all(np.abs(w.data) < 0.1)


def test_parameter_store_state_dict(rng):
    store = ParameterStore(seed=0)
    store.create("a", (2, 3))
    store.create("b", (3,), init="zeros")
    store.create("c", (1,), init="constant", value=0.7)
    state = store.state_dict()
    store["a"].data += 1.0
    store.load_state_dict(state)
    assert_allclose(store["a"].data, state["a"])
    assert_allclose(store["c"].data, [0.7])
    with pytest.raises(KeyError):
        store.load_state_dict({"a": state["a"]})
    with pytest.raises(ValueError):
        store.load_state_dict({**state, "b": np.zeros(4)})
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
