"""Central finite-difference checks of every differentiable op and the full losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Sequence

import numpy as np

from . import stack as S
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .controller import controller_step, encode, init_controller
from .gridworld import SceneObject, SceneRecord, TaskRecord, build_answer_vocabulary, build_vocabulary, pad_layout
from .model import StackNMN
from .modules import ModuleContext, and_, answer, compare, filter_, find, init_modules, or_, scene, transform
from .nn import ParameterStore, bilstm_encode, init_lstm
from .oracle import LayoutStep
from .tensor import Tensor
from .training import example_loss

logger = logging.getLogger(__name__)

EPS = 1e-4
TOLERANCE = 1e-3
DENOM_FLOOR = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_function(
    name: str,
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    *,
    seed: int = 0,
    eps: float = EPS,
) -> CheckResult:
    """Compare backward gradients of ``sum(build(inputs) * R)`` against central differences.

    ``R`` is a fixed random projection, so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build([Tensor(a) for a in arrays])
    projection = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar(values: Sequence[np.ndarray]) -> float:
        with T.no_grad():
            return float(np.sum(build([Tensor(v) for v in values]).data * projection))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    T.sum_(out * projection).backward()

    worst, checked = 0.0, 0
    for k, base in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            plus = scalar(arrays)
            flat[i] = saved - eps
            minus = scalar(arrays)
            flat[i] = saved
            numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric))
        checked += flat.size
    return CheckResult(name, worst, checked)


def check_store(name: str, loss_fn: Callable[[], Tensor], store: ParameterStore, *, eps: float = EPS) -> CheckResult:
    """Finite-difference check of a scalar loss over every parameter in ``store``."""
    store.zero_grad()
    loss_fn().backward()
    analytic = store.grads()
    worst, checked = 0.0, 0
    for pname, param in store.items():
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            with T.no_grad():
                flat[i] = saved + eps
                plus = loss_fn().item()
                flat[i] = saved - eps
                minus = loss_fn().item()
            flat[i] = saved
            numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
        err = relative_error(analytic[pname], numeric)
        if err >= TOLERANCE:
            logger.debug("%s: parameter %s off by %.3g", name, pname, err)
        worst = max(worst, err)
        checked += flat.size
    store.zero_grad()
    return CheckResult(name, worst, checked)


# -- fixtures -------------------------------------------------------------
def _separated(rng: np.random.Generator, shape) -> tuple:
    """Two arrays that differ by at least 0.1 everywhere (no min/max ties)."""
    a = rng.normal(size=shape)
    gap = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return a, a + gap


def _module_store(rng_seed: int, features: int = 4, hidden: int = 4, answers: int = 5, kernel: int = 1):
    store = ParameterStore(rng_seed)
    init_modules(store, features, hidden, answers, kernel)
    return store


def _tiny_record() -> TaskRecord:
    scene_record = SceneRecord(grid=2, cell_size=32.0, objects=[
        SceneObject(row=0, col=1, color="red", shape="circle", size="small", box=(38.0, 6.0, 58.0, 26.0)),
        SceneObject(row=1, col=0, color="blue", shape="square", size="large", box=(4.0, 37.0, 26.0, 59.0)),
    ])
    layout = pad_layout([LayoutStep(module="Find", span=("red",)), LayoutStep(module="Answer", span=("is", "there"))], 2)
    return TaskRecord(id="gradcheck", kind="vqa", family="exist", template_id="exist_plain",
                      tokens=["is", "there", "a", "red", "thing"], layout=layout, answer="yes", scene=scene_record)


# -- suites ---------------------------------------------------------------
def op_checks(seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed)
    a, b = _separated(rng, (3, 4))
    yield check_function("add", lambda t: t[0] + t[1], [a, rng.normal(size=(1, 4))])
    yield check_function("sub", lambda t: t[0] - t[1], [a, rng.normal(size=(3, 1))])
    yield check_function("mul", lambda t: t[0] * t[1], [a, rng.normal(size=(4,))])
    yield check_function("minimum", lambda t: T.minimum(t[0], t[1]), [a, b])
    yield check_function("maximum", lambda t: T.maximum(t[0], t[1]), [a, b])
    yield check_function("matmul", lambda t: t[0] @ t[1], [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])
    yield check_function("exp", lambda t: T.exp(t[0]), [rng.normal(size=5)])
    yield check_function("log", lambda t: T.log(t[0]), [rng.uniform(0.5, 2.0, size=5)])
    yield check_function("tanh", lambda t: T.tanh(t[0]), [rng.normal(size=5)])
    yield check_function("sigmoid", lambda t: T.sigmoid(t[0]), [rng.normal(size=5)])
    yield check_function("elu", lambda t: T.elu(t[0]), [rng.uniform(0.05, 1.0, size=6) * rng.choice([-1.0, 1.0], size=6)])
    yield check_function("sum_axis", lambda t: T.sum_(t[0], axis=1), [rng.normal(size=(3, 4))])
    yield check_function("getitem", lambda t: t[0][1:, ::2], [rng.normal(size=(3, 4))])
    yield check_function("concat", lambda t: T.concat([t[0], t[1]], axis=1), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))])
    yield check_function("stack", lambda t: T.stack([t[0], t[1]], axis=0), [rng.normal(size=3), rng.normal(size=3)])
    yield check_function("softmax", lambda t: T.softmax(t[0]), [rng.normal(size=5)])
    yield check_function("log_softmax", lambda t: T.log_softmax(t[0]), [rng.normal(size=5)])
    yield check_function("shift_up", lambda t: T.shift_1d(t[0], "up"), [rng.normal(size=4)])
    yield check_function("shift_down", lambda t: T.shift_1d(t[0], "down"), [rng.normal(size=4)])
    yield check_function("attended_sum", lambda t: T.attended_sum(t[0], t[1]), [rng.normal(size=(3, 3)), rng.normal(size=(3, 3, 4))])
    yield check_function("conv_1x1", lambda t: T.conv_1x1(t[0], t[1], t[2]),
                         [rng.normal(size=(3, 3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)])
    yield check_function("conv2d_same_k3", lambda t: T.conv2d_same(t[0], t[1], t[2], 3),
                         [rng.normal(size=(3, 3, 2)), rng.normal(size=(18, 2)), rng.normal(size=2)])
    ids = [2, 0, 2]
    yield check_function("take_rows", lambda t: T.take_rows(t[0], ids), [rng.normal(size=(4, 3))])
    pred = rng.normal(size=4)
    target = pred + rng.uniform(0.2, 2.0, size=4) * rng.choice([-1.0, 1.0], size=4)
    yield check_function("smooth_l1", lambda t: T.smooth_l1(t[0], target), [pred])

    store = ParameterStore(seed)
    init_lstm(store, "enc/fwd", 3, 2, 1.0)
    init_lstm(store, "enc/bwd", 3, 2, 1.0)

    def bilstm(t: Sequence[Tensor]) -> Tensor:
        states, summary = bilstm_encode(t[0], store, "enc")
        return T.concat([states.reshape(-1), summary])

    yield check_function("bilstm_encode", bilstm, [rng.normal(size=(3, 3))])

    def stack_chain(t: Sequence[Tensor]) -> Tensor:
        base = S.MemoryStack(t[0], t[1])
        pushed = S.push(base, t[2])
        z, popped = S.pop(pushed)
        mixed = S.combine([pushed, popped], np.array([0.3, 0.7]))
        return T.concat([z, mixed.values.reshape(-1), S.sharpen_pointer(mixed.pointer, 0.5)])

    yield check_function("stack_chain", stack_chain,
                         [rng.normal(size=(3, 4)), np.array([0.6, 0.3, 0.1]), rng.normal(size=4)])


def module_checks(seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(3, 3, 4))
    c = rng.normal(size=4)
    a1, a2 = _separated(rng, (3, 3))
    store = _module_store(seed)

    def ctx(t: Tensor) -> ModuleContext:
        return ModuleContext(t, store)

    yield check_function("find", lambda t: find(ctx(t[0]), t[1]), [x, c])
    yield check_function("transform", lambda t: transform(ctx(t[0]), t[1], t[2]), [x, a1, c])
    yield check_function("and", lambda t: and_(t[0], t[1]), [a1, a2])
    yield check_function("or", lambda t: or_(t[0], t[1]), [a1, a2])
    yield check_function("scene", lambda t: scene(ctx(t[0])), [x])
    yield check_function("answer", lambda t: answer(ctx(t[0]), t[1], t[2]), [x, a1, c])
    yield check_function("compare", lambda t: compare(ctx(t[0]), t[1], t[2], t[3]), [x, a1, a2, c])

    # shift the map so it never ties with the find output
    with T.no_grad():
        found = find(ModuleContext(Tensor(x), store), Tensor(c)).data
    a = found + rng.uniform(0.1, 1.0, size=found.shape) * rng.choice([-1.0, 1.0], size=found.shape)
    yield check_function("filter", lambda t: filter_(ctx(t[0]), t[1], t[2]), [x, a, c])

    cstore = ParameterStore(seed)
    init_controller(cstore, 6, ModelConfig(hidden=4, steps=2))

    def ctrl(t: Sequence[Tensor]) -> Tensor:
        enc = encode([1, 4, 2], cstore)
        out = controller_step(enc, t[0], 1, cstore)
        return T.concat([out.w, out.c, out.cv])

    yield check_function("controller_step", ctrl, [rng.normal(size=4)])


def loss_checks(seed: int = 0) -> Iterator[CheckResult]:
    record = _tiny_record()
    config = ModelConfig(hidden=4, steps=2)
    model = StackNMN(config, build_vocabulary(), build_answer_vocabulary(3), seed=seed)
    plain = TrainConfig()
    yield check_store("vqa_loss", lambda: example_loss(model, record, plain)[0], model.params)
    supervised = TrainConfig(layout_supervision=True)
    yield check_store("vqa_loss_layout_supervised", lambda: example_loss(model, record, supervised)[0], model.params)

    ref = record.model_copy(update={
        "kind": "ref", "family": "ref_simple", "template_id": "ref_simple", "answer": None,
        "tokens": ["the", "red", "thing"], "target": 0, "target_box": record.scene.objects[0].box,
    })
    yield check_store("ref_loss", lambda: example_loss(model, ref, plain)[0], model.params)


def run_suite(seed: int = 0, *, include_losses: bool = True) -> List[CheckResult]:
    results = list(op_checks(seed)) + list(module_checks(seed))
    if include_losses:
        results.extend(loss_checks(seed))
    for r in results:
        logger.debug("%-28s max_rel_err=%.3e %s", r.name, r.max_rel_error, "ok" if r.passed else "FAIL")
    return results
