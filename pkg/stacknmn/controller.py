"""Question encoder and per-step layout controller.

At step ``t`` the controller mixes the question summary through a
step-specific linear map, folds in the previous textual parameter, and
emits the module-weight simplex ``w`` plus a word-attention distribution
``cv`` whose weighted sum of word states is the textual parameter ``c``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ControllerStepError, LayoutError, ShapeError, VocabularyError
from .modules import MODULE_NAMES
from .nn import ParameterStore, bilstm_encode, init_lstm
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodedText:
    token_ids: tuple
    states: Tensor   # [S, d]
    summary: Tensor  # [d]

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class ControllerStep:
    t: int
    w: Tensor       # [|M|]
    c: Tensor       # [d]
    cv: Tensor      # [S]
    u: Tensor       # [d]
    logits: Optional[Tensor] = None  # pre-softmax module scores


def init_controller(store: ParameterStore, vocab_size: int, config: ModelConfig) -> None:
    d, e = config.hidden, config.embedding_size
    n_modules = len(MODULE_NAMES)
    store.create("embed/table", (vocab_size, e))
    init_lstm(store, "encoder/fwd", e, d // 2, config.forget_bias)
    init_lstm(store, "encoder/bwd", e, d // 2, config.forget_bias)
    for t in range(config.steps):
        store.create(f"controller/w1_t{t}", (d, d))
    store.create("controller/b1", (d,), init="zeros")
    store.create("controller/w2", (2 * d, d))
    store.create("controller/b2", (d,), init="zeros")
    store.create("controller/mlp_w", (d, d))
    store.create("controller/mlp_b", (d,), init="zeros")
    store.create("controller/out_w", (d, n_modules))
    store.create("controller/out_b", (n_modules,), init="zeros")
    store.create("controller/w3", (d, 1))


def encode(token_ids: Sequence[int], params: ParameterStore) -> EncodedText:
    ids = [int(i) for i in token_ids]
    if not ids:
        raise ShapeError("cannot encode an empty token sequence")
    table = params["embed/table"]
    bad = [i for i in ids if i < 0 or i >= table.shape[0]]
    if bad:
        raise VocabularyError(f"token ids {bad} outside vocabulary of size {table.shape[0]}")
    embedded = T.take_rows(table, ids)
    states, summary = bilstm_encode(embedded, params)
    return EncodedText(tuple(ids), states, summary)


def controller_step(enc: EncodedText, c_prev: Tensor, t: int, params: ParameterStore) -> ControllerStep:
    key = f"controller/w1_t{t}"
    if t < 0 or key not in params:
        raise ControllerStepError(f"no controller weights for step {t}")
    d = enc.summary.shape[0]
    if c_prev.shape != (d,):
        raise ShapeError(f"previous textual parameter has shape {c_prev.shape}, expected ({d},)")
    q_t = enc.summary @ params[key] + params["controller/b1"]
    u = T.concat([q_t, c_prev]) @ params["controller/w2"] + params["controller/b2"]

    hidden = T.elu(u @ params["controller/mlp_w"] + params["controller/mlp_b"])
    logits = hidden @ params["controller/out_w"] + params["controller/out_b"]
    w = T.softmax(logits)

    scores = ((enc.states * u.reshape(1, d)) @ params["controller/w3"]).reshape(enc.length)
    cv = T.softmax(scores)
    c = cv @ enc.states
    return ControllerStep(t=t, w=w, c=c, cv=cv, u=u, logits=logits)


def layout_supervision_loss(steps: Sequence[ControllerStep], expert: Sequence[int]) -> Tensor:
    """Mean over steps of ``-log w[expert_t]``."""
    if len(expert) != len(steps):
        raise LayoutError(f"expert layout has {len(expert)} entries for {len(steps)} controller steps")
    n_modules = len(MODULE_NAMES)
    terms: List[Tensor] = []
    for step, module_id in zip(steps, expert):
        if not 0 <= int(module_id) < n_modules:
            raise LayoutError(f"module id {module_id} outside [0, {n_modules})")
        log_w = T.log_softmax(step.logits) if step.logits is not None else T.log(step.w)
        terms.append(log_w[int(module_id)])
    return T.mean(T.stack(terms)) * -1.0


def module_weight_entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())
