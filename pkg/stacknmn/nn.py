"""Parameter storage and the bidirectional LSTM encoder."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import DTYPE, Tensor


def glorot_scale(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class ParameterStore:
    """Ordered ``name -> Tensor`` map.

    Names are slash-scoped (``encoder/fwd/w_x``, ``find/conv1_w``).  The
    store owns the leaves; modules look them up by name on every call, so
    two modules asking for the same name share the same tensor.
    """

    def __init__(self, seed: int = 0) -> None:
        self._params: Dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def get(self, name: str) -> Optional[Tensor]:
        return self._params.get(name)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def create(self, name: str, shape: Tuple[int, ...], init: str = "glorot", value: float = 0.0) -> Tensor:
        """Create a parameter.

        ``glorot`` draws uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)),
        using the first axis as fan-in and the last as fan-out; ``zeros`` and
        ``constant`` fill with 0 or ``value``.
        """
        if init == "glorot":
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            s = glorot_scale(fan_in, fan_out)
            data = self.rng.uniform(-s, s, size=shape)
        elif init == "zeros":
            data = np.zeros(shape, dtype=DTYPE)
        elif init == "constant":
            data = np.full(shape, value, dtype=DTYPE)
        else:
            raise ValueError(f"unknown init {init!r}")
        return self.add(name, data)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self._params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return math.sqrt(total)

    def norms(self) -> Dict[str, float]:
        return {n: float(np.linalg.norm(p.data)) for n, p in self._params.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], *, strict: bool = True) -> None:
        if strict:
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in self._params:
                continue
            value = np.asarray(value, dtype=DTYPE)
            if value.shape != self._params[name].shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != parameter shape {self._params[name].shape}")
            self._params[name].data = value.copy()


def init_lstm(store: ParameterStore, prefix: str, input_size: int, hidden: int, forget_bias: float) -> None:
    """Gate order is ``i, f, g, o``; the forget-gate slice of the bias starts at ``forget_bias``."""
    store.create(f"{prefix}/w_x", (input_size, 4 * hidden))
    store.create(f"{prefix}/w_h", (hidden, 4 * hidden))
    bias = np.zeros(4 * hidden, dtype=DTYPE)
    bias[hidden:2 * hidden] = forget_bias
    store.add(f"{prefix}/b", bias)


def lstm_cell(gates_x: Tensor, h: Tensor, c: Tensor, w_h: Tensor) -> Tuple[Tensor, Tensor]:
    n = h.shape[0]
    gates = gates_x + h @ w_h
    i = T.sigmoid(gates[0:n])
    f = T.sigmoid(gates[n:2 * n])
    g = T.tanh(gates[2 * n:3 * n])
    o = T.sigmoid(gates[3 * n:4 * n])
    c_next = f * c + i * g
    h_next = o * T.tanh(c_next)
    return h_next, c_next


def _run_direction(embedded: Tensor, store: ParameterStore, prefix: str, reverse: bool) -> List[Tensor]:
    w_x, w_h, b = store[f"{prefix}/w_x"], store[f"{prefix}/w_h"], store[f"{prefix}/b"]
    n = w_h.shape[0]
    projected = embedded @ w_x + b
    h = T.zeros(n)
    c = T.zeros(n)
    order = range(embedded.shape[0] - 1, -1, -1) if reverse else range(embedded.shape[0])
    states: List[Optional[Tensor]] = [None] * embedded.shape[0]
    for s in order:
        h, c = lstm_cell(projected[s], h, c, w_h)
        states[s] = h
    return states  # type: ignore[return-value]


def bilstm_encode(embedded: Tensor, store: ParameterStore, prefix: str = "encoder") -> Tuple[Tensor, Tensor]:
    """Encode ``embedded[S, E]`` into word states ``[S, d]`` and a summary ``[d]``.

    ``h_s = [fwd_s; bwd_s]`` and the summary is ``[fwd_S; bwd_1]``, the last
    state each direction produced.
    """
    if embedded.ndim != 2 or embedded.shape[0] == 0:
        raise ShapeError(f"bilstm_encode needs a non-empty [S, E] sequence, got {embedded.shape}")
    fwd = _run_direction(embedded, store, f"{prefix}/fwd", reverse=False)
    bwd = _run_direction(embedded, store, f"{prefix}/bwd", reverse=True)
    states = T.stack([T.concat([f, b]) for f, b in zip(fwd, bwd)])
    summary = T.concat([fwd[-1], bwd[0]])
    return states, summary
