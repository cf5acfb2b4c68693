"""Parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import NonFiniteError, ShapeError, Tape, Tensor


class ParameterStore:
    """Named parameter arrays.  Shapes are fixed once a name is registered."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already exists")
        self._values[name] = np.array(value, dtype=self.dtype)
        self.trainable[name] = trainable
        return self._values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value):
        value = np.asarray(value, dtype=self.dtype)
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        if value.shape != self._values[name].shape:
            raise ShapeError(
                f"parameter {name!r}: shape {value.shape} != {self._values[name].shape}"
            )
        self._values[name] = value.copy()

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._values if n.startswith(prefix)]

    def bind(self, tape: Tape, names=None) -> dict[str, Tensor]:
        """Place parameters on ``tape`` as gradient-tracked leaves."""
        names = self._values if names is None else names
        return {n: tape.variable(self._values[n], name=n) for n in names}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update of every trainable parameter with a gradient.

    Parameters absent from ``grads`` are left untouched (their moments too).
    """
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store[name].shape:
            raise ShapeError(f"gradient for {name!r}: shape {g.shape} != {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        if not store.trainable[name]:
            continue
        p = store[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        store[name] = p - update.astype(p.dtype, copy=False)


def named_grads(grads: dict[int, np.ndarray], bound: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Translate node-id gradients into parameter-name gradients."""
    return {name: grads[t.node] for name, t in bound.items() if t.node in grads}
