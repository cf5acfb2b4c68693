"""Dense tensors with a recording tape and reverse-mode gradients.

Every differentiable computation in the package runs through :class:`Tape`.
A tape records primitive applications in execution order, so node ids are a
topological order by construction and :func:`backprop` is a single reverse
sweep.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(np.array([0.0]))
>>> y = sigmoid(x).sum()
>>> grads = backprop(tape, y)
>>> float(grads[x.node][0])
0.25
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)
    saved: object = None
    name: str | None = None


class Tensor:
    """Handle to a node on a tape.  Values are never mutated after recording."""

    __slots__ = ("tape", "node")
    # make numpy defer to the reflected operators (``array @ tensor`` etc.)
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", node: int):
        self.tape = tape
        self.node = node

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.node].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(node={self.node}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return mul(self, self._lift(1.0 / other))

    def __neg__(self):
        return mul(self, self._lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable | None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(kind: str):
    def register(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, getattr(cls, "backward", None))
        return cls

    return register


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, kind):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


@primitive("add")
class _Add:
    def forward(a, b):
        _check_broadcast(a, b, "add")
        return a + b, None

    def backward(g, ins, out, saved):
        return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)


@primitive("sub")
class _Sub:
    def forward(a, b):
        _check_broadcast(a, b, "sub")
        return a - b, None

    def backward(g, ins, out, saved):
        return _unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)


@primitive("mul")
class _Mul:
    def forward(a, b):
        _check_broadcast(a, b, "mul")
        return a * b, None

    def backward(g, ins, out, saved):
        a, b = ins
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("matmul")
class _Matmul:
    # (..., m, k) @ (k, n) or batched (B, m, k) @ (B, k, n); vectors are promoted
    def forward(a, b):
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        return a @ b, None

    def backward(g, ins, out, saved):
        a, b = ins
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if b.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@primitive("dot")
class _Dot:
    # inner product over the last axis
    def forward(a, b):
        if a.shape[-1:] != b.shape[-1:]:
            raise ShapeError(f"dot: last axes differ, {a.shape} vs {b.shape}")
        _check_broadcast(a, b, "dot")
        return (a * b).sum(axis=-1), None

    def backward(g, ins, out, saved):
        a, b = ins
        g = g[..., None]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("concat")
class _Concat:
    def forward(*arrays, axis=-1):
        ref = arrays[0]
        ax = axis % ref.ndim
        for other in arrays[1:]:
            if other.ndim != ref.ndim or any(
                s != r for i, (s, r) in enumerate(zip(other.shape, ref.shape)) if i != ax
            ):
                raise ShapeError(f"concat: {ref.shape} vs {other.shape} along axis {axis}")
        return np.concatenate(arrays, axis=axis), None

    def backward(g, ins, out, saved, axis=-1):
        bounds = np.cumsum([x.shape[axis] for x in ins])[:-1]
        return tuple(np.split(g, bounds, axis=axis))


@primitive("slice")
class _Slice:
    def forward(a, index=None):
        return a[index], None

    def backward(g, ins, out, saved, index=None):
        grad = np.zeros_like(ins[0])
        np.add.at(grad, index, g)
        return (grad,)


@primitive("reshape")
class _Reshape:
    def forward(a, shape=None):
        if int(np.prod(shape)) != a.size and -1 not in shape:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
        return a.reshape(shape), None

    def backward(g, ins, out, saved, shape=None):
        return (g.reshape(ins[0].shape),)


@primitive("transpose")
class _Transpose:
    def forward(a, axes=None):
        return np.transpose(a, axes), None

    def backward(g, ins, out, saved, axes=None):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)


@primitive("expand")
class _Expand:
    def forward(a, shape=None):
        try:
            return np.broadcast_to(a, shape).copy(), None
        except ValueError:
            raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from None

    def backward(g, ins, out, saved, shape=None):
        return (_unbroadcast(g, ins[0].shape),)


@primitive("sum")
class _Sum:
    def forward(a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    def backward(g, ins, out, saved, axis=None, keepdims=False):
        a = ins[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@primitive("mean")
class _Mean:
    def forward(a, axis=None, keepdims=False):
        return np.asarray(a.mean(axis=axis, keepdims=keepdims)), None

    def backward(g, ins, out, saved, axis=None, keepdims=False):
        a = ins[0]
        count = a.size if axis is None else int(np.prod([a.shape[x] for x in np.atleast_1d(axis)]))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)


@primitive("sigmoid")
class _Sigmoid:
    def forward(a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, None

    def backward(g, ins, out, saved):
        return (g * out * (1.0 - out),)


@primitive("tanh")
class _Tanh:
    def forward(a):
        return np.tanh(a), None

    def backward(g, ins, out, saved):
        return (g * (1.0 - out * out),)


@primitive("exp")
class _Exp:
    def forward(a):
        # overflow surfaces as inf and is reported by the tape's finiteness check
        with np.errstate(over="ignore"):
            return np.exp(a), None

    def backward(g, ins, out, saved):
        return (g * out,)


@primitive("log")
class _Log:
    def forward(a):
        if np.any(a < 0):
            raise ValueError("log of a negative value")
        clamped = a < LOG_FLOOR
        return np.log(np.maximum(a, LOG_FLOOR)), clamped

    def backward(g, ins, out, saved):
        grad = g / np.maximum(ins[0], LOG_FLOOR)
        grad[saved] = 0.0
        return (grad,)


@primitive("softmax")
class _Softmax:
    def forward(a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True), None

    def backward(g, ins, out, saved, axis=-1):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@primitive("gather")
class _Gather:
    # rows of a 2-d table selected by an integer index array of any shape
    def forward(table, index=None):
        if table.ndim != 2:
            raise ShapeError("gather: table must be 2-d")
        if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
            raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")
        return table[index], None

    def backward(g, ins, out, saved, index=None):
        grad = np.zeros_like(ins[0])
        np.add.at(grad, index.reshape(-1), g.reshape(-1, ins[0].shape[1]))
        return (grad,)


@primitive("layer_norm")
class _LayerNorm:
    # normalisation over the last axis, no affine part
    def forward(a, eps=1e-5):
        mu = a.mean(axis=-1, keepdims=True)
        centered = a - mu
        inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        return centered * inv, inv

    def backward(g, ins, out, saved, eps=1e-5):
        n = ins[0].shape[-1]
        inv = saved
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`variable` (gradient tracked) or
    :meth:`constant`.  A tape is single-threaded; use one per thread.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def variable(self, value, name: str | None = None) -> Tensor:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite leaf value{f' for {name}' if name else ''}")
        return self._push(Node("leaf", (), value, True, name=name))

    def constant(self, value) -> Tensor:
        return self._push(Node("const", (), np.asarray(value), False))

    def apply(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        if kind not in PRIMITIVES:
            raise KeyError(f"unknown primitive {kind!r}")
        for t in inputs:
            if t.tape is not self:
                raise ValueError("inputs belong to a different tape")
        values = [self.nodes[t.node].value for t in inputs]
        out, saved = PRIMITIVES[kind].forward(*values, **attrs)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced a non-finite value")
        requires = any(self.nodes[t.node].requires_grad for t in inputs)
        return self._push(Node(kind, tuple(t.node for t in inputs), out, requires, attrs, saved))

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node's forward value, optionally substituting leaves."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for idx, node in enumerate(self.nodes):
            if node.kind in ("leaf", "const"):
                values.append(np.asarray(overrides.get(idx, node.value)))
            else:
                out, _ = PRIMITIVES[node.kind].forward(
                    *(values[i] for i in node.inputs), **node.attrs
                )
                values.append(out)
        return values


def backprop(tape: Tape, loss: Tensor | int) -> dict[int, np.ndarray]:
    """Gradients of a scalar node with respect to every node that needs one."""
    loss_id = loss.node if isinstance(loss, Tensor) else int(loss)
    if not 0 <= loss_id < len(tape.nodes):
        raise KeyError(f"node {loss_id} is not on the tape")
    root = tape.nodes[loss_id]
    if root.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {root.value.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(root.value)}
    for idx in range(loss_id, -1, -1):
        g = grads.get(idx)
        node = tape.nodes[idx]
        if g is None or not node.requires_grad or not node.inputs:
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        parts = PRIMITIVES[node.kind].backward(g, ins, node.value, node.saved, **node.attrs)
        for i, part in zip(node.inputs, parts):
            if part is None or not tape.nodes[i].requires_grad:
                continue
            if tape.check_finite and not np.all(np.isfinite(part)):
                raise NonFiniteError(f"non-finite gradient through {node.kind}")
            if i in grads:
                grads[i] = grads[i] + part
            else:
                grads[i] = part
    return {i: g for i, g in grads.items() if tape.nodes[i].requires_grad}


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(f(x))
        flat[k] = orig - eps
        lo = float(f(x))
        flat[k] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite near coordinate {k}")
        gflat[k] = (hi - lo) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# functional surface


def apply_primitive(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    if not inputs:
        raise ValueError("apply_primitive needs at least one input tensor")
    return inputs[0].tape.apply(kind, *inputs, **attrs)


def add(a, b):
    return a.tape.apply("add", a, b)


def sub(a, b):
    return a.tape.apply("sub", a, b)


def mul(a, b):
    return a.tape.apply("mul", a, b)


def matmul(a, b):
    return a.tape.apply("matmul", a, b)


def dot(a, b):
    return a.tape.apply("dot", a, b)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    return tensors[0].tape.apply("concat", *tensors, axis=axis)


def slice_(a, index):
    return a.tape.apply("slice", a, index=index)


def reshape(a, shape):
    return a.tape.apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return a.tape.apply("transpose", a, axes=None if axes is None else tuple(axes))


def expand(a, shape):
    return a.tape.apply("expand", a, shape=tuple(shape))


def sum_(a, axis=None, keepdims=False):
    return a.tape.apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return a.tape.apply("mean", a, axis=axis, keepdims=keepdims)


def sigmoid(a):
    return a.tape.apply("sigmoid", a)


def tanh(a):
    return a.tape.apply("tanh", a)


def exp(a):
    return a.tape.apply("exp", a)


def log(a):
    return a.tape.apply("log", a)


def softmax(a, axis=-1):
    return a.tape.apply("softmax", a, axis=axis)


def gather(table, index):
    return table.tape.apply("gather", table, index=np.asarray(index, dtype=np.int64))


def layer_norm(a, eps=1e-5):
    return a.tape.apply("layer_norm", a, eps=eps)
