"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every tensor produced while a :class:`Tape` is active is appended to it, so the
tape order is a topological order of the computation and the backward pass is a
single reverse sweep. Outside a tape, operations compute values only.

The primitive set is closed: matmul, add, sub, mul, neg, softmax, log_softmax,
log, sigmoid, layernorm, gather (embedding lookup), pick (last-axis gather),
sum, mean, reshape, transpose, minimum and the fused cross-entropy. Everything
else in the package composes these.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(ValueError):
    """A bound input contains NaN or infinity."""


class Tape:
    """Records nodes in creation order while active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, output: "Tensor") -> None:
        if output.data.size != 1:
            raise ShapeError(f"node {output.id}: backward needs a scalar output, got shape {output.shape}")
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            # free intermediate buffers once consumed
            if node._parents:
                node._backward = None


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array node. ``requires_grad`` leaves accumulate ``.grad``."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        native = isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if arr.dtype.kind == "f":
            # python scalars and lists default to fp32; float64 arrays stay
            # float64 so gradient checks can run in double precision
            if not native or arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DTYPE)
        elif arr.dtype.kind not in "iub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("integer tensors are not differentiable")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = op
        tape = _active_tape()
        if tape is not None:
            self.id = len(tape.nodes)
            tape.nodes.append(self)
        else:
            self.id = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_integer(self) -> bool:
        return self.data.dtype.kind != "f"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, id={self.id})"

    def _accumulate(self, g: np.ndarray) -> None:
        # never add in place: backward closures may hand the same buffer to
        # several parents
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    # make ndarray (op) Tensor defer to the reflected Tensor methods
    __array_ufunc__ = None

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an interior node; ``backward(g)`` pushes ``g`` into ``parents``."""
    tracked = _active_tape() is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, op=op)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"node {_next_id()}: {op} cannot broadcast {a.shape} with {b.shape}") from None


def _next_id() -> int:
    tape = _active_tape()
    return len(tape.nodes) if tape is not None else -1


def _push(t: Tensor, g) -> None:
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------- elementwise

def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; a python scalar takes the float dtype of its partner."""
    def weak(x, other):
        if isinstance(x, (int, float)) and isinstance(other, Tensor) and other.data.dtype.kind == "f":
            return Tensor(np.asarray(x, dtype=other.data.dtype))
        return as_tensor(x)

    return weak(a, b), weak(b, a)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _push(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _push(a, -g), "neg")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _push(a, g / a.data), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: _push(a, g * out * (1.0 - out)), "sigmoid")


def minimum(a, bound: float) -> Tensor:
    """Elementwise ``min(a, bound)``; gradient is zero where the bound is active."""
    a = as_tensor(a)
    keep = a.data <= bound
    out = np.where(keep, a.data, np.asarray(bound, dtype=a.data.dtype))
    return _make(out, (a,), lambda g: _push(a, g * keep), "minimum")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"node {_next_id()}: matmul {a.shape} @ {b.shape}")
    if b.data.ndim == 2:
        # (..., n) @ (n, m): flatten the leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _push(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _push(b, a2.T @ g2)

        return _make(out, (a, b), backward, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"node {_next_id()}: matmul batch dims {a.shape} @ {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _push(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"node {_next_id()}: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: _push(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: _push(a, g.transpose(inv)), "transpose")


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push(a, np.broadcast_to(g / count, a.shape))

    return _make(out, (a,), backward, "mean")


# ---------------------------------------------------------------- normalisation

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _push(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), backward, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        _push(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), backward, "log_softmax")


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv
    n = a.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        _push(a, inv * (g - gm - out * gy))

    return _make(out, (a,), backward, "layernorm")


# ---------------------------------------------------------------- indexing

def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding)."""
    table, ids = as_tensor(table), as_tensor(ids)
    if not ids.is_integer:
        raise ShapeError(f"node {_next_id()}: gather needs integer ids")
    if ids.data.size and (ids.data.min() < 0 or ids.data.max() >= table.shape[0]):
        raise ShapeError(f"node {_next_id()}: gather id out of range for table {table.shape}")
    idx = ids.data

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        _push(table, gt)

    return _make(table.data[idx], (table,), backward, "gather")


def pick(a, ids) -> Tensor:
    """``a[..., ids[...]]``: select one entry of the last axis per leading index."""
    a, ids = as_tensor(a), as_tensor(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"node {_next_id()}: pick ids {ids.shape} vs values {a.shape}")
    idx = ids.data[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        _push(a, ga)

    return _make(out, (a,), backward, "pick")


def cross_entropy(logits, targets) -> Tensor:
    """Per-position ``-log softmax(logits)[target]`` via the stable log-softmax."""
    return neg(pick(log_softmax(logits), targets))


# ---------------------------------------------------------------- graphs

class Graph:
    """A traced scalar (or tensor) function of named inputs.

    ``fn`` receives one keyword argument per input name. ``nodes`` holds the
    node list of the most recent evaluation in topological order.
    """

    def __init__(self, fn: Callable[..., Tensor], inputs: Iterable[str]):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.nodes: list[Tensor] = []
        self.output: Tensor | None = None

    def _bind(self, bindings: Mapping, wrt: set, allow_nonfinite: bool) -> dict:
        missing = [n for n in self.inputs if n not in bindings]
        if missing:
            raise KeyError(f"unbound graph inputs: {missing}")
        leaves = {}
        for name in self.inputs:
            value = bindings[name]
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype.kind == "f" and not allow_nonfinite and not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"input {name!r} contains non-finite values")
            if name in wrt and arr.dtype.kind != "f":
                raise TypeError(f"input {name!r} is integer-valued and not differentiable")
            leaves[name] = Tensor(arr, requires_grad=name in wrt, op=f"input:{name}")
        return leaves

    def run(self, bindings: Mapping, wrt: Iterable[str] = (), allow_nonfinite: bool = False):
        wrt = set(wrt)
        unknown = wrt - set(self.inputs)
        if unknown:
            raise KeyError(f"gradient requested for unknown inputs: {sorted(unknown)}")
        with Tape() as tape:
            leaves = self._bind(bindings, wrt, allow_nonfinite)
            out = as_tensor(self.fn(**leaves))
        self.nodes = tape.nodes
        self.output = out
        return out, leaves, tape


def evaluate(graph: Graph, bindings: Mapping, allow_nonfinite: bool = False) -> Tensor:
    out, _, _ = graph.run(bindings, allow_nonfinite=allow_nonfinite)
    return out


def gradients(graph: Graph, bindings: Mapping, wrt: Iterable[str],
              allow_nonfinite: bool = False) -> dict[str, np.ndarray]:
    wrt = list(wrt)
    out, leaves, tape = graph.run(bindings, wrt, allow_nonfinite)
    tape.backward(out)
    return {n: leaves[n].grad if leaves[n].grad is not None else np.zeros_like(leaves[n].data)
            for n in wrt}


def value_and_grad(fn: Callable[..., Tensor], wrt: Mapping[str, np.ndarray], **consts):
    """Evaluate ``fn(**wrt, **consts)`` and return ``(value, {name: grad})``.

    ``wrt`` values become differentiable leaves; ``consts`` pass through untouched.
    """
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True, op=f"input:{k}") for k, v in wrt.items()}
        out = fn(**leaves, **consts)
        tape.backward(out)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}
    return out.item(), grads


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-3) -> float:
    """Max coordinatewise relative error between analytic and central-difference gradients.

    The point is promoted to float64 so the difference quotient is not dominated
    by rounding. Non-finite differences count as infinite error.
    """
    x = np.array(point, dtype=np.float64)
    _, grads = value_and_grad(lambda x: fn(x), {"x": x})
    analytic = grads["x"]
    numeric = np.empty_like(x)
    flat, num = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = as_tensor(fn(Tensor(x))).item()
        flat[i] = orig - h
        fm = as_tensor(fn(Tensor(x))).item()
        flat[i] = orig
        num[i] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        return float("inf")
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
