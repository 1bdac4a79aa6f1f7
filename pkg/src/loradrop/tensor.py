"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable op builds a node holding its inputs and a local
gradient rule. ``backward`` orders the nodes reachable from a scalar loss
into a tape (inputs before outputs) and replays it in reverse, accumulating
into ``.grad`` of every leaf with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_scope = contextvars.ContextVar("scope", default="")


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str, scope: str):
        self.op = op
        self.scope = scope
        where = f" in {scope}" if scope else ""
        super().__init__(f"non-finite values produced by {op}{where}")


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def scope(name: str):
    """Label ops for error diagnostics (e.g. ``layer3.query``)."""
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _tracks(*tensors: Tensor) -> bool:
    return any(_needs(t) for t in tensors)


def _make(out: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op, _scope.get())
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.requires_grad = False
    t.name = None
    t._node = _Node(op, inputs, backward) if grad_enabled() and _tracks(*inputs) else None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` (trailing-axis broadcasting only)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimension mismatch between {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if _needs(a) else None
        if not _needs(b):
            gb = None
        elif b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _make(
        out,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape) if _needs(a) else None, _unbroadcast(g, b.shape) if _needs(b) else None),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _make(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, so finite differences apply."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, "gelu", (a,), backward)


def _check_axis(a: Tensor, axis: int, op: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if _needs(gamma) else None
        gb = _unbroadcast(g, beta.shape) if _needs(beta) else None
        return gx, gg, gb

    return _make(out, "layer_norm", (a, gamma, beta), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValueError(f"embedding: id out of range [0, {n})")
    out = table.data[ids]

    def backward(g):
        if not _needs(table):
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, "embedding", (table,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.array(-logp[rows, labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _make(out, "cross_entropy", (logits,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def mean(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis(a, axis, "mean")
    n = a.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis), "mean", (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _make(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(a.shape, g),))


# ---------------------------------------------------------------- tape


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, nodes: list[tuple[Tensor, _Node]]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Tensor, _Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append((t, t._node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in reversed(t._node.inputs):
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [node.op for _, node in self.nodes]

    def replay_backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for t, node in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if pg is None:
                    continue
                if parent._node is not None:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                if parent.requires_grad:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
            return
        raise ValueError("loss was not produced through the tape")
    Tape.from_output(loss).replay_backward(loss, np.ones((), dtype=DTYPE))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
