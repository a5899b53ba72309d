"""Dense fp64 tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the recorded graph in
reverse topological order, accumulates into leaf ``.grad`` buffers and then
releases the graph.

Non-finite values are never propagated: any op producing NaN/Inf raises
:class:`NonFiniteError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        o = as_tensor(other)
        a_shape, b_shape = self.shape, o.shape
        return Tensor._result(
            self.data + o.data,
            (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = as_tensor(other)
        a_shape, b_shape = self.shape, o.shape
        return Tensor._result(
            self.data - o.data,
            (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data
        return Tensor._result(
            a * b,
            (self, o),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data
        return Tensor._result(
            a / b,
            (self, o),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data
        p = float(exponent)
        return Tensor._result(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of module functions ----------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    a = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a)
    return Tensor._result(y, (x,), lambda g: (g / a,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._result(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def rsqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)
    return Tensor._result(y, (x,), lambda g: (g * -0.5 * y * y * y,), "rsqrt")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return expit(a)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = _sigmoid(a)
    return Tensor._result(a * s, (x,), lambda g: (g * s * (1.0 + a * (1.0 - s)),), "silu")


def silu_np(a: np.ndarray) -> np.ndarray:
    return a * _sigmoid(a)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(y, dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    y = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._result(np.array(y, dtype=DTYPE), (x,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return Tensor._result(weight.data[ids], (weight,), bw, "embedding")


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """``np.repeat`` along ``axis`` (each slice repeated ``repeats`` times in place)."""
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        gshape = shape[:axis] + (shape[axis], repeats) + shape[axis + 1 :]
        return (g.reshape(gshape).sum(axis=axis + 1),)

    return Tensor._result(np.repeat(x.data, repeats, axis=axis), (x,), bw, "repeat")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must not be scalars")
    # 1-D operands follow numpy: promote, multiply, drop the added axis
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return Tensor._result(A @ B, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def softmax_np(a: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    m = a.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("softmax row with every position masked")
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-max-shifted softmax; ``mask`` False entries get weight exactly 0."""
    y = softmax_np(x.data, mask, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean natural-log cross-entropy over positions where ``mask`` is true.

    ``logits`` is ``[..., vocab]``; ``targets`` matches the leading shape.
    """
    z = logits.data
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy with empty mask")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    tgt = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (mask[..., None] / count),)

    return Tensor._result(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (2i, 2i+1) of the last axis by angles with the given cos/sin.

    ``cos``/``sin`` have last extent d/2 and broadcast against ``x[..., ::2]``.
    """
    a = x.data
    if a.shape[-1] % 2:
        raise ValueError("rotate_pairs needs an even last dimension")

    def rot(v, s):
        e, o = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = e * cos - o * s
        out[..., 1::2] = e * s + o * cos
        return out

    y = rot(a, sin)
    return Tensor._result(y, (x,), lambda g: (rot(g, -sin),), "rotate_pairs")


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; consumes the graph."""
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=DTYPE)
    if not loss.requires_grad:
        raise RuntimeError("loss is not on the gradient tape")
    order = _topo_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def parameters_grads(params: Iterable[Tensor]) -> list:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
