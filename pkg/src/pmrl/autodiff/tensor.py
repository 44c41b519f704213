"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, while recording is enabled, the
operation that produced it. :func:`backward` walks the recorded graph in
reverse topological order and accumulates gradients into leaf tensors that
were created with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..exceptions import ContractError, DimensionError

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _RECORDING
    previous = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = previous


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    """Graph node: value, producing op tag, parent nodes and gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

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


ArrayLike = "Tensor | np.ndarray | float"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _node(out, (a, b), "div", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data**p, (a,), "pow", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


# -- reductions and shape -------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters with ``np.add.at``."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.asarray(a.data[index]), (a,), "getitem", backward)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor: ``out[...] = a[rows[...], :]``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got shape {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, rows.reshape(-1), g.reshape(-1, a.shape[1]))
        return (out,)

    return _node(a.data[rows], (a,), "take_rows", backward)


def put_rows(a, rows: np.ndarray, n: int) -> Tensor:
    """Place rows of ``a`` at distinct positions ``rows`` of an ``n``-row zero tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    out[rows] = a.data
    return _node(out, (a,), "put_rows", lambda g: (g[rows],))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, "stack", backward)


def repeat2d(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    a = as_tensor(a)
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        shape = g.shape[:-2] + (g.shape[-2] // factor, factor, g.shape[-1] // factor, factor)
        return (g.reshape(shape).sum(axis=(-3, -1)),)

    return _node(out, (a,), "repeat2d", backward)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics for 2-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), "softmax", backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), "log_softmax", backward)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[C_in,H,W]`` (or ``[N,C_in,H,W]``) by ``[C_out,C_in,k,k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if xd.shape[1] != c_in:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernel expects {c_in}")
    n, _, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise DimensionError("padded input smaller than kernel")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: [N, Ho, Wo, C_in*k*k]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c_in * k * k)
    wmat = kernel.data.reshape(c_out, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    result = out if batched else out[0]

    def backward(g):
        gb = g if batched else g[None]
        gflat = gb.transpose(0, 2, 3, 1)  # [N,Ho,Wo,C_out]
        gk = (gflat.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k * k)).reshape(kernel.shape)
        gcols = (gflat @ wmat).reshape(n, ho, wo, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads = [gx if batched else gx[0], gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(result, parents, "conv2d", backward)


# -- reverse sweep --------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable ancestor.

    Raises:
        ContractError: ``root`` holds more than one element.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)
        if free_graph:
            node.parents = ()
            node._backward = None
            node.requires_grad = False
