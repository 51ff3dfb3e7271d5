"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` records the operation that produced it; :func:`backward`
replays the tape in reverse topological order and accumulates gradients.
The engine is dtype-agnostic: graphs built from float64 leaves produce
float64 gradients, which is what the finite-difference checks rely on.

Only the primitives needed by the mapping architectures are provided; in
particular ``median_lastaxis`` implements the robust reduction of the
training loss with the documented subgradient (odd count: gradient routed
to the median element; even count: the two middle elements each get half).
"""

from __future__ import annotations

import numpy as np


class UsageError(Exception):
    """Raised for invalid engine usage (e.g. backward before forward)."""


class Var:
    """One node of the recorded computation."""

    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Var):
    """A leaf Var that persists across steps (model weights)."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(np.asarray(value))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(var: Var, g: np.ndarray) -> None:
    g = _unbroadcast(g, var.data.shape)
    if var.grad is None:
        var.grad = np.zeros_like(var.data)
    var.grad += g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Var, b) -> Var:
    b = _wrap(b, a)
    out = Var(a.data + b.data, (a, b))

    def bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._bw = bw
    return out


def sub(a: Var, b) -> Var:
    b = _wrap(b, a)
    out = Var(a.data - b.data, (a, b))

    def bw():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out._bw = bw
    return out


def mul(a: Var, b) -> Var:
    b = _wrap(b, a)
    out = Var(a.data * b.data, (a, b))

    def bw():
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    out._bw = bw
    return out


def div(a: Var, b) -> Var:
    b = _wrap(b, a)
    return mul(a, pow_scalar(b, -1.0))


def pow_scalar(a: Var, exponent: float) -> Var:
    out = Var(a.data ** exponent, (a,))

    def bw():
        _accum(a, out.grad * exponent * a.data ** (exponent - 1.0))

    out._bw = bw
    return out


def sqrt(a: Var) -> Var:
    root = np.sqrt(a.data)
    out = Var(root, (a,))

    def bw():
        _accum(a, out.grad * 0.5 / root)

    out._bw = bw
    return out


def exp(a: Var) -> Var:
    e = np.exp(a.data)
    out = Var(e, (a,))

    def bw():
        _accum(a, out.grad * e)

    out._bw = bw
    return out


def relu(a: Var) -> Var:
    out = Var(np.maximum(a.data, 0), (a,))

    def bw():
        _accum(a, out.grad * (a.data > 0))

    out._bw = bw
    return out


def clip_min(a: Var, floor: float) -> Var:
    """max(a, floor) elementwise; gradient flows only where a > floor."""
    out = Var(np.maximum(a.data, floor), (a,))

    def bw():
        _accum(a, out.grad * (a.data > floor))

    out._bw = bw
    return out


def matmul(a: Var, b: Var) -> Var:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise UsageError("matmul operands must be at least 2-D")
    out = Var(np.matmul(a.data, b.data), (a, b))

    def bw():
        _accum(a, np.matmul(out.grad, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), out.grad))

    out._bw = bw
    return out


def reshape(a: Var, shape) -> Var:
    out = Var(a.data.reshape(shape), (a,))

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out._bw = bw
    return out


def transpose(a: Var, axes) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Var(np.transpose(a.data, axes), (a,))

    def bw():
        _accum(a, np.transpose(out.grad, inverse))

    out._bw = bw
    return out


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw():
        g = out.grad
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(sorted(ax % a.data.ndim for ax in axes))
            g = np.expand_dims(g, axis=axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out._bw = bw
    return out


def mean(a: Var, axis=None, keepdims=False) -> Var:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Var, axis: int = -1) -> Var:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y, (a,))

    def bw():
        g = out.grad
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._bw = bw
    return out


def median_lastaxis(a: Var) -> Var:
    """Median over the last axis of a 2-D Var [B, L] -> [B].

    Even L averages the two middle elements; the gradient is split half and
    half between them. Ties are broken by a stable argsort, which keeps
    training bitwise reproducible.
    """
    data = a.data
    if data.ndim != 2:
        raise UsageError(f"median_lastaxis expects [B, L], got {data.shape}")
    batch, length = data.shape
    rows = np.arange(batch)
    order = np.argsort(data, axis=1, kind="stable")
    if length % 2 == 1:
        mid = order[:, length // 2]
        out = Var(data[rows, mid], (a,))

        def bw():
            g = np.zeros_like(data)
            g[rows, mid] = out.grad
            _accum(a, g)

    else:
        lo = order[:, length // 2 - 1]
        hi = order[:, length // 2]
        out = Var(0.5 * (data[rows, lo] + data[rows, hi]), (a,))

        def bw():
            g = np.zeros_like(data)
            g[rows, lo] = 0.5 * out.grad
            g[rows, hi] += 0.5 * out.grad
            _accum(a, g)

    out._bw = bw
    return out


def conv3x3(x: Var, weight: Var, bias: Var) -> Var:
    """3x3 convolution with padding 1 over [B, Cin, H, W] input.

    weight is [Cout, Cin, 3, 3]; output is [B, Cout, H, W].
    """
    xd = x.data
    if xd.ndim != 4:
        raise UsageError(f"conv3x3 expects [B, C, H, W], got {xd.shape}")
    batch, cin, height, width = xd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    y = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    y = y + bias.data[None, :, None, None]
    out = Var(y, (x, weight, bias))

    def bw():
        g = out.grad
        _accum(weight, np.einsum("bohw,bchwij->ocij", g, windows, optimize=True))
        _accum(bias, g.sum(axis=(0, 2, 3)))
        gx = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                gx[:, :, i : i + height, j : j + width] += np.einsum(
                    "bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True
                )
        _accum(x, gx[:, :, 1 : 1 + height, 1 : 1 + width])

    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------

def backward(root: Var) -> None:
    """Populate ``grad`` on every Var reachable from ``root`` (a scalar)."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.data.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bw is not None:
            node._bw()
