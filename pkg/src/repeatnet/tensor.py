"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a float64 numpy array. Operations on tensors that
require gradients record their inputs and a closure mapping the output
gradient to input gradients; :meth:`Tensor.backward` walks that graph in
reverse topological order. Only leaf tensors (parameters) keep ``.grad``;
intermediate gradients live for the duration of a single backward pass, so
calling ``backward`` twice on the same graph accumulates exactly twice.

Broadcasting follows numpy rules; gradients are summed back to the operand
shape.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, EmptySupportError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # -- operators ----------------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    # -- differentiation ----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not attached to a graph of trainable tensors")
        order = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- construction -----------------------------------------------------------


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), backward, "div")


def scale(x, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward, "scale")


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), backward, "tanh")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), backward, "sigmoid")


def exp(x):
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _result(y, (x,), backward, "exp")


def log(x):
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def clamp_min(x, floor):
    """``max(x, floor)``; gradient flows only where ``x >= floor``."""
    keep = x.data >= floor

    def backward(g):
        return (g * keep,)

    return _result(np.where(keep, x.data, floor), (x,), backward, "clamp_min")


def dropout(x, p, train, rng=None):
    """Inverted dropout. Eval mode (or ``p == 0``) returns ``x`` itself."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), backward, "dropout")


# -- shape and reduction ----------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _result(x.data.T, (x,), backward, "transpose")


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(y, (x,), backward, "reshape")


def sum_(x, axis=None, keepdims=False):
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), backward, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(y, tuple(tensors), backward, "stack")


def index_select(x, index):
    """``x[index]`` for any numpy index; repeated indices accumulate."""
    y = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(y, (x,), backward, "index")


def take_rows(table, rows):
    """Row lookup ``table[rows]`` (embedding gather)."""
    rows = np.asarray(rows, dtype=np.intp)
    y = table.data[rows]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, rows, g)
        return (out,)

    return _result(y, (table,), backward, "take_rows")


def pick(x, index):
    """``out[b] = x[b, index[b]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])
    y = x.data[rows, index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _result(y, (x,), backward, "pick")


def scatter_add(x, index, width):
    """``out[b, index[b, t]] += x[b, t]``; ``out`` has shape (B, width)."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape or x.ndim != 2:
        raise DimensionError(f"scatter_add: values {x.shape} vs index {index.shape}")
    rows = np.broadcast_to(np.arange(x.shape[0])[:, None], index.shape)
    out = np.zeros((x.shape[0], width), dtype=DTYPE)
    np.add.at(out, (rows, index), x.data)

    def backward(g):
        return (np.take_along_axis(g, index, axis=1),)

    return _result(out, (x,), backward, "scatter_add")


# -- normalisation ----------------------------------------------------------


def softmax(x, mask=None, axis=-1, empty="raise"):
    """Softmax along ``axis`` with max-subtraction.

    Entries where ``mask`` is False get probability exactly 0 and are left
    out of the denominator. A row with no unmasked entries raises
    :class:`EmptySupportError`, or comes out all-zero when ``empty="zero"``.
    """
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax: mask {mask.shape} vs input {x.shape}")
        support = mask.any(axis=axis, keepdims=True)
        if not support.all() and empty == "raise":
            raise EmptySupportError("softmax: every entry is masked")
        masked = np.where(mask, x.data, -np.inf)
        peak = np.where(support, masked.max(axis=axis, keepdims=True), 0.0)
        e = np.exp(np.where(mask, x.data - peak, -np.inf))
        denom = e.sum(axis=axis, keepdims=True)
        y = e / np.where(support, denom, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")
