"""Reverse-mode differentiation over numpy arrays.

Every op builds a new :class:`Tensor` that remembers its inputs and a
closure that pushes the output gradient back to them. :func:`backward`
orders the graph topologically and runs each closure exactly once.

Broadcasting is limited to what the score network needs: a trailing-axis
bias or a size-1 axis on either operand of ``add``/``sub``/``mul``.
"""

import numpy as np

from ..errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "set_default_dtype",
    "get_default_dtype",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "softmax",
    "concat",
    "gather",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "mse",
    "backward",
    "grad",
]

_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "fiub" and arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values produced{' in ' + name if name else ''}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _broadcast_shape(a, b, op):
    if a == b:
        return a
    if len(a) != len(b):
        # trailing-axis bias: (..., c) op (c,)
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        if len(short) == 1 and long_[-1] == short[0]:
            return long_
        if len(short) == 0:
            return long_
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def back(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=back)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def back(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return Tensor(a.data - b.data, _parents=(a, b), _backward=back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def back(out):
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=back)


def neg(a):
    a = _wrap(a)

    def back(out):
        _accumulate(a, -out.grad)

    return Tensor(-a.data, _parents=(a,), _backward=back)


def matmul(a, b):
    """2-D matrix product ``(m, k) @ (k, n)``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(out):
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=back)


def relu(a):
    a = _wrap(a)
    pos = a.data > 0

    def back(out):
        _accumulate(a, out.grad * pos)

    return Tensor(np.where(pos, a.data, 0.0), _parents=(a,), _backward=back)


def softmax(a):
    """Softmax over the last axis."""
    a = _wrap(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(out):
        dot = (out.grad * p).sum(axis=-1, keepdims=True)
        _accumulate(a, p * (out.grad - dot))

    return Tensor(p, _parents=(a,), _backward=back)


def concat(tensors, axis=-1):
    ts = [_wrap(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(out):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(sl)])

    return Tensor(np.concatenate([t.data for t in ts], axis=ax), _parents=tuple(ts), _backward=back)


def gather(a, indices):
    """Rows of ``a`` selected along axis 0; result shape ``indices.shape + a.shape[1:]``."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for axis of length {a.shape[0]}")

    def back(out):
        if not a.requires_grad:
            return
        g = np.zeros_like(a.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape((-1,) + a.shape[1:]))
        _accumulate(a, g)

    return Tensor(a.data[idx], _parents=(a,), _backward=back)


def reshape(a, shape):
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def back(out):
        _accumulate(a, out.grad.reshape(a.shape))

    return Tensor(data, _parents=(a,), _backward=back)


def reduce_sum(a, axis=None):
    a = _wrap(a)

    def back(out):
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return Tensor(a.data.sum(axis=axis), _parents=(a,), _backward=back)


def reduce_mean(a, axis=None):
    a = _wrap(a)
    count = a.data.size if axis is None else a.shape[axis]

    def back(out):
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return Tensor(a.data.mean(axis=axis), _parents=(a,), _backward=back)


def reduce_max(a, axis):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = _wrap(a)
    arg = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(out):
        if not a.requires_grad:
            return
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis), axis=axis)
        _accumulate(a, g)

    return Tensor(data, _parents=(a,), _backward=back)


def mse(a, b):
    """Mean of squared elementwise differences."""
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def _topo_order(root):
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


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    return loss


def grad(loss, params):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = None
    if loss.requires_grad:
        backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
