"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients.  Calling
:func:`backward` on a scalar replays that record in reverse topological order
and accumulates ``grad`` on every leaf that requires it.

The graph is owned by the tensors themselves, so independent forward passes on
different threads never share state.  Only the no-grad flag is thread local.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_DEFAULT_DTYPE = np.float32
_state = threading.local()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Set the global floating point type (``float32`` or ``float64``)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. to float64 for gradient checks."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """An n-d array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a):
    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def matmul(a, b):
    """Matrix product of two 2-d tensors."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def ssp(x):
    """Shifted softplus ``ln(0.5 e^x + 0.5)``, stable for large ``|x|``."""
    x = _as_tensor(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d))) - d.dtype.type(np.log(2.0))

    def backward(g):
        return (g * _sigmoid(d),)

    return _make(out.astype(d.dtype, copy=False), (x,), backward)


def _sigmoid(d):
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return _make(s, (x,), backward)


def _check_temperature(temperature):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def log_softmax_rows(x, temperature=1.0):
    """Row-wise ``log(exp(x/T) / sum(exp(x/T)))`` via log-sum-exp."""
    _check_temperature(temperature)
    x = _as_tensor(x)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return ((g - soft * g.sum(axis=-1, keepdims=True)) / x.data.dtype.type(temperature),)

    return _make(out, (x,), backward)


def softmax_rows(x, temperature=1.0):
    """Row-wise tempered softmax; each row sums to one."""
    _check_temperature(temperature)
    x = _as_tensor(x)
    z = x.data / x.data.dtype.type(temperature)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / x.data.dtype.type(temperature),)

    return _make(out, (x,), backward)


def tensor_sum(x, axis=None):
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def gather(x, index):
    """Select rows ``x[index]``; used for embedding lookups and edge features."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def index_add(x, index, size):
    """Scatter-sum rows: ``out[index[k]] += x[k]`` with ``size`` output rows."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    # accumulate in float64 and round once, so float32 sums do not depend on
    # the order of the scattered rows (keeps atom permutations bit-exact)
    acc = np.zeros((size,) + x.shape[1:], dtype=np.promote_types(x.dtype, np.float64))
    np.add.at(acc, index, x.data)
    out = acc.astype(x.dtype, copy=False)

    def backward(g):
        return (g[index],)

    return _make(out, (x,), backward)


# ------------------------------------------------------------------ backward


def _topological(root):
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
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
