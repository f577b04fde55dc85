"""Dense numpy-backed tensors with reverse-mode gradients.

Every value flowing through the model is a :class:`Tensor`. Operations record
a closure that maps the output gradient to input gradients; ``backward`` walks
the recorded graph in reverse topological order. Storage defaults to float32;
tensors built from float64 arrays stay float64, which is what the gradient
checker relies on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_kink_log = None


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(ValueError):
    """A mask leaves no valid position to attend to or pool over."""


class ParameterError(ValueError):
    """A hyperparameter lies outside its valid range."""


@contextlib.contextmanager
def record_kinks():
    """Collect the active-side masks of every ReLU/clamp evaluated in the block."""
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


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


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- bookkeeping -----------------------------------------------------
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self):
        return self.data.shape[0]

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(self, Parameter) else g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor, accumulating into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter) or not node._parents:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and a frozen switch."""

    __slots__ = ("_trainable",)

    def __init__(self, data, trainable=True, dtype=None):
        super().__init__(np.array(data, copy=True), dtype=dtype)
        self._trainable = bool(trainable)
        self.requires_grad = self._trainable
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.requires_grad = self._trainable
        if not self._trainable:
            self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = "" if self._trainable else ", frozen"
        return f"Parameter(shape={self.shape}{flag})"


@dataclass
class RngState:
    """Counter-based random stream: each draw is keyed on ``(seed, counter)``."""

    seed: int
    counter: int = 0

    def generator(self):
        gen = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, self.counter])
        self.counter += 1
        return gen

    def uniform(self, shape):
        return self.generator().random(shape)


def as_tensor(x, dtype=None):
    if type(x) is Tensor or isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data, parents, backward):
    # hot path: skip __init__'s dtype handling, ``data`` is already an ndarray
    if type(data) is not np.ndarray:
        data = np.asarray(data)  # numpy scalars from 0-d arithmetic
    out = object.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise -------------------------------------------------------------
def add(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.data.dtype)
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape
    return _make(ad + bd, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(a):
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a):
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,))


def relu(a):
    pos = a.data > 0
    if _kink_log is not None:
        _kink_log.append(pos)
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def clip(a, lo, hi):
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    if _kink_log is not None:
        _kink_log.append(inside)
    return _make(np.clip(x, lo, hi).astype(a.dtype), (a,), lambda g: (g * inside,))


# -- reductions and reshaping --------------------------------------------------
def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def index(a, idx):
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- linear algebra ------------------------------------------------------------
_grad_fault = 1.0


@contextlib.contextmanager
def break_gradient(factor=1.01):
    """Scale every matmul input-gradient by ``factor``; a debugging fault injector."""
    global _grad_fault
    prev = _grad_fault
    _grad_fault = factor
    try:
        yield
    finally:
        _grad_fault = prev


def matmul(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.data.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if _grad_fault != 1.0:
            ga = ga * _grad_fault
            gb = gb * _grad_fault
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(np.matmul(ad, bd), (a, b), back)
