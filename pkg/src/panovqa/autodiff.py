"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the operations applied to
it; ``backward`` replays the recorded graph once in reverse topological
order. The primitive set is deliberately small and every primitive has an
exact analytic adjoint (checked against central finite differences in the
test suite). All arithmetic is float64 throughout: gradient checks at
relative 1e-3..1e-4 are not reliable in single precision.

Inside a ``no_grad()`` block the same operations run without recording,
so a single code path can serve both training and plain inference.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import special as _special

_GRAD_ENABLED = True

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (values are unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node of the recorded computation graph.

    ``data`` is always a float64 ndarray (0-d arrays represent scalars).
    ``grad`` is populated by ``backward``; leaf gradients are kept while
    interior gradients are released as soon as they have propagated.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    # make ndarray <op> Tensor defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, _parents=()):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents if _GRAD_ENABLED else ()
        self._vjp = None

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _finish(self, vjp) -> "Tensor":
        # vjp closures are only retained while recording; otherwise they
        # would keep the whole upstream graph alive through no_grad rollouts
        if self._parents:
            self._vjp = vjp
        return self

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, (self, other))
        return out._finish(lambda g: (_unbroadcast(g, self.data.shape),
                                      _unbroadcast(g, other.data.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data - other.data, (self, other))
        return out._finish(lambda g: (_unbroadcast(g, self.data.shape),
                                      _unbroadcast(-g, other.data.shape)))

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, (self, other))
        return out._finish(lambda g: (_unbroadcast(g * other.data, self.data.shape),
                                      _unbroadcast(g * self.data, other.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data / other.data, (self, other))

        def vjp(g):
            return (_unbroadcast(g / other.data, self.data.shape),
                    _unbroadcast(-g * self.data / (other.data * other.data),
                                 other.data.shape))

        return out._finish(vjp)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        return out._finish(lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = Tensor(self.data ** exponent, (self,))
        return out._finish(
            lambda g: (g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = Tensor(self.data @ other.data, (self, other))
        return out._finish(lambda g: (g @ other.data.T, self.data.T @ g))

    # -- reductions and shaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(np.sum(self.data, axis=axis, keepdims=keepdims), (self,))

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return out._finish(vjp)

    def mean(self, axis=None, keepdims=False):
        out = Tensor(np.mean(self.data, axis=axis, keepdims=keepdims), (self,))
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in ax:
                count *= self.data.shape[a]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, self.data.shape).copy(),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g / count, self.data.shape).copy(),)

        return out._finish(vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,))
        return out._finish(lambda g: (g.reshape(self.data.shape),))

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return out._finish(vjp)

    # -- elementwise nonlinearities ----------------------------------------

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        return out._finish(lambda g: (g * (1.0 - y * y),))

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        return out._finish(lambda g: (g * y,))

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        return out._finish(lambda g: (g / self.data,))

    def log2(self):
        out = Tensor(np.log2(self.data), (self,))
        inv_ln2 = 1.0 / np.log(2.0)
        return out._finish(lambda g: (g * inv_ln2 / self.data,))

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor(y, (self,))
        return out._finish(lambda g: (g * 0.5 / y,))

    def abs(self):
        out = Tensor(np.abs(self.data), (self,))
        return out._finish(lambda g: (g * np.sign(self.data),))

    def softplus(self):
        # log1p(exp(-|x|)) + max(x, 0) is overflow-safe for large |x|
        y = np.log1p(np.exp(-np.abs(self.data))) + np.maximum(self.data, 0.0)
        out = Tensor(y, (self,))
        return out._finish(lambda g: (g * _special.expit(self.data),))

    def sigmoid(self):
        y = _special.expit(self.data)
        out = Tensor(y, (self,))
        return out._finish(lambda g: (g * y * (1.0 - y),))

    def normal_cdf(self):
        """Standard normal CDF; adjoint is the exact Gaussian pdf."""
        out = Tensor(_special.ndtr(self.data), (self,))
        return out._finish(lambda g: (
            g * _INV_SQRT_2PI * np.exp(-0.5 * self.data * self.data),))

    def sin(self):
        out = Tensor(np.sin(self.data), (self,))
        return out._finish(lambda g: (g * np.cos(self.data),))

    def cos(self):
        out = Tensor(np.cos(self.data), (self,))
        return out._finish(lambda g: (-g * np.sin(self.data),))

    def arcsin(self):
        out = Tensor(np.arcsin(self.data), (self,))
        return out._finish(
            lambda g: (g / np.sqrt(1.0 - self.data * self.data),))

    def clip_min(self, floor: float):
        """max(x, floor) with pass-through sub-gradient above the floor."""
        out = Tensor(np.maximum(self.data, floor), (self,))
        mask = self.data > floor
        return out._finish(lambda g: (g * mask,))

    def softmax(self, axis=-1):
        """Numerically stable softmax along ``axis`` (fused primitive)."""
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)
        out = Tensor(y, (self,))

        def vjp(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            return (y * (g - dot),)

        return out._finish(vjp)

    # -- backward ----------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``seed`` defaults to ones (scalar outputs). One backward pass per
        recorded graph; re-running requires rebuilding the forward graph.
        """
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(node.grad)):
                pg = np.asarray(pg, dtype=np.float64)
                if parent.grad is None:
                    parent.grad = pg.copy() if pg.base is not None else pg
                else:
                    parent.grad = parent.grad + pg
            if node is not self:
                node.grad = None  # free interior gradients early


def arctan2(y, x) -> Tensor:
    y = Tensor._lift(y)
    x = Tensor._lift(x)
    out = Tensor(np.arctan2(y.data, x.data), (y, x))

    def vjp(g):
        denom = x.data * x.data + y.data * y.data
        return (_unbroadcast(g * x.data / denom, y.data.shape),
                _unbroadcast(-g * y.data / denom, x.data.shape))

    return out._finish(vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return out._finish(lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 tuple(tensors))

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return out._finish(vjp)


def straight_through(hard: np.ndarray, surrogate: Tensor) -> Tensor:
    """Forward pass emits ``hard``; gradients flow through ``surrogate``."""
    out = Tensor(np.asarray(hard, dtype=np.float64), (surrogate,))
    return out._finish(lambda g: (g,))


def custom_op(data, parents, vjp) -> Tensor:
    """Fused primitive hook: caller supplies forward value and adjoint."""
    out = Tensor(data, tuple(parents))
    return out._finish(vjp)
