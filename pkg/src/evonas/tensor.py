"""Dense tensors on a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record a closure mapping the output gradient to the input
gradients; ``Tensor.backward`` replays those closures in reverse
topological order. Heavy primitives (convolution, normalisation, pooling)
live in :mod:`evonas.ops` and plug into the same tape via :func:`make`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's preconditions."""


class NumericError(ArithmeticError):
    """Raised when weights, activations or gradients stop being finite."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd -----------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit gradient only defined for scalar outputs")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return make(a.data + b.data, (a, b),
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return make(a.data - b.data, (a, b),
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return make(a.data * b.data, (a, b),
                    lambda g: (unbroadcast(g * b.data, a.shape),
                               unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return make(a.data / b.data, (a, b),
                    lambda g: (unbroadcast(g / b.data, a.shape),
                               unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> Tensor:
        return make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> Tensor:
        a = self
        return make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self
        return make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return make(out, (self,), lambda g: (g * 0.5 / out,))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op; records the tape only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
