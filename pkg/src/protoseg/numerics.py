"""Dense float64 arithmetic with a small reverse-mode differentiation engine.

Every value that takes part in a differentiable computation is a
:class:`Tensor`: a float64 ndarray plus the backward closure that produced
it.  Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates exact partial derivatives into
``.grad`` of every leaf created with ``requires_grad=True``.

Leading axes broadcast like numpy.  ``detach()`` returns a constant view of
the same data; nothing flows back through it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class NumericsError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> Array:
    """Coerce to a finite float64 array, raising on NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {name}")
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- graph bookkeeping -------------------------------------------------
    @staticmethod
    def _make(data: Array, parents: Sequence["Tensor"], backward) -> "Tensor":
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Array | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, Array] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data - b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other) / self

    def __pow__(self, k: float) -> "Tensor":
        a = self
        return Tensor._make(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self, other

        def back(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._make(a.data @ b.data, (a, b), back)

    def __rmatmul__(self, other) -> "Tensor":
        return _wrap(other) @ self

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        a = self
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def gelu(self) -> "Tensor":
        # tanh approximation; smooth everywhere so finite differences agree
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

        return Tensor._make(out, (self,), back)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def softmax(self, axis: int = -1) -> "Tensor":
        out = _softmax(self.data, axis)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), back)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def back(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (self,), back)

    # -- shape -------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def swapaxes(self, i: int, j: int) -> "Tensor":
        return Tensor._make(np.swapaxes(self.data, i, j), (self,),
                            lambda g: (np.swapaxes(g, i, j),))

    def expand(self, shape: tuple[int, ...]) -> "Tensor":
        a = self
        return Tensor._make(np.broadcast_to(a.data, shape).copy(), (a,),
                            lambda g: (_unbroadcast(g, a.shape),))

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), back)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _softmax(x: Array, axis: int) -> Array:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def straight_through(hard: Array, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the incoming gradient passes to ``soft`` unchanged."""
    return Tensor._make(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt()


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    if np.any(norm.data == 0.0):
        raise NumericsError("degenerate vector")
    return x / norm


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``."""
    return l2_normalize(_wrap(a)) @ l2_normalize(_wrap(b)).T


# -- plain-array operations ---------------------------------------------------

def softmax_rows(x, temperature: float = 1.0) -> Array:
    if not temperature > 0:
        raise NumericsError("invalid temperature")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite logits")
    return _softmax(arr / temperature, axis=-1)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise NumericsError("vectors must have equal nonzero length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericsError("degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def grad_check(loss: Callable[[Tensor], Tensor], at, step: float = 1e-5,
               entries: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between the reverse-mode gradient and central differences.

    ``loss`` maps a Tensor to a scalar Tensor.  The error per entry is
    ``|analytic - fd| / max(1, |analytic|)``.  ``entries`` restricts the
    comparison to a subset of indices (all entries by default).
    """
    if not 1e-7 <= step <= 1e-3:
        raise NumericsError("step must lie in [1e-7, 1e-3]")
    x0 = np.array(at, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = loss(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericsError("loss not evaluable")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    def value(arr: Array) -> float:
        v = loss(Tensor(arr)).data
        if not np.all(np.isfinite(v)):
            raise NumericsError("loss not evaluable")
        return float(v)

    worst = 0.0
    idxs = list(np.ndindex(x0.shape)) if entries is None else list(entries)
    for idx in idxs:
        xp = x0.copy()
        xp[idx] += step
        xm = x0.copy()
        xm[idx] -= step
        fd = (value(xp) - value(xm)) / (2 * step)
        a = analytic[idx]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
