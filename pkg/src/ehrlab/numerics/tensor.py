"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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


class Tensor:
    """A float64 array that records the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    # -- introspection ---------------------------------------------------
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        if self._backward is None:
            self._accumulate(np.asarray(grad, dtype=np.float64))
            return
        _run_backward(self, grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            _emit(self, _unbroadcast(g, a_shape))
            _emit(other, _unbroadcast(g, b_shape))

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __neg__(self) -> "Tensor":
        def backward(g):
            _emit(self, -g)

        return Tensor._result(-self.data, (self,), backward)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            _emit(self, _unbroadcast(g * b, a.shape))
            _emit(other, _unbroadcast(g * a, b.shape))

        return Tensor._result(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            _emit(self, _unbroadcast(g / b, a.shape))
            _emit(other, _unbroadcast(-g * a / (b * b), b.shape))

        return Tensor._result(a / b, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data

        def backward(g):
            _emit(self, g * exponent * a ** (exponent - 1))

        return Tensor._result(a**exponent, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            if a.ndim == 1 and b.ndim == 1:
                _emit(self, g * b)
                _emit(other, g * a)
                return
            a2 = a[None, :] if a.ndim == 1 else a
            b2 = b[:, None] if b.ndim == 1 else b
            g2 = g
            if a.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if b.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            ga = g2 @ np.swapaxes(b2, -1, -2)
            gb = np.swapaxes(a2, -1, -2) @ g2
            if a.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            if b.ndim == 1:
                gb = gb[..., 0]
            _emit(self, _unbroadcast(ga, a.shape))
            _emit(other, _unbroadcast(gb, b.shape))

        return Tensor._result(a @ b, (self, other), backward)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _emit(self, np.broadcast_to(g, shape))

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        data = self.data
        idx = np.argmax(data, axis=axis)
        out = np.take_along_axis(data, np.expand_dims(idx, axis), axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
            _emit(self, full)

        if not keepdims:
            out = np.squeeze(out, axis=axis)
        return Tensor._result(out, (self,), backward)

    # -- elementwise --------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def backward(g):
            _emit(self, g * out)

        return Tensor._result(out, (self,), backward)

    def log(self) -> "Tensor":
        a = self.data

        def backward(g):
            _emit(self, g / a)

        return Tensor._result(np.log(a), (self,), backward)

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)

        def backward(g):
            _emit(self, g * 0.5 / out)

        return Tensor._result(out, (self,), backward)

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)

        def backward(g):
            _emit(self, g * (1.0 - out * out))

        return Tensor._result(out, (self,), backward)

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)

        def backward(g):
            _emit(self, g * out * (1.0 - out))

        return Tensor._result(out, (self,), backward)

    def cos(self) -> "Tensor":
        a = self.data

        def backward(g):
            _emit(self, -g * np.sin(a))

        return Tensor._result(np.cos(a), (self,), backward)

    def clip(self, low: float, high: float) -> "Tensor":
        a = self.data
        inside = (a >= low) & (a <= high)

        def backward(g):
            _emit(self, g * inside)

        return Tensor._result(np.clip(a, low, high), (self,), backward)

    # -- shape ----------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def backward(g):
            _emit(self, g.reshape(old))

        return Tensor._result(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)

        def backward(g):
            _emit(self, np.transpose(g, inverse))

        return Tensor._result(np.transpose(self.data, axes), (self,), backward)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            _emit(self, full)

        return Tensor._result(self.data[index], (self,), backward)


# Closures call _emit(parent, grad); the active backward pass collects the
# contributions so a node's gradient is complete before its closure runs.
_PENDING: list[dict[int, np.ndarray]] = []


def _emit(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent._backward is None:
        parent._accumulate(grad)
        return
    pending = _PENDING[-1]
    key = id(parent)
    if key in pending:
        pending[key] = pending[key] + grad
    else:
        pending[key] = np.array(grad, dtype=np.float64, copy=True)


def _run_backward(root: Tensor, seed: np.ndarray) -> None:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    pending: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    _PENDING.append(pending)
    try:
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
            else:
                node._backward(g)
    finally:
        _PENDING.pop()


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _emit(t, g[tuple(sl)])

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            _emit(t, np.take(g, i, axis=axis))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def where(condition: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)

    def backward(g):
        _emit(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        _emit(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), backward)


class Parameter(Tensor):
    """A trainable tensor carrying its AdamW moment estimates."""

    __slots__ = ("m", "v", "step", "decay")

    def __init__(self, data, name: str | None = None, decay: bool = True):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"
