"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough tape for a small transformer encoder and contrastive losses:
broadcast-aware arithmetic, matmul, reductions, indexing/gather, and the
stable-softmax composites.  Everything runs in float64; gradients are exact
(finite differences are used only as a test oracle, never here).
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "relu",
    "exp",
    "log",
    "log_softmax",
    "softmax",
    "logsumexp",
    "layer_norm",
    "l2_normalize",
    "take_rows",
    "dropout",
    "cross_entropy_mean",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
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
    """A numpy array plus the recipe for its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if not _grad_enabled:
            _parents, _backward = (), None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        if not self.requires_grad:
            _parents, _backward = (), None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)

    # ---- arithmetic ----

    def __add__(self, other):
        other = _as_tensor(other)

        def back(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.data.shape))

        return Tensor(self.data + other.data, _parents=(self, other), _backward=back)

    __radd__ = __add__

    def __neg__(self):
        def back(out):
            if self.requires_grad:
                self._accum(-out.grad)

        return Tensor(-self.data, _parents=(self,), _backward=back)

    def __sub__(self, other):
        other = _as_tensor(other)

        def back(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-out.grad, other.data.shape))

        return Tensor(self.data - other.data, _parents=(self, other), _backward=back)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)

        def back(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        return Tensor(self.data * other.data, _parents=(self, other), _backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)

        def back(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-out.grad * self.data / other.data**2, other.data.shape)
                )

        return Tensor(self.data / other.data, _parents=(self, other), _backward=back)

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")

        def back(out):
            if self.requires_grad:
                self._accum(out.grad * exponent * self.data ** (exponent - 1))

        return Tensor(self.data**exponent, _parents=(self,), _backward=back)

    def __matmul__(self, other):
        other = _as_tensor(other)

        def back(out):
            if self.requires_grad:
                g = out.grad @ np.swapaxes(other.data, -1, -2)
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                g = np.swapaxes(self.data, -1, -2) @ out.grad
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(self.data @ other.data, _parents=(self, other), _backward=back)

    # ---- shape ----

    def reshape(self, *shape):
        def back(out):
            if self.requires_grad:
                self._accum(out.grad.reshape(self.data.shape))

        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=back)

    def swapaxes(self, a: int, b: int):
        def back(out):
            if self.requires_grad:
                self._accum(np.swapaxes(out.grad, a, b))

        return Tensor(np.swapaxes(self.data, a, b), _parents=(self,), _backward=back)

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, key):
        def back(out):
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, key, out.grad)
                self._accum(g)

        return Tensor(self.data[key], _parents=(self,), _backward=back)

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        def back(out):
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return Tensor(
            self.data.sum(axis=axis, keepdims=keepdims),
            _parents=(self,),
            _backward=back,
        )

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def relu(x: Tensor) -> Tensor:
    def back(out):
        if x.requires_grad:
            x._accum(out.grad * (x.data > 0))

    return Tensor(np.maximum(x.data, 0.0), _parents=(x,), _backward=back)


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)

    def back(out):
        if x.requires_grad:
            x._accum(out.grad * value)

    return Tensor(value, _parents=(x,), _backward=back)


def log(x: Tensor) -> Tensor:
    def back(out):
        if x.requires_grad:
            x._accum(out.grad / x.data)

    return Tensor(np.log(x.data), _parents=(x,), _backward=back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x - np.max(x.data, axis=axis, keepdims=True)
    return shift - log(exp(shift).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = exp(x - np.max(x.data, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    out = log(exp(x - m).sum(axis=axis, keepdims=True)) + m
    if not keepdims:
        out = out.reshape(tuple(s for i, s in enumerate(out.shape) if i != axis % out.ndim))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-9) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gamma + beta

def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    sq = (x * x).sum(axis=axis, keepdims=True)
    return x * ((sq + eps) ** -0.5)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup): table[(N, D)] indexed by int array ids."""
    ids = np.asarray(ids)

    def back(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[-1]))
            table._accum(g)

    return Tensor(table.data[ids], _parents=(table,), _backward=back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller only invokes this in training mode."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of (K, V) logits; 0.0 for K == 0."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.shape[0] == 0:
        return Tensor(0.0)
    if labels.min() < 0 or labels.max() >= logits.data.shape[-1]:
        raise IndexError("label id outside logit range")
    picked = log_softmax(logits, axis=-1)[np.arange(labels.shape[0]), labels]
    return -picked.mean()
