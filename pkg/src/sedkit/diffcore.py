"""Reverse-mode autodiff substrate with optimizers and learning-rate schedules.

Everything trainable in the toolkit runs through the `Tensor` class below:
a float64 numpy array plus a backward closure. Calling ``backward()`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every leaf created with ``requires_grad=True``. Leaves start
with a zero gradient, so parameters that a loss never touches report an
exact zero.

All arithmetic is float64; there is no GPU path and no mixed precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(
            p.requires_grad or p._parents for p in parents
        ):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._node(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._node(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return Tensor._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._node(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._node(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other).__truediv__(self)

    def __neg__(self):
        a = self

        def backward(g):
            return (-g,)

        return Tensor._node(-a.data, (a,), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a, p = self, float(exponent)

        def backward(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._node(a.data**p, (a,), backward)

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeMismatchError("matmul operands must be at least 2-D")

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._node(np.matmul(a.data, b.data), (a, b), backward)

    # -- elementwise -----------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            return (g * out_data,)

        return Tensor._node(out_data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            return (g / a.data,)

        return Tensor._node(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            return (g * 0.5 / out_data,)

        return Tensor._node(out_data, (a,), backward)

    def square(self):
        a = self

        def backward(g):
            return (g * 2.0 * a.data,)

        return Tensor._node(a.data * a.data, (a,), backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._node(out_data, (a,), backward)

    def relu(self):
        a = self

        def backward(g):
            return (g * (a.data > 0.0),)

        return Tensor._node(np.maximum(a.data, 0.0), (a,), backward)

    def sigmoid(self):
        a = self
        out_data = _sigmoid(a.data)

        def backward(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._node(out_data, (a,), backward)

    def abs(self):
        a = self

        def backward(g):
            return (g * np.sign(a.data),)

        return Tensor._node(np.abs(a.data), (a,), backward)

    # -- reductions and shape --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a.shape).copy(),)

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        if axis is None:
            count = a.data.size
        else:
            count = a.data.shape[axis]

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g / count, a.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp / count, a.shape).copy(),)

        return Tensor._node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            return (g.reshape(a.shape),)

        return Tensor._node(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))

        def backward(g):
            return (g.transpose(inverse),)

        return Tensor._node(a.data.transpose(axes), (a,), backward)

    def __getitem__(self, key):
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            out[key] = g
            return (out,)

        return Tensor._node(a.data[key], (a,), backward)

    # -- backward pass ---------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- free functions on tensors -------------------------------------------


def concat(tensors, axis: int = -1) -> Tensor:
    parts = [Tensor._coerce(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    data = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor._node(data, tuple(parts), backward)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]`` for integer index arrays (embeddings)."""
    a = Tensor._coerce(table)
    idx = np.asarray(indices)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, a.data.shape[-1]))
        return (out,)

    return Tensor._node(a.data[idx], (a,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = Tensor._coerce(x)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._node(out_data, (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of ``softmax(logits)`` against integer targets.

    `logits` is (N, C); `targets` is an int array of shape (N,). Returns the
    per-row loss vector (N,).
    """
    a = Tensor._coerce(logits)
    t = np.asarray(targets, dtype=np.intp)
    if a.data.ndim != 2 or t.shape != (a.data.shape[0],):
        raise ShapeMismatchError("expected logits (N, C) and targets (N,)")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + a.data.max(axis=1)
    losses = lse - a.data[np.arange(t.size), t]
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def backward(g):
        grad = probs * g[:, None]
        grad[np.arange(t.size), t] -= g
        return (grad,)

    return Tensor._node(losses, (a,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Numerically stable per-element binary cross entropy on raw logits."""
    a = Tensor._coerce(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != a.data.shape:
        raise ShapeMismatchError("labels must match logits shape")
    x = a.data
    losses = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * (_sigmoid(x) - y),)

    return Tensor._node(losses, (a,), backward)


# -- optimizers ----------------------------------------------------------


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeMismatchError("gradient shape differs from parameter")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**t)
            v_hat = self.v[i] / (1.0 - self.beta2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSProp:
    """RMSProp with a running average of squared gradients."""

    def __init__(self, params, rho: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.step_count = 0
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeMismatchError("gradient shape differs from parameter")
            self.v[i] = self.rho * self.v[i] + (1.0 - self.rho) * g * g
            p.data = p.data - lr * g / (np.sqrt(self.v[i]) + self.eps)


# -- learning-rate schedules ---------------------------------------------


@dataclass(frozen=True)
class WarmupThenConstant:
    """Linear ramp from 0 to `peak_lr` over `warmup_fraction` of the run,
    held at `peak_lr` afterwards."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.1

    def lr(self, step: int) -> float:
        warmup_steps = self.warmup_fraction * self.total_steps
        if warmup_steps <= 0 or step >= warmup_steps:
            return self.peak_lr
        return self.peak_lr * step / warmup_steps


@dataclass(frozen=True)
class LinearDecay:
    """Linear interpolation from `start_lr` at step 0 to `end_lr` at
    `total_steps`; clamped to `end_lr` beyond."""

    start_lr: float
    end_lr: float
    total_steps: int

    def lr(self, step: int) -> float:
        if step >= self.total_steps:
            return self.end_lr
        frac = step / self.total_steps
        return self.start_lr + (self.end_lr - self.start_lr) * frac


def finite_step_count(n_examples: int, batch_size: int, epochs: int = 1) -> int:
    """Number of optimizer steps for `epochs` passes over `n_examples`."""
    return epochs * math.ceil(n_examples / batch_size)
