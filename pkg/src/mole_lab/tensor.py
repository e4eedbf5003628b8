"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Tensors are immutable values; each forward pass builds a fresh graph of
backward closures (the tape), consumed by a single ``backward()`` call.
Parameters live in a :class:`ParamStore`, which hands out leaf tensors per
step and harvests their gradients afterwards.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamStore",
    "matmul",
    "softmax",
    "layer_norm",
    "attention",
    "gelu",
    "gather_last",
    "concat_tokens",
    "slice_tokens",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 3:
        raise ShapeError(f"tensors support at most 3 axes, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense real array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        self.data = _as_array(data)
        if check and not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite values in tensor construction")
        self.data.flags.writeable = False
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every graph leaf."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # graph is single-use; free intermediates
                node._backward = None
                node._parents = ()

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- reductions / reshapes -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, check=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise primitives --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * out_data))

    return _make(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, so finite differences apply."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


# -- reductions and reshapes -------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        denom = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        denom = 1
        for ax in axes:
            denom *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose_last2(a: Tensor) -> Tensor:
    out_data = a.data.swapaxes(-1, -2)

    def backward(g):
        a._accumulate(g.swapaxes(-1, -2))

    return _make(out_data, (a,), backward)


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two B×L×D tensors along the token axis."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError("concat_tokens expects rank-3 operands")
    out_data = np.concatenate([a.data, b.data], axis=1)
    split = a.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :split, :])
        if b.requires_grad:
            b._accumulate(g[:, split:, :])

    return _make(out_data, (a, b), backward)


def slice_tokens(a: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    """Slice a B×L×D tensor along the token axis, keeping the gradient path."""
    if a.ndim != 3:
        raise ShapeError("slice_tokens expects a rank-3 operand")
    out_data = a.data[:, start:stop, :]

    def backward(g):
        full = np.zeros(a.shape)
        full[:, start:stop, :] = g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast (batched variant)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _make(out_data, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(square(centered), axis=-1, keepdims=True)
    x_hat = centered / sqrt(var + eps)
    return x_hat * gamma + beta


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(QK^T/sqrt(D)) V."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    if k.shape[-2] == 0:
        raise ShapeError("attention needs at least one key")
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def gather_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the last axis; ``indices`` has the same leading shape."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather leading dims disagree: {a.shape} vs {idx.shape}")
    out_data = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        full = np.zeros(a.shape)
        flat = full.reshape(-1, a.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, idx.reshape(rows.shape[0], -1)), g.reshape(rows.shape[0], -1))
        a._accumulate(full)

    return _make(out_data, (a,), backward)


# -- parameters --------------------------------------------------------


class _Param:
    __slots__ = ("data", "frozen")

    def __init__(self, data: np.ndarray, frozen: bool):
        self.data = data
        self.frozen = frozen


class ParamStore:
    """Named parameter arrays with per-step leaf tensors and gradients."""

    def __init__(self):
        self._params: dict[str, _Param] = {}
        self._live: dict[str, Tensor] = {}

    def add(self, name: str, data, frozen: bool = False) -> None:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        self._params[name] = _Param(_as_array(data).copy(), frozen)

    def names(self) -> list[str]:
        return sorted(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if not self._params[n].frozen]

    def is_frozen(self, name: str) -> bool:
        return self._params[name].frozen

    def value(self, name: str) -> np.ndarray:
        return self._params[name].data

    def set(self, name: str, data) -> None:
        p = self._params[name]
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.copy()

    def leaf(self, name: str) -> Tensor:
        """Leaf tensor for the current step; reuses one node per parameter."""
        if name not in self._live:
            p = self._params[name]
            self._live[name] = Tensor(p.data, requires_grad=not p.frozen, check=False)
        return self._live[name]

    def begin_step(self) -> None:
        self._live = {}

    def grad(self, name: str) -> np.ndarray:
        """Accumulated gradient for this step; frozen params report zeros."""
        p = self._params[name]
        live = self._live.get(name)
        if p.frozen or live is None or live.grad is None:
            return np.zeros_like(p.data)
        return live.grad

    def n_scalars(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return sum(self._params[n].data.size for n in names)


def grad_check(f, store: ParamStore, eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare reverse-mode gradients of ``f(store)`` to central differences.

    ``f`` must run a fresh forward pass pulling leaves from ``store``.
    Returns a report with per-parameter and overall max relative error.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    store.begin_step()
    loss = f(store)
    if not np.isfinite(loss.data).all():
        raise ValueError("non-finite loss in grad_check")
    loss.backward()
    analytic = {n: store.grad(n).copy() for n in store.names()}

    per_param: dict[str, float] = {}
    worst = 0.0
    for name in store.trainable_names():
        base = store.value(name).copy()
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            store.set(name, base)
            store.begin_step()
            up = f(store).item()
            flat[i] = orig - eps
            store.set(name, base)
            store.begin_step()
            down = f(store).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * eps)
        store.set(name, base)
        denom = np.maximum(np.abs(analytic[name]) + np.abs(num), 1e-8)
        rel = float(np.max(np.abs(analytic[name] - num) / denom))
        per_param[name] = rel
        worst = max(worst, rel)
    store.begin_step()
    return {
        "max_rel_error": worst,
        "per_param": per_param,
        "passed": worst < tol,
        "analytic": analytic,
    }
