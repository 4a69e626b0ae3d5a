"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray together with the recipe that produced
it.  Operations build a DAG on the fly; :meth:`Tensor.backward` walks that
DAG once in reverse topological order and accumulates vector-Jacobian
products into ``.grad`` of every tensor that requires gradients.

Only tensors with ``requires_grad=True`` (or with such ancestors) are part
of the recorded graph, so constants are free.  Dtypes follow numpy
promotion rules; gradients always match the dtype of the tensor they
belong to.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    # Defer numpy binary operators to our reflected methods, so
    # `ndarray + Tensor` builds a graph node instead of an object array.
    __array_ufunc__ = None

    __slots__ = ("values", "grad", "requires_grad", "parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], Sequence[Array | None]] | None = None

    @staticmethod
    def _from_op(values: Array, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = parents
            out._vjp = vjp
        else:
            out.parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into ``.grad`` of every ancestor.

        ``self`` must be scalar-shaped; the seed gradient is one.  Each node
        in the reachable graph is processed exactly once.
        """
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topological_order(self)
        pending: dict[int, Array] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            grad = pending.pop(id(node))
            node.grad = grad if node.grad is None else node.grad + grad
            if node._vjp is None:
                continue
            parent_grads = node._vjp(grad)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # Operator sugar.  Arithmetic accepts plain arrays and scalars.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children order of the requires_grad subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, child_idx = stack.pop()
        parents = node.parents
        while child_idx < len(parents) and (
            id(parents[child_idx]) in seen or not parents[child_idx].requires_grad
        ):
            child_idx += 1
        if child_idx < len(parents):
            stack.append((node, child_idx + 1))
            child = parents[child_idx]
            seen.add(id(child))
            stack.append((child, 0))
        else:
            order.append(node)
    return order


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _cast_like(grad: Array, ref: Array) -> Array:
    return grad if grad.dtype == ref.dtype else grad.astype(ref.dtype)


def _as_scalar(x) -> float | None:
    """Python scalars stay raw so numpy's weak promotion keeps dtypes."""
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    return None


def add(a, b) -> Tensor:
    sb, sa = _as_scalar(b), _as_scalar(a)
    if sb is not None:
        a = as_tensor(a)
        return Tensor._from_op(a.values + sb, (a,), lambda g: (g,))
    if sa is not None:
        b = as_tensor(b)
        return Tensor._from_op(sa + b.values, (b,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    values = a.values + b.values

    def vjp(g: Array):
        ga = _cast_like(_unbroadcast(g, a.shape), a.values) if a.requires_grad else None
        gb = _cast_like(_unbroadcast(g, b.shape), b.values) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(values, (a, b), vjp)


def subtract(a, b) -> Tensor:
    sb, sa = _as_scalar(b), _as_scalar(a)
    if sb is not None:
        a = as_tensor(a)
        return Tensor._from_op(a.values - sb, (a,), lambda g: (g,))
    if sa is not None:
        b = as_tensor(b)
        return Tensor._from_op(sa - b.values, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    values = a.values - b.values

    def vjp(g: Array):
        ga = _cast_like(_unbroadcast(g, a.shape), a.values) if a.requires_grad else None
        gb = _cast_like(_unbroadcast(-g, b.shape), b.values) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(values, (a, b), vjp)


def negative(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.values, (a,), lambda g: (-g,))


def multiply(a, b) -> Tensor:
    sb, sa = _as_scalar(b), _as_scalar(a)
    if sb is None and sa is not None:
        a, b, sb = b, a, sa
    if sb is not None:
        a = as_tensor(a)
        return Tensor._from_op(a.values * sb, (a,), lambda g: (g * sb,))
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def vjp(g: Array):
        ga = _cast_like(_unbroadcast(g * b.values, a.shape), a.values) if a.requires_grad else None
        gb = _cast_like(_unbroadcast(g * a.values, b.shape), b.values) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(values, (a, b), vjp)


def divide(a, b) -> Tensor:
    sb = _as_scalar(b)
    if sb is not None:
        return multiply(a, 1.0 / sb)
    sa = _as_scalar(a)
    if sa is not None:
        b = as_tensor(b)
        values = sa / b.values

        def vjp_s(g: Array):
            return (_cast_like(_unbroadcast(-g * values / b.values, b.shape), b.values),)

        return Tensor._from_op(values, (b,), vjp_s)
    a, b = as_tensor(a), as_tensor(b)
    values = a.values / b.values

    def vjp(g: Array):
        ga = _cast_like(_unbroadcast(g / b.values, a.shape), a.values) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _cast_like(_unbroadcast(-g * values / b.values, b.shape), b.values)
        return ga, gb

    return Tensor._from_op(values, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product of stacks of 2-d arrays (no 1-d operands)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    values = a.values @ b.values

    def vjp(g: Array):
        ga = gb = None
        if a.requires_grad:
            ga = _cast_like(_unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape), a.values)
        if b.requires_grad:
            gb = _cast_like(_unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape), b.values)
        return ga, gb

    return Tensor._from_op(values, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b for 2-d x, one graph node instead of two."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError("linear expects x (n,i), w (i,o), b (o,)")
    values = x.values @ w.values
    values += b.values

    def vjp(g: Array):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _cast_like(g @ w.values.T, x.values)
        if w.requires_grad:
            gw = _cast_like(x.values.T @ g, w.values)
        if b.requires_grad:
            gb = _cast_like(g.sum(axis=0), b.values)
        return gx, gw, gb

    return Tensor._from_op(values, (x, w, b), vjp)


def _restore_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False, dtype=None) -> Tensor:
    """Sum with optional accumulation dtype (e.g. float64 from float32)."""
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims, dtype=dtype)

    def vjp(g: Array):
        return (_cast_like(_restore_reduced(g, a.shape, axis, keepdims), a.values),)

    return Tensor._from_op(np.asarray(values), (a,), vjp)


def tensor_mean(a, axis=None, keepdims: bool = False, dtype=None) -> Tensor:
    a = as_tensor(a)
    values = a.values.mean(axis=axis, keepdims=keepdims, dtype=dtype)
    count = a.values.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g: Array):
        return (_cast_like(_restore_reduced(g, a.shape, axis, keepdims) / count, a.values),)

    return Tensor._from_op(np.asarray(values), (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    values = np.maximum(a.values, 0)

    def vjp(g: Array):
        return (g * (a.values > 0),)

    return Tensor._from_op(values, (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    a = as_tensor(a)
    values = np.logaddexp(np.zeros((), dtype=a.dtype), a.values)

    def vjp(g: Array):
        return (g * _sigmoid_values(a.values),)

    return Tensor._from_op(values, (a,), vjp)


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    values = _sigmoid_values(a.values)

    def vjp(g: Array):
        return (g * values * (1.0 - values),)

    return Tensor._from_op(values, (a,), vjp)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),))


def positional_encode(a, num_frequencies: int) -> Tensor:
    """Fused octave features [x, sin(2^l pi x), cos(2^l pi x)] per level.

    Output layout along the last axis matches concatenating the identity
    block then per-level sin/cos blocks.  The backward pass reuses the
    trig values stored in the forward output.
    """
    a = as_tensor(a)
    d = a.shape[-1]
    scales = [math.pi * (2.0 ** level) for level in range(num_frequencies)]
    values = np.empty(a.shape[:-1] + (d * (1 + 2 * num_frequencies),), dtype=a.dtype)
    values[..., :d] = a.values
    for level, s in enumerate(scales):
        scaled = a.values * s
        lo = d * (1 + 2 * level)
        np.sin(scaled, out=values[..., lo:lo + d])
        np.cos(scaled, out=values[..., lo + d:lo + 2 * d])

    def vjp(g: Array):
        gx = g[..., :d].copy()
        for level, s in enumerate(scales):
            lo = d * (1 + 2 * level)
            sin_block = values[..., lo:lo + d]
            cos_block = values[..., lo + d:lo + 2 * d]
            gx += s * (cos_block * g[..., lo:lo + d] -
                       sin_block * g[..., lo + d:lo + 2 * d])
        return (_cast_like(gx, a.values),)

    return Tensor._from_op(values, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    values = np.exp(a.values)
    return Tensor._from_op(values, (a,), lambda g: (g * values,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise ValueError("log requires strictly positive input")
    return Tensor._from_op(np.log(a.values), (a,), lambda g: (g / a.values,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise ValueError("sqrt requires non-negative input")
    values = np.sqrt(a.values)
    return Tensor._from_op(values, (a,), lambda g: (g / (2.0 * values),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.square(a.values), (a,), lambda g: (g * 2.0 * a.values,))


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    a = as_tensor(a)
    return Tensor._from_op(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where input lies inside."""
    a = as_tensor(a)
    values = np.clip(a.values, lo, hi)

    def vjp(g: Array):
        inside = (a.values >= lo) & (a.values <= hi)
        return (g * inside,)

    return Tensor._from_op(values, (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(
            _cast_like(piece, p.values) if p.requires_grad else None
            for piece, p in zip(pieces, parts)
        )

    return Tensor._from_op(values, parts, vjp)


def take(a, index) -> Tensor:
    """Indexing/slicing; gradient scatter-adds (repeated indices accumulate)."""
    a = as_tensor(a)
    values = a.values[index]

    def vjp(g: Array):
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(values, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape
    return Tensor._from_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(old_shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def astype(a, dtype) -> Tensor:
    """Dtype boundary op; the gradient is cast back on the way down."""
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return Tensor._from_op(a.values.astype(dtype), (a,), lambda g: (g.astype(a.values.dtype),))


def cumprod_exclusive(a, axis: int = -1) -> Tensor:
    """Exclusive running product along ``axis``.

    out[..., k] = prod(x[..., :k]), so out[..., 0] == 1.  The backward pass
    handles zero entries exactly: only the first zero along a lane receives
    a non-zero gradient, computed from the product with that zero replaced
    by one (later zeros annihilate every downstream term).
    """
    a = as_tensor(a)
    axis = axis % max(a.ndim, 1)
    x = np.moveaxis(a.values, axis, -1)
    y = _exclusive_cumprod_values(x)

    def vjp(g: Array):
        gm = np.moveaxis(g, axis, -1)
        grad = _strict_reverse_cumsum(gm * y)
        zero = x == 0
        lanes = zero.any(axis=-1)
        if np.any(lanes):
            grad = grad.copy()
            xz = x[lanes]
            first = np.argmax(xz == 0, axis=-1)
            rows = np.arange(xz.shape[0])
            patched = xz.copy()
            patched[rows, first] = 1.0
            y2 = _exclusive_cumprod_values(patched)
            s2 = _strict_reverse_cumsum(gm[lanes] * y2)
            sub = np.zeros_like(xz)
            sub[rows, first] = s2[rows, first]
            safe = np.where(zero[lanes], 1.0, xz)
            sub = np.where(zero[lanes], sub, grad[lanes] / safe)
            grad[lanes] = sub
            grad[~lanes] = grad[~lanes] / x[~lanes]
        else:
            grad = grad / x
        return (_cast_like(np.moveaxis(grad, -1, axis), a.values),)

    return Tensor._from_op(np.moveaxis(y, -1, axis), (a,), vjp)


def _exclusive_cumprod_values(x: Array) -> Array:
    y = np.cumprod(x, axis=-1)
    out = np.empty_like(y)
    out[..., 0] = 1.0
    out[..., 1:] = y[..., :-1]
    return out


def _strict_reverse_cumsum(x: Array) -> Array:
    """out[..., j] = sum of x[..., j+1:]."""
    c = np.cumsum(x[..., ::-1], axis=-1)[..., ::-1]
    out = np.empty_like(c)
    out[..., -1] = 0.0
    out[..., :-1] = c[..., 1:]
    return out


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        scale = self.lr * math.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.values -= (scale * m / (np.sqrt(v) + self.eps)).astype(p.values.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
