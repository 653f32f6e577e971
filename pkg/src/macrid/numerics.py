"""Dense tensors with reverse-mode gradients, plus the Adam optimizer.

Values are stored as 32-bit floats by default; explicit reductions
accumulate at 64 bits. Every public operation verifies its output is
finite and raises :class:`NumericError` naming the failing node.
A 64-bit graph (``dtype=np.float64``) is used by the finite-difference
gradient oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError

EPS_DIV = 1e-8


def stable_divide(x, denom):
    """x / (denom + 1e-8), finite for denom >= 0."""
    return np.asarray(x) / (np.asarray(denom) + EPS_DIV)


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name="tensor", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _finish(out, parents, backward_fn):
    # A single reduction: NaN/Inf propagate through the sum. Magnitudes big
    # enough to overflow the sum of finite float32 values never occur here.
    if not np.isfinite(out.data.sum()):
        raise NumericError(f"non-finite values produced by node {out.name!r}")
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, name="add")

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, name="sub")

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, name="mul")

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, name="div")

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _finish(out, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, name="scale")

    def backward_fn(g):
        a.accumulate(g * s)

    return _finish(out, (a,), backward_fn)


def shift(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + s, name="shift")

    def backward_fn(g):
        a.accumulate(g)

    return _finish(out, (a,), backward_fn)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, name="matmul")

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _finish(out, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    out = Tensor(a.data.T.copy(), name="transpose")

    def backward_fn(g):
        a.accumulate(g.T)

    return _finish(out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, name="tanh")

    def backward_fn(g):
        a.accumulate(g * (1.0 - y * y))

    return _finish(out, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, name="exp")

    def backward_fn(g):
        a.accumulate(g * y)

    return _finish(out, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), name="log")

    def backward_fn(g):
        a.accumulate(g / a.data)

    return _finish(out, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y, name="sqrt")

    def backward_fn(g):
        a.accumulate(g * 0.5 / y)

    return _finish(out, (a,), backward_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    out = Tensor(y, name="clip")

    def backward_fn(g):
        a.accumulate(g * ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype))

    return _finish(out, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (shift-stabilized)."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, name="softmax")

    def backward_fn(g):
        a.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _finish(out, (a,), backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    y = a.data - lse
    out = Tensor(y, name="log_softmax")

    def backward_fn(g):
        a.accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _finish(out, (a,), backward_fn)


def rownorm(a: Tensor) -> Tensor:
    """L2-normalize the last axis: x / (||x|| + 1e-8)."""
    n = np.sqrt(np.square(a.data).sum(axis=-1, keepdims=True))
    r = 1.0 / (n + EPS_DIV)
    y = a.data * r
    out = Tensor(y, name="rownorm")

    def backward_fn(g):
        gx = (g * a.data).sum(axis=-1, keepdims=True)
        n_safe = np.maximum(n, np.finfo(a.data.dtype).tiny)
        a.accumulate(g * r - a.data * (gx / n_safe) * r * r)

    return _finish(out, (a,), backward_fn)


def sumall(a: Tensor) -> Tensor:
    total = a.data.sum(dtype=np.float64)
    out = Tensor(np.asarray(total, dtype=a.data.dtype), name="sum")

    def backward_fn(g):
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return _finish(out, (a,), backward_fn)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    out = Tensor(y, name="sum_axis")

    def backward_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape))

    return _finish(out, (a,), backward_fn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    return scale(sum_axis(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), name="reshape")

    def backward_fn(g):
        a.accumulate(g.reshape(a.data.shape))

    return _finish(out, (a,), backward_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[..., start:stop].copy(), name="slice")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a.accumulate(full)

    return _finish(out, (a,), backward_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], name="gather")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return _finish(out, (a,), backward_fn)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of a and rows of b."""
    return matmul(rownorm(a), transpose(rownorm(b)))


def dropout_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    """Apply a pre-sampled (inverted) dropout mask; the mask is a constant."""
    return mul(a, Tensor(mask.astype(a.data.dtype, copy=False)))


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Moment accumulators; shapes mirror the parameter dict."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_update(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam step in the descent direction (in place)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.isfinite(g.sum()):
            raise NumericError(f"non-finite gradient for {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state


# ----------------------------------------------------------------------------
# Finite-difference oracle (forward evaluations only; used by tests)


def finite_difference(f, arrays, step=1e-3):
    """Central-difference gradients of ``f()`` w.r.t. each array, in place.

    Arrays should be float64 for oracle-grade accuracy; ``f`` must read them
    afresh on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
