"""Dense tensors with reverse-mode autodiff, backed by numpy.

Values are float32 by default; pointwise reductions (sums, means,
log-sum-exp, norms) accumulate in float64 before casting back, while
matmul runs in the operands' native precision for speed. `default_dtype`
switches the whole engine to float64, which is what gradient checks use.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_MATMUL_FLOPS = 0  # running count, 2*m*n*p per matmul (batched included)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values only."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def reset_matmul_flops() -> None:
    global _MATMUL_FLOPS
    _MATMUL_FLOPS = 0


def matmul_flops() -> int:
    """Matmul FLOPs (2 per multiply-add) executed since the last reset."""
    return _MATMUL_FLOPS


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in the operands' native precision, counted into the FLOP meter."""
    global _MATMUL_FLOPS
    out = np.matmul(a, b)
    _MATMUL_FLOPS += 2 * out.size * a.shape[-1]
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A numpy array plus the graph metadata needed for backward().

    `_parents` and `_backward` form the computation graph: a tensor made by
    an op keeps references to its inputs and a closure that pushes its
    `grad` into theirs. Tensors created from raw data (or by
    `stop_gradient`) have no parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op=""):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw data, not another Tensor")
        if not isinstance(data, np.ndarray) or data.dtype not in (np.float32, np.float64):
            data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op

    # ------------------------------------------------------------------ info

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------- graph glue

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @staticmethod
    def _result(data, parents, op, backward):
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs)
        if needs:
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
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
                if id(p) not in visited and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- op helpers

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), "+", backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), "neg", backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), "*", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), "/", backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * n * a.data ** (n - 1))

        return Tensor._result(a.data**n, (a,), "pow", backward)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), "exp", backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), "log", backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (a,), "tanh", backward)

    # ----------------------------------------------------------------- matmul

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------ shape moves

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(a.data.reshape(shape), (a,), "reshape", backward)

    def transpose(self, axes):
        a = self
        inv = tuple(np.argsort(axes))

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), "transpose", backward)

    def swap_last(self):
        """Swap the final two axes (matrix transpose over batch dims)."""
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.transpose(axes)

    def __getitem__(self, key):
        a = self

        def backward(g):
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accumulate(buf)

        return Tensor._result(a.data[key].copy(), (a,), "slice", backward)

    # -------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims)
        out_data = out_data.astype(a.dtype, copy=False)

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

        return Tensor._result(out_data, (a,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; gradients flow to both operands."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad or a._parents:
            ga = _mm(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad or b._parents:
            gb = _mm(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape).astype(b.dtype, copy=False))

    return Tensor._result(_mm(a.data, b.data), (a, b), "matmul", backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise IndexError(f"ids out of range [0, {table.shape[0]})")

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        table._accumulate(buf)

    return Tensor._result(table.data[ids], (table,), "embedding", backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from the graph; no gradient reaches x."""
    out = Tensor(x.data, requires_grad=False)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return Tensor._result(out_data, (x,), "silu", backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x._accumulate(g * d.astype(x.dtype, copy=False))

    return Tensor._result(out_data, (x,), "gelu", backward)


def rmsnorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) over the last dimension, no affine."""
    if x.shape[-1] < 1:
        raise ValueError("rmsnorm needs a non-empty last dimension")
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    r = (1.0 / np.sqrt(ms + eps)).astype(x.dtype, copy=False)
    out_data = x.data * r

    def backward(g):
        # dx = r*g - x * r^3/d * sum(g*x)
        dot = np.sum((g * x.data).astype(np.float64, copy=False), axis=-1, keepdims=True)
        dx = r * g - x.data * (r**3 / d) * dot.astype(x.dtype, copy=False)
        x._accumulate(dx)

    return Tensor._result(out_data, (x,), "rmsnorm", backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last dimension, max-shifted."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=-1, dtype=np.float64, keepdims=True)
    p = (e / s).astype(x.dtype, copy=False)

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        x._accumulate(p * (g - dot))

    return Tensor._result(p, (x,), "softmax", backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """log softmax over the last dimension via log-sum-exp."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp((x.data - m).astype(np.float64, copy=False))
    lse = m + np.log(np.sum(e, axis=-1, keepdims=True)).astype(x.dtype, copy=False)
    out_data = x.data - lse
    p = np.exp(out_data)

    def backward(g):
        dot = np.sum(g, axis=-1, keepdims=True)
        x._accumulate(g - p * dot)

    return Tensor._result(out_data, (x,), "log_softmax", backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over all positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    v = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target ids out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    n = flat.shape[0]
    m = np.max(flat, axis=-1, keepdims=True)
    e = np.exp((flat - m).astype(np.float64, copy=False))
    lse = m.astype(np.float64, copy=False) + np.log(np.sum(e, axis=-1, keepdims=True))
    nll = lse[:, 0] - flat[np.arange(n), t].astype(np.float64, copy=False)
    loss = np.asarray(nll.mean(), dtype=logits.dtype)
    p = (e / np.sum(e, axis=-1, keepdims=True)).astype(logits.dtype, copy=False)

    def backward(g):
        d = p * (g / n)
        d[np.arange(n), t] -= g / n
        logits._accumulate(d.reshape(logits.shape))

    return Tensor._result(loss, (logits,), "cross_entropy", backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise ValueError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    loss = np.asarray(np.sum(np.square(diff, dtype=np.float64)) / n, dtype=a.dtype)

    def backward(g):
        d = (2.0 / n) * diff * g
        if a.requires_grad or a._parents:
            a._accumulate(d.astype(a.dtype, copy=False))
        if b.requires_grad or b._parents:
            b._accumulate(-d.astype(b.dtype, copy=False))

    return Tensor._result(loss, (a, b), "mse", backward)
