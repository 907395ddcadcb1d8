"""Dense tensors with taped reverse-mode differentiation.

Every op records a closure on the output tensor that maps the output
gradient to input gradients. ``Tensor.backward`` walks the tape in reverse
topological order and releases it afterwards.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-6
KL_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape --------------------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._make(x / y, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p: float) -> Tensor:
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        shape, dtype = self.shape, self.dtype

        def bw(g):
            out = np.zeros(shape, dtype=dtype)
            if _is_basic_index(idx):
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), bw)

    # -- unary --------------------------------------------------------------
    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> Tensor:
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    # -- reductions and shape ops ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def astype(self, dtype) -> Tensor:
        src = self.dtype
        return Tensor._make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# -- ops ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ y.swapaxes(-1, -2), x.shape)
        if b.requires_grad:
            gb = _unbroadcast(x.swapaxes(-1, -2) @ g, y.shape)
        return ga, gb

    return Tensor._make(x @ y, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last dimension of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"affine parameters must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return Tensor._make(xhat * gd + beta.data, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return Tensor._make(xd * cdf, (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).mean()


def _check_prob(p: np.ndarray, axis: int, what: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValidationError(f"{what} is not a probability vector along axis {axis}")


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, reduction: str = "mean") -> Tensor:
    """KL(p || q) along ``axis``; leading axes are averaged (or summed).

    ``0 * log(0 / q)`` is taken as 0 and ``q`` is clamped below at 1e-12.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl shapes differ: {p.shape} vs {q.shape}")
    _check_prob(p.data, axis, "p")
    _check_prob(q.data, axis, "q")
    pd, qd = p.data, q.data
    qc = np.maximum(qd, KL_CLAMP)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    per = np.where(pos, pd * (logp - np.log(qc)), 0.0).sum(axis=axis)
    n = per.size if reduction == "mean" else 1
    value = per.sum() / n

    def bw(g):
        gp = gq = None
        if p.requires_grad:
            gp = g * np.where(pos, logp - np.log(qc) + 1.0, 0.0) / n
        if q.requires_grad:
            gq = g * np.where(qd > KL_CLAMP, -pd / qc, 0.0) / n
        return gp, gq

    return Tensor._make(np.asarray(value, dtype=pd.dtype), (p, q), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    flat = lp.reshape(-1, logits.shape[-1])
    picked = flat[np.arange(flat.shape[0]), labels.reshape(-1)]
    return -picked.mean()


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along axis 0 for an integer index array of any shape."""
    return table[np.asarray(index)]


# -- finite differences --------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = old - h
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

