"""Dense tensors with tape-free reverse-mode differentiation.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  ``backward`` walks the
graph in reverse topological order and releases the closures afterwards, so a
graph lives for exactly one forward/backward pass.

Broadcasting is deliberately narrow: an operand may be a scalar or match the
*trailing* dimensions of the other operand (e.g. a bias ``[out]`` added to a
batch ``[B, out]``).  Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64

_DEBUG = False


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN/Inf while debug checks were enabled."""


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions after every primitive."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'!r})"

    def __len__(self) -> int:
        return len(self.data)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from primitive {op!r}")
    rg = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = rg
    out._parents = tuple(parents) if rg else ()
    out._backward = None
    out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
    else:
        t.grad += g


# ------------------------------------------------------------- broadcasting
def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"cannot broadcast shapes {a} and {b} (scalar or trailing-dim only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ------------------------------------------------------------ binary ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    """2-D product ``[m, k] @ [k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        out._backward = _bw
    return out


def linear(x, w, b=None) -> Tensor:
    """Fused ``x @ w + b``; one graph node instead of two."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    data = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]}")
        data += b.data
        parents.append(b)
    out = _make(data, parents, "linear")
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                _accumulate(x, g @ w.data.T)
            if w.requires_grad:
                _accumulate(w, x.data.T @ g)
            if b is not None and b.requires_grad:
                _accumulate(b, g.sum(axis=0))
        out._backward = _bw
    return out


# ------------------------------------------------------------- unary ops
def _unary(x, value: np.ndarray, local: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    """Elementwise op whose local derivative is ``local(out_value)``."""
    out = _make(value, (x,), op)
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, g * local(value))
        out._backward = _bw
    return out


def neg(x) -> Tensor:
    x = as_tensor(x)
    out = _make(-x.data, (x,), "neg")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, -g)
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.exp(x.data), lambda v: v, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.data)
    if _DEBUG and np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    out = _make(val, (x,), "log")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, g / xd)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.tanh(x.data), lambda v: 1.0 - v * v, "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, special.expit(x.data), lambda v: v * (1.0 - v), "sigmoid")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = _make(xd * xd, (x,), "square")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, 2.0 * xd * g)
    return out


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.sqrt(x.data), lambda v: 0.5 / v, "sqrt")


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = _make(special.erf(xd), (x,), "erf")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, g * _TWO_OVER_SQRT_PI * np.exp(-xd * xd))
    return out


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` without overflow for large ``|x|``."""
    x = as_tensor(x)
    xd = x.data
    val = np.logaddexp(0.0, xd)
    out = _make(val, (x,), "softplus")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, g * special.expit(xd))
    return out


def elu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    neg_part = np.expm1(np.minimum(xd, 0.0))
    val = np.where(xd > 0, xd, neg_part)
    out = _make(val, (x,), "elu")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, g * np.where(xd > 0, 1.0, neg_part + 1.0))
    return out


# ---------------------------------------------------------- shape ops
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = _make(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, g.reshape(old))
    return out


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = _make(x.data[idx], (x,), "getitem")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros(x.shape, dtype=DTYPE)
            np.add.at(full, idx, g) if _has_advanced(idx) else full.__setitem__(idx, g)
            _accumulate(x, full)
        out._backward = _bw
    return out


def _has_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    out = _make(data, ts, "concat")
    if out.requires_grad:
        sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
        def _bw(g):
            for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
                _accumulate(t, piece)
        out._backward = _bw
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in ts], axis=axis), ts, "stack")
    if out.requires_grad:
        def _bw(g):
            for i, t in enumerate(ts):
                _accumulate(t, np.take(g, i, axis=axis))
        out._backward = _bw
    return out


# ---------------------------------------------------------- reductions
def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        if x.size == 0:
            raise DimensionError("reduction over an empty tensor")
        return
    ax = axis if axis >= 0 else axis + x.ndim
    if not 0 <= ax < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[ax] == 0:
        raise DimensionError("reduction over an empty axis")


def _expand(g: np.ndarray, x: Tensor, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    out = _make(np.asarray(x.data.sum(axis=axis)), (x,), "sum")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, _expand(g, x, axis))
    return out


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    out = _make(np.asarray(x.data.mean(axis=axis)), (x,), "mean")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(x, _expand(g / n, x, axis))
    return out


def reduce_max(x, axis=None) -> Tensor:
    """Max reduction; the subgradient goes to the first maximal element."""
    x = as_tensor(x)
    _check_axis(x, axis)
    if axis is None:
        flat = int(np.argmax(x.data))
        out = _make(np.asarray(x.data.reshape(-1)[flat]), (x,), "max")
        if out.requires_grad:
            def _bw(g):
                full = np.zeros(x.size, dtype=DTYPE)
                full[flat] = g
                _accumulate(x, full.reshape(x.shape))
            out._backward = _bw
        return out
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    val = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    out = _make(np.asarray(val), (x,), "max")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros(x.shape, dtype=DTYPE)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            _accumulate(x, full)
        out._backward = _bw
    return out


def custom(data: np.ndarray, parents: Sequence[Tensor], grad_fns: Sequence[Callable | None], op: str) -> Tensor:
    """Register an op with user-provided vector-Jacobian products.

    ``grad_fns[i](g)`` must return the gradient contribution for ``parents[i]``.
    """
    parents = [as_tensor(p) for p in parents]
    out = _make(np.asarray(data, dtype=DTYPE), parents, op)
    if out.requires_grad:
        def _bw(g):
            for p, fn in zip(parents, grad_fns):
                if fn is not None and p.requires_grad:
                    _accumulate(p, fn(g))
        out._backward = _bw
    return out


# ------------------------------------------------------------ backward
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Reverse-accumulate gradients of a scalar ``loss`` into its leaves.

    Leaf ``grad`` fields accumulate across calls until :func:`zero_grad`.
    Intermediate gradients and closures are dropped afterwards.
    """
    if loss.size != 1 and grad is None:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    seed = np.ones(loss.shape, dtype=DTYPE) if grad is None else np.asarray(grad, dtype=DTYPE)
    loss.grad = seed if loss.grad is None or loss._backward is not None else loss.grad + seed
    for node in reversed(order):
        fn = node._backward
        if fn is None:
            continue
        g = node.grad
        if g is not None:
            fn(g)
            if _DEBUG:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(f"non-finite gradient flowing out of {node.op!r}")
        # free intermediates: only leaves keep their gradients
        node.grad = None
        node._backward = None
        node._parents = ()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g
