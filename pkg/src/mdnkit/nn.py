"""Backbone building blocks: GeLU, dense stacks and a gated recurrent cell."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from . import diffcore as dc
from . import kernels
from .diffcore import DimensionError, Tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class ParamStore(OrderedDict):
    """Named trainable tensors, in a stable insertion order."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.items())

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    @classmethod
    def from_arrays(cls, arrays) -> "ParamStore":
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "lecun_normal"
    seed: int = 0


def gelu(x) -> Tensor:
    """Exact GeLU ``0.5 x (1 + erf(x / sqrt 2))`` as a single graph node."""
    x = dc.as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    val, cdf = kernels.gelu_fwd(xd.reshape(-1))
    out = dc._make(val.reshape(xd.shape), (x,), "gelu")
    if out.requires_grad:
        def _bw(g):
            gx = kernels.gelu_bwd(xd.reshape(-1), cdf, np.ascontiguousarray(g).reshape(-1))
            dc._accumulate(x, gx.reshape(xd.shape))
        out._backward = _bw
    return out


def gelu_composed(x) -> Tensor:
    """GeLU from primitive ops; slower, used to cross-check :func:`gelu`."""
    x = dc.as_tensor(x)
    return 0.5 * x * (1.0 + dc.erf(x * _INV_SQRT2))


# ------------------------------------------------------------------ dense
def dense_layer_params(prefix: str, fan_in: int, fan_out: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.w", (fan_in, fan_out)), (f"{prefix}.b", (fan_out,))]


def mlp_shapes(widths: list[int], prefix: str = "mlp") -> list[tuple[str, tuple]]:
    shapes = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes += dense_layer_params(f"{prefix}.{i}", a, b)
    return shapes


def mlp_forward(params, x, widths: list[int], prefix: str = "mlp") -> Tensor:
    """Affine layers with GeLU between them and identity after the last."""
    x = dc.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != widths[0]:
        raise DimensionError(f"input shape {x.shape} does not match width {widths[0]}")
    n = len(widths) - 1
    h = x
    for i in range(n):
        h = dc.linear(h, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < n - 1:
            h = gelu(h)
    return h


# ------------------------------------------------------------------- GRU
def gru_shapes(d_in: int, hidden: int, prefix: str = "gru") -> list[tuple[str, tuple]]:
    """Input weights carry no bias except on the candidate branch; the hidden
    projection of every gate is biased.  3(H d_in + H^2) + 4H parameters."""
    return [
        (f"{prefix}.wi", (d_in, 3 * hidden)),
        (f"{prefix}.wh", (hidden, 3 * hidden)),
        (f"{prefix}.bh", (3 * hidden,)),
        (f"{prefix}.bi_n", (hidden,)),
    ]


def gru_step(params, x_t, h, prefix: str = "gru") -> Tensor:
    """One GRU update built from primitives.

    ``r = s(x W_ir + h W_hr + b_hr)``, ``z = s(x W_iz + h W_hz + b_hz)``,
    ``n = tanh(x W_in + b_in + r * (h W_hn + b_hn))``,
    ``h' = (1 - z) * h + z * n``.
    """
    wi, wh, bh, bin_ = (params[f"{prefix}.{k}"] for k in ("wi", "wh", "bh", "bi_n"))
    x_t, h = dc.as_tensor(x_t), dc.as_tensor(h)
    H = wh.shape[0]
    if x_t.ndim != 2 or x_t.shape[1] != wi.shape[0] or h.shape != (x_t.shape[0], H):
        raise DimensionError(f"gru_step shapes x={x_t.shape}, h={h.shape} vs cell ({wi.shape[0]}, {H})")
    gi = dc.matmul(x_t, wi)
    gh = dc.linear(h, wh, bh)
    r = dc.sigmoid(gi[:, :H] + gh[:, :H])
    z = dc.sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    n = dc.tanh(gi[:, 2 * H:] + bin_ + r * gh[:, 2 * H:])
    return (1.0 - z) * h + z * n


def gru_sequence(params, xs, h0, prefix: str = "gru") -> Tensor:
    """Run the cell over ``xs[T, B, d_in]`` as one fused graph node.

    Returns the hidden states after every step, shape ``[T, B, H]``.  Forward
    and backprop-through-time go through :mod:`mdnkit.kernels`.
    """
    wi, wh, bh, bin_ = (params[f"{prefix}.{k}"] for k in ("wi", "wh", "bh", "bi_n"))
    xs, h0 = dc.as_tensor(xs), dc.as_tensor(h0)
    T, B, din = xs.shape
    H = wh.shape[0]
    if din != wi.shape[0] or h0.shape != (B, H):
        raise DimensionError(f"gru_sequence shapes xs={xs.shape}, h0={h0.shape}")
    xflat = xs.data.reshape(T * B, din)
    gi = (xflat @ wi.data).reshape(T, B, 3 * H)
    hs, cache = kernels.gru_forward(np.ascontiguousarray(gi), np.ascontiguousarray(h0.data),
                                    wh.data, bh.data, bin_.data)
    state: dict = {}

    def _bptt(g):
        if "res" not in state:
            state["res"] = kernels.gru_backward(np.ascontiguousarray(g), hs, cache, wh.data)
        return state["res"]

    def g_wi(g):
        dgi = _bptt(g)[0]
        return xflat.T @ dgi.reshape(T * B, 3 * H)

    def g_wh(g):
        dgh = _bptt(g)[1]
        return hs[:-1].reshape(T * B, H).T @ dgh.reshape(T * B, 3 * H)

    def g_bh(g):
        return _bptt(g)[1].sum(axis=(0, 1))

    def g_bin(g):
        return _bptt(g)[0][:, :, 2 * H:].sum(axis=(0, 1))

    def g_x(g):
        return (_bptt(g)[0].reshape(T * B, 3 * H) @ wi.data.T).reshape(T, B, din)

    def g_h0(g):
        return _bptt(g)[2]

    return dc.custom(hs[1:], [wi, wh, bh, bin_, xs, h0], [g_wi, g_wh, g_bh, g_bin, g_x, g_h0], "gru_seq")


# ------------------------------------------------------------------- init
def init_params(spec: InitSpec, shapes: list[tuple[str, tuple]]) -> ParamStore:
    """Weights ~ N(0, 1/fan_in), biases zero; one RNG stream per tensor.

    The first axis of a weight matrix is its fan-in.
    """
    if spec.scheme not in ("lecun_normal", "zeros"):
        raise ValueError(f"unknown init scheme {spec.scheme!r}")
    store = ParamStore()
    for i, (name, shape) in enumerate(shapes):
        if len(shape) == 1 or spec.scheme == "zeros":
            arr = np.zeros(shape)
        else:
            rng = np.random.default_rng([spec.seed, i])
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        store[name] = Tensor(arr, requires_grad=True)
    return store


def count_params(shapes: list[tuple[str, tuple]]) -> int:
    return int(sum(int(np.prod(s)) for _, s in shapes))
