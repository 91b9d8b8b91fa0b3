"""Mixture density heads on top of MLP or GRU backbones."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import diffcore as dc
from . import kernels
from . import nn
from .diffcore import DimensionError, Tensor

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_EPS = 1e-6


@dataclass
class MixtureParams:
    """Per-row mixture ``(logits, alpha, mu, sigma)``.

    ``logits``/``alpha`` are ``[B, K]``, ``mu``/``sigma`` are ``[B, K, d]``.
    Fields are tensors when produced inside a graph, arrays otherwise.
    """

    logits: Tensor
    mu: Tensor
    sigma: Tensor

    @property
    def K(self) -> int:
        return self.logits.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[2]

    @property
    def alpha(self) -> np.ndarray:
        return special.softmax(_arr(self.logits), axis=1)

    def numpy(self) -> "MixtureParams":
        return MixtureParams(_arr(self.logits), _arr(self.mu), _arr(self.sigma))

    def row(self, i) -> "MixtureParams":
        p = self.numpy()
        return MixtureParams(p.logits[i:i + 1], p.mu[i:i + 1], p.sigma[i:i + 1])


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def head_width(K: int, d: int) -> int:
    return K * (1 + 2 * d)


# ------------------------------------------------------------ primitives
def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """``max + log(sum(exp(a - max)))``; all ``-inf`` rows give ``-inf``."""
    a = dc.as_tensor(a)
    dc._check_axis(a, axis)
    m = np.max(a.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a.data - m_safe), axis=axis, keepdims=True)) + m_safe
    val = s if keepdims else np.squeeze(s, axis=axis)

    def _grad(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.data - s)
        w = np.where(np.isfinite(s), w, 0.0)
        return gk * w

    return dc.custom(val, [a], [_grad], "logsumexp")


def broadcast_to(x, shape) -> Tensor:
    """Explicit expansion of size-1 axes; the gradient sums them back."""
    x = dc.as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise DimensionError(f"broadcast_to needs equal rank, got {x.shape} -> {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    if any(x.shape[i] != 1 for i in axes):
        raise DimensionError(f"cannot expand {x.shape} to {shape}")
    return dc.custom(np.broadcast_to(x.data, shape).copy(), [x],
                     [lambda g: g.sum(axis=axes, keepdims=True)], "broadcast_to")


def transform_head(raw, K: int, d: int, eps: float = DEFAULT_EPS, elu: bool = False) -> MixtureParams:
    """Split a ``[B, K(1+2d)]`` head output into mixture parameters.

    Means pass through unchanged; scales are ``softplus(z) + eps`` (or
    ``1 + elu(z) + eps`` with ``elu=True``).
    """
    raw = dc.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != head_width(K, d):
        raise DimensionError(f"head width {raw.shape} != K(1+2d) = {head_width(K, d)}")
    B = raw.shape[0]
    logits = raw[:, :K]
    mu = dc.reshape(raw[:, K:K + K * d], (B, K, d))
    zs = dc.reshape(raw[:, K + K * d:], (B, K, d))
    sigma = (dc.elu(zs) + (1.0 + eps)) if elu else (dc.softplus(zs) + eps)
    return MixtureParams(logits, mu, sigma)


def log_softmax(logits) -> Tensor:
    logits = dc.as_tensor(logits)
    lse = logsumexp(logits, axis=1, keepdims=True)
    return logits - broadcast_to(lse, logits.shape)


def component_log_density(params: MixtureParams, y) -> Tensor:
    """``log N(y | mu_k, diag sigma_k^2)`` for every row and component, ``[B, K]``."""
    y = dc.as_tensor(y)
    B, K, d = params.mu.shape
    if y.shape != (B, d):
        raise DimensionError(f"target shape {y.shape} != ({B}, {d})")
    yk = broadcast_to(dc.reshape(y, (B, 1, d)), (B, K, d))
    u = (yk - params.mu) / params.sigma
    quad = dc.reduce_sum(dc.square(u), axis=2)
    logdet = dc.reduce_sum(dc.log(params.sigma), axis=2)
    return -0.5 * quad - logdet - 0.5 * d * LOG_2PI


def per_sample_nll(params: MixtureParams, y) -> Tensor:
    """``-logsumexp_k(log_softmax(z)_k + log N_k)``, one value per row."""
    F = log_softmax(params.logits) + component_log_density(params, y)
    return -logsumexp(F, axis=1)


def mdn_nll(params: MixtureParams, y) -> Tensor:
    """Batch-mean negative log-likelihood, composed from graph primitives."""
    return dc.reduce_mean(per_sample_nll(params, y))


def mdn_nll_fused(raw, y, K: int, d: int, eps: float = DEFAULT_EPS, elu: bool = False) -> Tensor:
    """Same loss as ``mdn_nll(transform_head(raw), y)`` as one kernel-backed node."""
    raw = dc.as_tensor(raw)
    y_arr = np.ascontiguousarray(_arr(y))
    if raw.ndim != 2 or raw.shape[1] != head_width(K, d) or y_arr.shape != (raw.shape[0], d):
        raise DimensionError(f"fused nll shapes raw={raw.shape}, y={y_arr.shape}, K={K}, d={d}")
    nll, grad = kernels.mdn_nll(np.ascontiguousarray(raw.data), y_arr, K, d, eps, elu)
    B = raw.shape[0]
    return dc.custom(np.asarray(nll.mean()), [raw], [lambda g: grad * (g / B)], "mdn_nll")


def nll_values(raw: np.ndarray, y: np.ndarray, K: int, d: int, eps: float = DEFAULT_EPS,
               elu: bool = False) -> np.ndarray:
    """Per-sample NLL without building a graph."""
    return kernels.mdn_nll(np.ascontiguousarray(raw, dtype=np.float64),
                           np.ascontiguousarray(y, dtype=np.float64), K, d, eps, elu)[0]


# ------------------------------------------------------- density & samples
def mdn_density(params: MixtureParams, y) -> np.ndarray:
    """Direct ``sum_k alpha_k N(y | mu_k, sigma_k^2)``; underflows for far tails."""
    p = params.numpy()
    y = np.asarray(y, dtype=np.float64)
    u = (y[:, None, :] - p.mu) / p.sigma
    comp = np.prod(np.exp(-0.5 * u * u) / (p.sigma * math.sqrt(2.0 * math.pi)), axis=2)
    return (p.alpha * comp).sum(axis=1)


def prune_weights(alpha, tau: float) -> np.ndarray:
    """Zero weights below ``tau`` and renormalise each row."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    if tau < 0:
        raise ValueError("prune threshold must be non-negative")
    if np.any(tau >= alpha.max(axis=1)):
        raise ValueError(f"threshold {tau} would prune every component of some row")
    if tau == 0:
        return alpha.copy()
    kept = np.where(alpha < tau, 0.0, alpha)
    return kept / kept.sum(axis=1, keepdims=True)


def mdn_sample(params: MixtureParams, rng: np.random.Generator, n: int = 1, prune: float = 0.0,
               return_components: bool = False):
    """Draw ``n`` samples per row: ``[B, n, d]`` (plus component ids if asked)."""
    p = params.numpy()
    alpha = prune_weights(p.alpha, prune)
    B, K, d = p.mu.shape
    cdf = np.cumsum(alpha, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((B, n))
    comp = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=2), K - 1)
    rows = np.arange(B)[:, None]
    eps = rng.standard_normal((B, n, d))
    out = p.mu[rows, comp] + p.sigma[rows, comp] * eps
    return (out, comp) if return_components else out


def mixture_entropy(alpha) -> np.ndarray:
    """Shannon entropy ``-sum a ln a`` per row, with ``0 ln 0 = 0``."""
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    return -special.xlogy(a, a).sum(axis=1)


def mixture_mean(params: MixtureParams) -> np.ndarray:
    p = params.numpy()
    return (p.alpha[:, :, None] * p.mu).sum(axis=1)


# ------------------------------------------------------------------ models
@dataclass
class Model:
    """A backbone plus output head; ``kind`` is ``mdn``, ``mse`` or ``rnn_mdn``."""

    kind: str
    d_in: int
    d_out: int
    K: int = 1
    width: int = 128
    layers: int = 5
    eps: float = DEFAULT_EPS
    elu_scale: bool = False
    params: nn.ParamStore = field(default_factory=nn.ParamStore)

    # architecture ---------------------------------------------------------
    @property
    def out_width(self) -> int:
        return self.d_out if self.kind == "mse" else head_width(self.K, self.d_out)

    def widths(self) -> list[int]:
        return [self.d_in] + [self.width] * self.layers + [self.out_width]

    def shapes(self) -> list[tuple[str, tuple]]:
        if self.kind == "rnn_mdn":
            return nn.gru_shapes(self.d_in, self.width) + nn.dense_layer_params("head", self.width, self.out_width)
        return nn.mlp_shapes(self.widths())

    def descriptor(self) -> dict:
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out, "K": self.K,
                "width": self.width, "layers": self.layers, "eps": self.eps, "elu_scale": self.elu_scale}

    def init(self, seed: int) -> "Model":
        self.params = nn.init_params(nn.InitSpec(seed=seed), self.shapes())
        return self

    def n_params(self) -> int:
        return nn.count_params(self.shapes())

    def clone(self) -> "Model":
        m = Model(**self.descriptor())
        m.params = self.params.copy()
        return m

    # forward ----------------------------------------------------------------
    def forward(self, x, h0=None) -> Tensor:
        """Raw outputs.  Feed-forward: ``[B, out]``.  Recurrent: ``x`` is
        ``[T, B, d_in]`` and the result ``[T*B, out]`` (time-major)."""
        if self.kind != "rnn_mdn":
            return nn.mlp_forward(self.params, x, self.widths())
        x = dc.as_tensor(x)
        T, B, _ = x.shape
        h0 = np.zeros((B, self.width)) if h0 is None else h0
        hs = nn.gru_sequence(self.params, x, h0)
        return dc.linear(dc.reshape(hs, (T * B, self.width)), self.params["head.w"], self.params["head.b"])

    def loss(self, x, y) -> Tensor:
        raw = self.forward(x)
        y = np.asarray(y, dtype=np.float64).reshape(raw.shape[0], self.d_out)
        if self.kind == "mse":
            diff = raw - y
            return dc.reduce_mean(dc.square(diff))
        return mdn_nll_fused(raw, y, self.K, self.d_out, self.eps, self.elu_scale)

    def predict_raw(self, x, batch: int = 4096) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "rnn_mdn":
            return self.forward(x).data
        outs = [self.forward(x[i:i + batch]).data for i in range(0, max(len(x), 1), batch)]
        return np.concatenate(outs, axis=0)

    def mixture(self, x) -> MixtureParams:
        if self.kind == "mse":
            raise TypeError("point-estimate models have no mixture")
        raw = self.predict_raw(x)
        mp = transform_head(Tensor(raw), self.K, self.d_out, self.eps, self.elu_scale)
        return mp.numpy()

    def nll(self, x, y) -> np.ndarray:
        """Per-sample NLL on arrays (no graph)."""
        raw = self.predict_raw(x)
        y = np.asarray(y, dtype=np.float64).reshape(raw.shape[0], self.d_out)
        return nll_values(raw, y, self.K, self.d_out, self.eps, self.elu_scale)


def build_model(kind: str, d_in: int, d_out: int, K: int = 1, width: int = 128, layers: int = 5,
                seed: int = 0, **kw) -> Model:
    if kind not in ("mdn", "mse", "rnn_mdn"):
        raise ValueError(f"unknown model kind {kind!r}")
    return Model(kind, d_in, d_out, K, width, layers, **kw).init(seed)


# ------------------------------------------------------------ diagnostics
@dataclass
class ComponentReport:
    order: np.ndarray          # components sorted by marginal probability, descending
    marginal: np.ndarray       # mean alpha_k over the inputs, [K]
    alpha: np.ndarray          # [n, K]
    mu: np.ndarray             # [n, K, d]
    sigma: np.ndarray          # [n, K, d]
    entropy: np.ndarray        # [n]

    def top(self, k: int = 3) -> np.ndarray:
        return self.order[:k]

    def to_rows(self) -> list[dict]:
        return [{"rank": r, "component": int(c), "marginal": float(self.marginal[c]),
                 "alpha_min": float(self.alpha[:, c].min()), "alpha_max": float(self.alpha[:, c].max())}
                for r, c in enumerate(self.order)]


def component_report(model: Model, inputs) -> ComponentReport:
    mp = model.mixture(inputs)
    alpha = mp.alpha
    marginal = alpha.mean(axis=0)
    order = np.argsort(-marginal, kind="stable")
    return ComponentReport(order, marginal, alpha, mp.mu, mp.sigma, mixture_entropy(alpha))
