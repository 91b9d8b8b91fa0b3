"""Pure-numpy implementations of the hot kernels.

Signatures and floating-point operation order mirror ``_kernels.pyx`` so the
ODE kernels agree bit-for-bit across backends.  The reductions (MDN loss,
MMD sums) agree to rounding only.
"""

from __future__ import annotations

import numpy as np
from scipy import special

LOG_2PI = 1.8378770664093453


# ----------------------------------------------------------------- MDN loss
def mdn_nll(raw: np.ndarray, y: np.ndarray, K: int, d: int, eps: float, elu: bool = False):
    """Per-sample mixture NLL and its gradient w.r.t. the raw head output.

    ``raw`` rows are laid out ``[z_alpha (K) | z_mu (K*d) | z_sigma (K*d)]``.
    Returns ``(nll[B], dnll_draw[B, K*(1+2d)])``.
    """
    B = raw.shape[0]
    za = raw[:, :K]
    mu = raw[:, K:K + K * d].reshape(B, K, d)
    zs = raw[:, K + K * d:].reshape(B, K, d)

    zmax = za.max(axis=1, keepdims=True)
    ez = np.exp(za - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_alpha = za - zmax - np.log(sez)
    alpha = ez / sez

    if elu:
        sig = np.where(zs > 0, zs, np.expm1(np.minimum(zs, 0.0))) + 1.0 + eps
        dsig = np.where(zs > 0, 1.0, np.exp(np.minimum(zs, 0.0)))
    else:
        sig = np.logaddexp(0.0, zs) + eps
        dsig = special.expit(zs)

    diff = y[:, None, :] - mu
    inv = 1.0 / sig
    u = diff * inv
    logn = -0.5 * (u * u).sum(axis=2) - np.log(sig).sum(axis=2) - 0.5 * d * LOG_2PI
    F = log_alpha + logn
    fmax = F.max(axis=1, keepdims=True)
    ef = np.exp(F - fmax)
    sef = ef.sum(axis=1, keepdims=True)
    nll = -(fmax[:, 0] + np.log(sef[:, 0]))
    resp = ef / sef

    grad = np.empty_like(raw)
    grad[:, :K] = alpha - resp
    rk = resp[:, :, None]
    grad[:, K:K + K * d] = (-rk * u * inv).reshape(B, K * d)
    grad[:, K + K * d:] = (-rk * (u * u - 1.0) * inv * dsig).reshape(B, K * d)
    return nll, grad


# ----------------------------------------------------------------- MMD sums
def mmd_terms(X: np.ndarray, Y: np.ndarray, scales: np.ndarray, block: int = 1024):
    """Raw RBF kernel sums for every scale.

    Returns ``(sxx, sxy, syy)`` where the within-cloud sums skip the diagonal.
    Gram matrices are never materialized beyond ``block`` rows.
    """
    return (rbf_sums(X, X, scales, True, block), rbf_sums(X, Y, scales, False, block),
            rbf_sums(Y, Y, scales, True, block))


def rbf_sums(A: np.ndarray, B: np.ndarray, scales, same: bool, block: int = 1024):
    scales = np.asarray(scales, dtype=np.float64)
    coef = -0.5 / (scales * scales)
    out = np.zeros(coef.shape[0])
    for start in range(0, A.shape[0], block):
        a = A[start:start + block]
        diff = a[:, None, :] - B[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        if same:
            rows = np.arange(a.shape[0])
            d2[rows, start + rows] = np.inf
        for s, c in enumerate(coef):
            out[s] += np.exp(c * d2).sum()
    return out


# ---------------------------------------------------------------- ODE kernels
def euler_saddle(x0: np.ndarray, r: np.ndarray, dt: float, steps: int, clip: float, keep: np.ndarray):
    """Forward Euler on ``dx/dt = r + x^2`` with the state clamped to ``[-clip, clip]``."""
    x = np.array(x0, dtype=np.float64)
    out = np.empty((x.shape[0], keep.shape[0]))
    j = 0
    for n in range(steps + 1):
        if j < keep.shape[0] and keep[j] == n:
            out[:, j] = x
            j += 1
        if n == steps:
            break
        x = x + dt * (r + x * x)
        x = np.minimum(np.maximum(x, -clip), clip)
    return out


def euler_gravity(s0: np.ndarray, active: np.ndarray, centers: np.ndarray, gm: float, gamma: float,
                  soft: float, dt: float, steps: int, keep: np.ndarray):
    """Forward Euler for a damped particle pulled by fixed point masses.

    State columns ``(x, y, vx, vy)``; ``active[i, j]`` switches body ``j`` on for
    trajectory ``i``.  Returns recorded states ``[N, len(keep), 4]``.
    """
    s = np.array(s0, dtype=np.float64)
    N = s.shape[0]
    out = np.empty((N, keep.shape[0], 4))
    j = 0
    for n in range(steps + 1):
        if j < keep.shape[0] and keep[j] == n:
            out[:, j, :] = s
            j += 1
        if n == steps:
            break
        s = s + dt * gravity_rhs(s, active, centers, gm, gamma, soft)
    return out


def gravity_rhs(s, active, centers, gm, gamma, soft):
    x, y, vx, vy = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    ax = np.zeros_like(x)
    ay = np.zeros_like(x)
    for c in range(centers.shape[0]):
        dx = x - centers[c, 0]
        dy = y - centers[c, 1]
        d2 = np.maximum(dx * dx + dy * dy, soft)
        w = active[:, c] * gm
        ax = ax - w * dx / d2
        ay = ay - w * dy / d2
    speed = np.sqrt(vx * vx + vy * vy)
    ax = ax - gamma * speed * vx
    ay = ay - gamma * speed * vy
    return np.stack([vx, vy, ax, ay], axis=1)


# Dormand-Prince 5(4) tableau
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = 9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
E1, E3, E4, E5, E6, E7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                          -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)


def dopri5_step(f, y, dt):
    """One fixed Dormand-Prince step; returns ``(y_next, error_estimate)``."""
    k1 = f(y)
    k2 = f(y + dt * (A21 * k1))
    k3 = f(y + dt * (A31 * k1 + A32 * k2))
    k4 = f(y + dt * (A41 * k1 + A42 * k2 + A43 * k3))
    k5 = f(y + dt * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4))
    k6 = f(y + dt * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5))
    y_next = y + dt * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    k7 = f(y_next)
    err = dt * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
    return y_next, err


def lorenz_rhs(s, sigma, rho, beta):
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def dopri5_lorenz(s0: np.ndarray, sigma: float, rho: float, beta: float, dt: float, steps: int,
                  keep: np.ndarray):
    y = np.array(s0, dtype=np.float64)
    out = np.empty((y.shape[0], keep.shape[0], 3))
    f = lambda s: lorenz_rhs(s, sigma, rho, beta)  # noqa: E731
    j = 0
    for n in range(steps + 1):
        if j < keep.shape[0] and keep[j] == n:
            out[:, j, :] = y
            j += 1
        if n == steps:
            break
        y, _ = dopri5_step(f, y, dt)
    return out


# ---------------------------------------------------------------- GRU sequence
def gru_forward(gi: np.ndarray, h0: np.ndarray, Wh: np.ndarray, bh: np.ndarray, bin_: np.ndarray):
    """Run the recurrence given precomputed input projections ``gi[T, B, 3H]``.

    Returns ``(hs[T+1, B, H], cache)``; ``hs[0]`` is ``h0``.
    """
    T, B, H3 = gi.shape
    H = H3 // 3
    hs = np.empty((T + 1, B, H))
    rs = np.empty((T, B, H))
    zs = np.empty((T, B, H))
    ns = np.empty((T, B, H))
    ghn = np.empty((T, B, H))
    hs[0] = h0
    h = h0
    for t in range(T):
        gh = h @ Wh + bh
        g = gi[t]
        r = special.expit(g[:, :H] + gh[:, :H])
        z = special.expit(g[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(g[:, 2 * H:] + bin_ + r * gh[:, 2 * H:])
        h = (1.0 - z) * h + z * n
        hs[t + 1] = h
        rs[t], zs[t], ns[t], ghn[t] = r, z, n, gh[:, 2 * H:]
    return hs, (rs, zs, ns, ghn)


def gru_backward(dhs: np.ndarray, hs: np.ndarray, cache, Wh: np.ndarray):
    """Backprop through time.

    ``dhs[T, B, H]`` is the loss gradient w.r.t. each emitted hidden state.
    Returns ``(dgi[T, B, 3H], dgh[T, B, 3H], dh0[B, H])``; the caller turns
    these into weight gradients with two batched matmuls.
    """
    rs, zs, ns, ghn = cache
    T, B, H = dhs.shape
    dgi = np.empty((T, B, 3 * H))
    dgh = np.empty((T, B, 3 * H))
    WhT = Wh.T
    carry = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dhs[t] + carry
        r, z, n, hprev = rs[t], zs[t], ns[t], hs[t]
        dn_pre = dh * z * (1.0 - n * n)
        dz_pre = dh * (n - hprev) * z * (1.0 - z)
        dr_pre = dn_pre * ghn[t] * r * (1.0 - r)
        dgi[t, :, :H] = dr_pre
        dgi[t, :, H:2 * H] = dz_pre
        dgi[t, :, 2 * H:] = dn_pre
        dgh[t, :, :H] = dr_pre
        dgh[t, :, H:2 * H] = dz_pre
        dgh[t, :, 2 * H:] = dn_pre * r
        carry = dh * (1.0 - z) + dgh[t] @ WhT
    return dgi, dgh, carry


# ---------------------------------------------------------------- optimizer
def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd):
    """In-place AdamW update of ``p``, ``m``, ``v``; ``c1``/``c2`` are bias corrections."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    upd = (m / c1) / (np.sqrt(v / c2) + eps)
    if wd:
        upd += wd * p
    p -= lr * upd


# -------------------------------------------------------------------- GeLU
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x):
    """Returns ``(gelu(x), cdf)``; ``cdf`` is reused by :func:`gelu_bwd`."""
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    return x * cdf, cdf


def gelu_bwd(x, cdf, g):
    return g * (cdf + x * (_INV_SQRT_2PI * np.exp(-0.5 * x * x)))
